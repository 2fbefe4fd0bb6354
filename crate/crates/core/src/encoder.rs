//! Cross-modal spatio-temporal encoder.
//!
//! Every block runs a spatial interaction layer on each frame's sequence
//! `[p_l^t, visual tokens of frame t, text tokens]`, then a temporal
//! interaction layer on `[p_g, p_l^1 .. p_l^T]`. Text tokens are shared by
//! all frames: the per-frame text outputs of a spatial layer are averaged
//! back into one sentence state before the next block.

use rand::Rng;
use stcat_tensor::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::embedder::{TextFeatures, VisualFeatures};
use crate::error::{Result, StcatError};
use crate::layers::{Dropout, EncoderLayer};
use crate::posenc::{sine_1d, sine_2d};

#[derive(Clone, Copy, Debug)]
pub struct EncoderState {
    /// `[T * N_v, C]`
    pub visual: Var,
    /// `[N_s, C]`
    pub text: Var,
    /// `[T, C]`
    pub local: Var,
    /// `[1, C]`
    pub global: Var,
    pub frames: usize,
    pub visual_tokens: usize,
    pub text_tokens: usize,
}

impl EncoderState {
    pub fn spatial_len(&self) -> usize {
        1 + self.visual_tokens + self.text_tokens
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedContext {
    /// `[T * (N_v + N_s), C]` per-frame visual and text token states.
    pub features: Var,
    /// Positional terms matching `features` row for row.
    pub feature_pos: Var,
    /// `[1, C]`
    pub global: Var,
    /// `[T, C]`
    pub local: Var,
    pub frames: usize,
    pub visual_tokens: usize,
    pub text_tokens: usize,
}

impl EncodedContext {
    pub fn tokens_per_frame(&self) -> usize {
        self.visual_tokens + self.text_tokens
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub spatial: EncoderLayer,
    pub temporal: EncoderLayer,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub local_token: ParamId,
    pub global_token: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub channels: usize,
    pub grid: (usize, usize),
    pub temporal_enabled: bool,
}

impl Encoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(StcatError::Config("encoder depth must be at least 1".into()));
        }
        let c = cfg.channels;
        let local_token = store.init("encoder.local_token", &[1, c], Init::Xavier, rng)?;
        let global_token = store.init("encoder.global_token", &[1, c], Init::Xavier, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Ok(EncoderBlock {
                    spatial: EncoderLayer::new(store, &format!("encoder.{i}.spatial"), cfg, rng)?,
                    temporal: EncoderLayer::new(store, &format!("encoder.{i}.temporal"), cfg, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            local_token,
            global_token,
            blocks,
            channels: c,
            grid: (cfg.height / cfg.patch, cfg.width / cfg.patch),
            temporal_enabled: !cfg.no_temporal_layer,
        })
    }

    /// Initial state: one learned local token replicated per frame and the
    /// learned global token.
    pub fn initial_state<F: Real>(
        &self,
        g: &mut Graph<F>,
        visual: VisualFeatures,
        text: TextFeatures,
    ) -> Result<EncoderState> {
        let local = g.param(self.local_token);
        let local = g.repeat(local, visual.frames)?;
        let local = g.reshape(local, [visual.frames, self.channels])?;
        Ok(EncoderState {
            visual: visual.values,
            text: text.values,
            local,
            global: g.param(self.global_token),
            frames: visual.frames,
            visual_tokens: visual.tokens_per_frame,
            text_tokens: text.tokens,
        })
    }

    /// The joint sequence of frame `t`: `[1 + N_v + N_s, C]`.
    pub fn build_spatial_input<F: Real>(&self, g: &mut Graph<F>, state: &EncoderState, t: usize) -> Result<Var> {
        if t >= state.frames {
            return Err(StcatError::Config(format!(
                "frame index {t} out of range for {} frames",
                state.frames
            )));
        }
        let local = g.slice(state.local, 0, t, 1)?;
        let visual = g.slice(state.visual, 0, t * state.visual_tokens, state.visual_tokens)?;
        Ok(g.concat(&[local, visual, state.text], 0)?)
    }

    /// All frame sequences stacked: `[T * (1 + N_v + N_s), C]`.
    pub fn build_spatial_inputs<F: Real>(&self, g: &mut Graph<F>, state: &EncoderState) -> Result<Var> {
        let (t, c) = (state.frames, self.channels);
        let local = g.reshape(state.local, [t, 1, c])?;
        let visual = g.reshape(state.visual, [t, state.visual_tokens, c])?;
        let text = g.repeat(state.text, t)?;
        let x = g.concat(&[local, visual, text], 1)?;
        Ok(g.reshape(x, [t * state.spatial_len(), c])?)
    }

    /// Positional terms for one frame's encoded tokens: 2-d for patches,
    /// 1-d for words.
    pub fn token_positions<F: Real>(&self, visual_tokens: usize, text_tokens: usize) -> Result<Tensor<F>> {
        let (gh, gw) = self.grid;
        if gh * gw != visual_tokens {
            return Err(StcatError::Config(format!(
                "{visual_tokens} visual tokens do not match the {gh}x{gw} patch grid"
            )));
        }
        let v = sine_2d::<F>(gh, gw, self.channels);
        let s = sine_1d::<F>(text_tokens, self.channels);
        let mut data = v.into_data();
        data.extend(s.into_data());
        Ok(Tensor::new(vec![visual_tokens + text_tokens, self.channels], data)?)
    }

    fn spatial_positions<F: Real>(&self, state: &EncoderState) -> Result<Tensor<F>> {
        let c = self.channels;
        let tokens = self.token_positions::<F>(state.visual_tokens, state.text_tokens)?;
        let mut data = Vec::with_capacity(state.frames * state.spatial_len() * c);
        for _ in 0..state.frames {
            data.extend(std::iter::repeat(F::zero()).take(c));
            data.extend_from_slice(tokens.data());
        }
        Ok(Tensor::new(vec![state.frames * state.spatial_len(), c], data)?)
    }

    /// One spatial interaction layer over every frame. Returns the updated
    /// state and the per-frame `[T, N_v + N_s, C]` visual and text outputs.
    pub fn spatial_layer<F: Real>(
        &self,
        g: &mut Graph<F>,
        layer: &EncoderLayer,
        state: &EncoderState,
        drop: &mut Dropout,
    ) -> Result<(EncoderState, Var)> {
        let (t, c, len) = (state.frames, self.channels, state.spatial_len());
        let x = self.build_spatial_inputs(g, state)?;
        let pos = self.spatial_positions::<F>(state)?;
        let pos = g.constant(pos);
        let y = layer.forward(g, x, Some(pos), t, drop)?;
        let y = g.reshape(y, [t, len, c])?;
        let local = g.slice(y, 1, 0, 1)?;
        let local = g.reshape(local, [t, c])?;
        let tokens = g.slice(y, 1, 1, len - 1)?;
        let visual = g.slice(y, 1, 1, state.visual_tokens)?;
        let visual = g.reshape(visual, [t * state.visual_tokens, c])?;
        let text = g.slice(y, 1, 1 + state.visual_tokens, state.text_tokens)?;
        let text = g.mean_axis(text, 0)?;
        Ok((
            EncoderState {
                visual,
                text,
                local,
                ..*state
            },
            tokens,
        ))
    }

    /// `[1 + T, C]`: the global token followed by the frame tokens, with a
    /// frame-index encoding added to the frame tokens only.
    pub fn build_temporal_input<F: Real>(&self, g: &mut Graph<F>, global: Var, local: Var) -> Result<Var> {
        let t = g.shape(local)[0];
        let pe = g.constant(sine_1d(t, self.channels));
        let local = g.add(local, pe)?;
        Ok(g.concat(&[global, local], 0)?)
    }

    /// Returns the updated `(global, local)` tokens.
    pub fn temporal_layer<F: Real>(
        &self,
        g: &mut Graph<F>,
        layer: &EncoderLayer,
        global: Var,
        local: Var,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let t = g.shape(local)[0];
        let x = self.build_temporal_input(g, global, local)?;
        let y = layer.forward(g, x, None, 1, drop)?;
        let global = g.slice(y, 0, 0, 1)?;
        let local = g.slice(y, 0, 1, t)?;
        Ok((global, local))
    }

    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<F>,
        visual: VisualFeatures,
        text: TextFeatures,
        drop: &mut Dropout,
    ) -> Result<EncodedContext> {
        let mut state = self.initial_state(g, visual, text)?;
        let mut tokens = None;
        for block in &self.blocks {
            let (next, frame_tokens) = self.spatial_layer(g, &block.spatial, &state, drop)?;
            state = next;
            tokens = Some(frame_tokens);
            if self.temporal_enabled {
                let (global, local) = self.temporal_layer(g, &block.temporal, state.global, state.local, drop)?;
                state.global = global;
                state.local = local;
            } else {
                // Without the temporal layer the global token is the mean of the frame tokens.
                let mean = g.mean_axis(state.local, 0)?;
                state.global = g.reshape(mean, [1, self.channels])?;
            }
        }
        let tokens = tokens.expect("at least one block");
        let k = state.visual_tokens + state.text_tokens;
        let features = g.reshape(tokens, [state.frames * k, self.channels])?;
        let pos = self.token_positions::<F>(state.visual_tokens, state.text_tokens)?;
        let pos = g.constant(pos);
        let pos = g.repeat(pos, state.frames)?;
        let feature_pos = g.reshape(pos, [state.frames * k, self.channels])?;
        Ok(EncodedContext {
            features,
            feature_pos,
            global: state.global,
            local: state.local,
            frames: state.frames,
            visual_tokens: state.visual_tokens,
            text_tokens: state.text_tokens,
        })
    }
}
