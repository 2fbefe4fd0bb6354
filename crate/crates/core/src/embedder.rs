//! Toy visual and linguistic encoders plus the projection into the shared
//! channel width.

use rand::Rng;
use stcat_tensor::nn::Linear;
use stcat_tensor::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Result, StcatError};
use crate::posenc::sine_1d;

/// `frames × height × width × 3` pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if frames == 0 || pixels.len() != frames * height * width * 3 {
            return Err(StcatError::InvalidSample(format!(
                "clip extents {frames}x{height}x{width}x3 do not match {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(StcatError::InvalidSample(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            pixels,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.pixels[t * n..(t + 1) * n]
    }

    /// Keeps the frames at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.height * self.width * 3);
        for &t in indices {
            pixels.extend_from_slice(self.frame(t));
        }
        Self {
            frames: indices.len(),
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTokens {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
}

impl QueryTokens {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(StcatError::InvalidSample("empty token query".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(StcatError::InvalidSample(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size })
    }
}

/// `[frames * tokens_per_frame, channels]` patch features.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    pub values: Var,
    pub frames: usize,
    pub tokens_per_frame: usize,
}

/// `[tokens, channels]` word features.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatures {
    pub values: Var,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub patch: usize,
    pub patch_proj: Linear,
    pub word_table: ParamId,
    pub text_dim: usize,
    pub visual_proj: Linear,
    pub text_proj: Linear,
}

/// Rearranges a clip into `[frames * grid, patch * patch * 3]` rows.
pub fn patchify<F: Real>(clip: &VideoClip, patch: usize) -> Result<Tensor<F>> {
    if patch == 0 || clip.height % patch != 0 || clip.width % patch != 0 {
        return Err(StcatError::Config(format!(
            "frame {}x{} is not divisible by patch size {patch}",
            clip.height, clip.width
        )));
    }
    let (gh, gw) = (clip.height / patch, clip.width / patch);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(clip.frames * gh * gw * dim);
    for t in 0..clip.frames {
        let frame = clip.frame(t);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let row = (py * patch + y) * clip.width + px * patch;
                    for &v in &frame[row * 3..(row + patch) * 3] {
                        data.push(F::lit(v as f64));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![clip.frames * gh * gw, dim], data)?)
}

impl Embedder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let pdim = cfg.patch * cfg.patch * 3;
        Ok(Self {
            patch: cfg.patch,
            patch_proj: Linear::new(store, "embed.patch", pdim, cfg.visual_dim, rng)?,
            word_table: store.init("embed.words", &[cfg.vocab_size, cfg.text_dim], Init::Xavier, rng)?,
            text_dim: cfg.text_dim,
            visual_proj: Linear::new(store, "embed.visual_proj", cfg.visual_dim, cfg.channels, rng)?,
            text_proj: Linear::new(store, "embed.text_proj", cfg.text_dim, cfg.channels, rng)?,
        })
    }

    /// Each output token is a learned linear map of one patch of one frame.
    pub fn patch_embed<F: Real>(&self, g: &mut Graph<F>, clip: &VideoClip) -> Result<VisualFeatures> {
        let patches = patchify::<F>(clip, self.patch)?;
        let rows = patches.shape()[0];
        let x = g.constant(patches);
        let values = self.patch_proj.forward(g, x)?;
        Ok(VisualFeatures {
            values,
            frames: clip.frames,
            tokens_per_frame: rows / clip.frames,
        })
    }

    /// Table lookup plus a fixed 1-d sinusoidal position term.
    pub fn embed_tokens<F: Real>(&self, g: &mut Graph<F>, tokens: &QueryTokens) -> Result<TextFeatures> {
        let table = g.param(self.word_table);
        let rows = g.shape(table)[0];
        if let Some(&id) = tokens.ids.iter().find(|&&id| id >= rows) {
            return Err(StcatError::InvalidSample(format!(
                "token id {id} out of range for vocabulary of {rows}"
            )));
        }
        let words = g.gather_rows(table, &tokens.ids)?;
        let pe = g.constant(sine_1d(tokens.ids.len(), self.text_dim));
        let values = g.add(words, pe)?;
        Ok(TextFeatures {
            values,
            tokens: tokens.ids.len(),
        })
    }

    /// Two independent learned maps into the shared channel width.
    pub fn project<F: Real>(
        &self,
        g: &mut Graph<F>,
        visual: VisualFeatures,
        text: TextFeatures,
    ) -> Result<(VisualFeatures, TextFeatures)> {
        let v = self.visual_proj.forward(g, visual.values)?;
        let s = self.text_proj.forward(g, text.values)?;
        Ok((
            VisualFeatures { values: v, ..visual },
            TextFeatures { values: s, ..text },
        ))
    }
}
