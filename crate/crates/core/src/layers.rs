//! Transformer sublayers shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stcat_tensor::nn::{AttnInput, LayerNorm, Linear, Mlp, MultiHeadAttention};
use stcat_tensor::{Graph, ParamStore, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::Result;

/// Inverted dropout. Inactive unless constructed with a positive rate and
/// an rng, so evaluation and gradient checks never see it.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: (rate > 0.0).then_some(rng),
        }
    }

    pub fn apply<F: Real>(&mut self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let scale = F::lit(1.0 / keep);
        let mask = Tensor::from_fn(g.shape(x).to_vec(), |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        });
        let m = g.constant(mask);
        Ok(g.mul(x, m)?)
    }
}

/// Post-norm encoder layer: attention, add & norm, feed-forward, add & norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), c, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, rng)?,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                &[c, cfg.ffn_dim, c],
                cfg.activation.into(),
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, rng)?,
        })
    }

    /// `x: [batches * len, C]`; each batch block attends only within itself.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        pos: Option<Var>,
        batches: usize,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let a = self.attn.forward(
            g,
            &AttnInput {
                queries: x,
                keys: x,
                values: x,
                query_pos: pos,
                key_pos: pos,
                batches,
            },
        )?;
        let a = drop.apply(g, a.output)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let f = drop.apply(g, f)?;
        let x = g.add(x, f)?;
        Ok(self.norm2.forward(g, x)?)
    }
}

/// Decoder layer over one query per frame: self-attention across frames,
/// cross-attention into the matching frame's encoded tokens, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

pub struct DecoderLayerInput {
    /// `[T, C]` content queries.
    pub content: Var,
    /// `[T, C]` positional queries.
    pub position: Var,
    /// `[T, C]` frame-index encoding.
    pub time: Var,
    /// `[T * K, C]` encoded tokens, `K` per frame.
    pub memory: Var,
    /// `[T * K, C]` positional terms for the encoded tokens.
    pub memory_pos: Var,
    pub self_attention: bool,
}

impl DecoderLayer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), c, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), c, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, rng)?,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                &[c, cfg.ffn_dim, c],
                cfg.activation.into(),
                rng,
            )?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c, rng)?,
        })
    }

    /// Returns the refined content queries and the cross-attention node.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        input: &DecoderLayerInput,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let frames = g.shape(input.content)[0];
        let mut c = input.content;
        if input.self_attention {
            let sa = self.self_attn.forward(
                g,
                &AttnInput {
                    queries: c,
                    keys: c,
                    values: c,
                    query_pos: Some(input.time),
                    key_pos: Some(input.time),
                    batches: 1,
                },
            )?;
            let sa = drop.apply(g, sa.output)?;
            let x = g.add(c, sa)?;
            c = self.norm1.forward(g, x)?;
        }
        let ca = self.cross_attn.forward(
            g,
            &AttnInput {
                queries: c,
                keys: input.memory,
                values: input.memory,
                query_pos: Some(input.position),
                key_pos: Some(input.memory_pos),
                batches: frames,
            },
        )?;
        let weights = ca.weights;
        let out = drop.apply(g, ca.output)?;
        let x = g.add(c, out)?;
        let c = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, c)?;
        let f = drop.apply(g, f)?;
        let x = g.add(c, f)?;
        Ok((self.norm3.forward(g, x)?, weights))
    }
}

/// Three-layer perceptron head with the final layer zero-initialized.
pub fn zero_last_head<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    cfg: &ModelConfig,
    out_dim: usize,
    rng: &mut impl Rng,
) -> Result<Mlp> {
    let c = cfg.channels;
    let mut mlp = Mlp::new(store, name, &[c, c, c], cfg.activation.into(), rng)?;
    mlp.layers.push(Linear::with_init(
        store,
        &format!("{name}.2"),
        c,
        out_dim,
        stcat_tensor::Init::Zeros,
        rng,
    )?);
    Ok(mlp)
}
