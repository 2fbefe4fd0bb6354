//! Video-level query template: one content vector shared by every frame and
//! one reference anchor per frame.

use rand::Rng;
use stcat_tensor::nn::Linear;
use stcat_tensor::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::encoder::EncodedContext;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Template {
    /// `[1, C]`
    pub content: Var,
    /// `[T, 4]` anchors `(cx, cy, w, h)`, each in `(0, 1)`.
    pub position: Var,
}

#[derive(Clone, Debug)]
pub struct TemplateGenerator {
    pub content: Linear,
    pub gamma: Linear,
    pub beta: Linear,
    /// `C -> 4` mapping of modulated frame tokens.
    pub anchor: Linear,
    /// Learned shared anchor logits used when the local template is ablated.
    pub shared_anchor: ParamId,
    pub use_global: bool,
    pub use_local: bool,
    pub channels: usize,
}

impl TemplateGenerator {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            content: Linear::new(store, "template.content", c, c, rng)?,
            gamma: Linear::new(store, "template.gamma", c, c, rng)?,
            beta: Linear::new(store, "template.beta", c, c, rng)?,
            anchor: Linear::new(store, "template.anchor", c, 4, rng)?,
            shared_anchor: store.init("template.shared_anchor", &[4], Init::Zeros, rng)?,
            use_global: !cfg.no_global_template,
            use_local: !cfg.no_local_template,
            channels: c,
        })
    }

    /// `q_c = W_c p_g + b_c`.
    pub fn content_term<F: Real>(&self, g: &mut Graph<F>, global: Var) -> Result<Var> {
        self.content.forward(g, global).map_err(Into::into)
    }

    /// `(tanh(W_gamma p_g + b_gamma), tanh(W_beta p_g + b_beta))`, each `[1, C]`.
    pub fn modulation_vectors<F: Real>(&self, g: &mut Graph<F>, global: Var) -> Result<(Var, Var)> {
        let gamma = self.gamma.forward(g, global)?;
        let gamma = g.tanh(gamma)?;
        let beta = self.beta.forward(g, global)?;
        let beta = g.tanh(beta)?;
        Ok((gamma, beta))
    }

    /// `sigmoid(f_p(gamma * p_l^t + beta))` for every frame: `[T, 4]`.
    pub fn position_term<F: Real>(&self, g: &mut Graph<F>, local: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.channels;
        let gamma = g.reshape(gamma, [c])?;
        let beta = g.reshape(beta, [c])?;
        let m = g.mul_bcast(local, gamma)?;
        let m = g.add_bcast(m, beta)?;
        let logits = self.anchor.forward(g, m)?;
        Ok(g.sigmoid(logits)?)
    }

    pub fn generate<F: Real>(&self, g: &mut Graph<F>, ctx: &EncodedContext) -> Result<Template> {
        let content = if self.use_global {
            self.content_term(g, ctx.global)?
        } else {
            g.constant(Tensor::zeros(vec![1, self.channels]))
        };
        let position = if self.use_local {
            let (gamma, beta) = self.modulation_vectors(g, ctx.global)?;
            self.position_term(g, ctx.local, gamma, beta)?
        } else {
            let shared = g.param(self.shared_anchor);
            let shared = g.sigmoid(shared)?;
            let rows = g.repeat(shared, ctx.frames)?;
            g.reshape(rows, [ctx.frames, 4])?
        };
        Ok(Template { content, position })
    }
}
