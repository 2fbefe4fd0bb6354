//! Dual decoder: a box branch that refines per-frame anchors layer by layer
//! and a temporal branch for boundary prediction. Both start from the same
//! template-derived queries.

use rand::Rng;
use stcat_tensor::nn::{Linear, Mlp};
use stcat_tensor::{Graph, ParamStore, Real, Var};

use crate::config::{AnchorSpace, ModelConfig};
use crate::encoder::EncodedContext;
use crate::error::Result;
use crate::layers::{DecoderLayer, DecoderLayerInput, Dropout};
use crate::posenc::{box_sine, sine_1d};
use crate::template::Template;

/// One object query per frame, stored row-wise.
#[derive(Clone, Copy, Debug)]
pub struct ObjectQueries {
    /// `[T, C]`
    pub content: Var,
    /// `[T, C]`
    pub position: Var,
    /// `[T, 4]`
    pub anchors: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Box,
    Time,
}

#[derive(Clone, Debug)]
pub struct DecoderBranch {
    pub layers: Vec<DecoderLayer>,
    /// Maps the sinusoidal anchor encoding to a positional query.
    pub query_pos: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[T, C]` final box-branch content queries.
    pub bbox_feats: Var,
    /// `[T, C]` final temporal-branch content queries.
    pub time_feats: Var,
    /// `[T, 4]` reference anchors consumed by the final box prediction.
    pub anchors: Var,
    /// Cross-attention nodes of the box branch, one per layer.
    pub box_attention: Vec<Var>,
    pub time_attention: Vec<Var>,
    /// Intermediate box predictions (refined anchors) of every layer but the last.
    pub aux_boxes: Vec<Var>,
    /// Temporal-branch features of every layer but the last.
    pub aux_time_feats: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub box_branch: DecoderBranch,
    pub time_branch: DecoderBranch,
    pub channels: usize,
    pub anchor_space: AnchorSpace,
    pub self_attention: bool,
}

/// Applies `delta` to `anchors` in the configured coordinate space.
pub fn apply_offset<F: Real>(g: &mut Graph<F>, anchors: Var, delta: Var, space: AnchorSpace) -> Result<Var> {
    match space {
        AnchorSpace::Plain => {
            let x = g.add(anchors, delta)?;
            Ok(g.clamp(x, F::zero(), F::one())?)
        }
        AnchorSpace::Logit => {
            let eps = F::lit(1e-5);
            let a = g.clamp(anchors, eps, F::one() - eps)?;
            let la = g.log(a)?;
            let na = g.scale(a, -F::one())?;
            let na = g.offset(na, F::one())?;
            let lna = g.log(na)?;
            let logit = g.sub(la, lna)?;
            let x = g.add(logit, delta)?;
            Ok(g.sigmoid(x)?)
        }
    }
}

impl DecoderBranch {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let layers = (0..cfg.depth)
            .map(|i| DecoderLayer::new(store, &format!("{name}.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            query_pos: Linear::new(store, &format!("{name}.query_pos"), 2 * c, c, rng)?,
        })
    }

    /// `Linear(PE(anchor))`.
    pub fn positional_query<F: Real>(&self, g: &mut Graph<F>, anchors: Var, channels: usize) -> Result<Var> {
        let pe = box_sine(g, anchors, channels / 2)?;
        Ok(self.query_pos.forward(g, pe)?)
    }
}

impl Decoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            box_branch: DecoderBranch::new(store, "decoder.box", cfg, rng)?,
            time_branch: DecoderBranch::new(store, "decoder.time", cfg, rng)?,
            channels: cfg.channels,
            anchor_space: cfg.anchor_space,
            self_attention: cfg.decoder_self_attention,
        })
    }

    pub fn branch(&self, kind: BranchKind) -> &DecoderBranch {
        match kind {
            BranchKind::Box => &self.box_branch,
            BranchKind::Time => &self.time_branch,
        }
    }

    /// `C_t = q_c` for every frame, `P_t = Linear(PE(q_p^t))`, anchor `q_p^t`.
    pub fn init_queries<F: Real>(&self, g: &mut Graph<F>, tpl: &Template, kind: BranchKind) -> Result<ObjectQueries> {
        let t = g.shape(tpl.position)[0];
        let content = g.repeat(tpl.content, t)?;
        let content = g.reshape(content, [t, self.channels])?;
        let position = self.branch(kind).positional_query(g, tpl.position, self.channels)?;
        Ok(ObjectQueries {
            content,
            position,
            anchors: tpl.position,
        })
    }

    /// One decoder layer. With `refine = Some(head)` (box branch) the anchors
    /// are moved by the head's offsets and the positional query recomputed.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_block<F: Real>(
        &self,
        g: &mut Graph<F>,
        kind: BranchKind,
        layer: usize,
        queries: &ObjectQueries,
        ctx: &EncodedContext,
        refine: Option<&Mlp>,
        drop: &mut Dropout,
    ) -> Result<(ObjectQueries, Var)> {
        let branch = self.branch(kind);
        let time = g.constant(sine_1d(ctx.frames, self.channels));
        let input = DecoderLayerInput {
            content: queries.content,
            position: queries.position,
            time,
            memory: ctx.features,
            memory_pos: ctx.feature_pos,
            self_attention: self.self_attention,
        };
        let (content, attn) = branch.layers[layer].forward(g, &input, drop)?;
        let mut next = ObjectQueries { content, ..*queries };
        if let (BranchKind::Box, Some(head)) = (kind, refine) {
            let delta = head.forward(g, content)?;
            next.anchors = apply_offset(g, queries.anchors, delta, self.anchor_space)?;
            next.position = branch.positional_query(g, next.anchors, self.channels)?;
        }
        Ok((next, attn))
    }

    /// Runs both branches. `box_head` is the shared regression head; it
    /// refines anchors after every box layer except the last, whose offset
    /// is applied by the final box prediction.
    pub fn decode<F: Real>(
        &self,
        g: &mut Graph<F>,
        tpl: &Template,
        ctx: &EncodedContext,
        box_head: &Mlp,
        drop: &mut Dropout,
    ) -> Result<DecoderOutput> {
        let depth = self.box_branch.layers.len();
        let mut q = self.init_queries(g, tpl, BranchKind::Box)?;
        let mut box_attention = Vec::with_capacity(depth);
        let mut aux_boxes = Vec::new();
        for l in 0..depth {
            let refine = (l + 1 < depth).then_some(box_head);
            let (next, attn) = self.decoder_block(g, BranchKind::Box, l, &q, ctx, refine, drop)?;
            if refine.is_some() {
                aux_boxes.push(next.anchors);
            }
            box_attention.push(attn);
            q = next;
        }

        let mut tq = self.init_queries(g, tpl, BranchKind::Time)?;
        let mut time_attention = Vec::with_capacity(depth);
        let mut aux_time_feats = Vec::new();
        for l in 0..depth {
            let (next, attn) = self.decoder_block(g, BranchKind::Time, l, &tq, ctx, None, drop)?;
            if l + 1 < depth {
                aux_time_feats.push(next.content);
            }
            time_attention.push(attn);
            tq = next;
        }
        Ok(DecoderOutput {
            bbox_feats: q.content,
            time_feats: tq.content,
            anchors: q.anchors,
            box_attention,
            time_attention,
            aux_boxes,
            aux_time_feats,
        })
    }
}

/// Head-averaged `[T, K]` cross-attention weights of one decoder layer.
pub fn attention_map<F: Real>(g: &Graph<F>, attn: Var) -> Option<Vec<Vec<f64>>> {
    let (shape, probs) = g.attention_probs(attn)?;
    let (t, h, k) = (shape.batches, shape.heads, shape.k_len);
    let mut out = vec![vec![0.0; k]; t];
    for (b, row) in out.iter_mut().enumerate() {
        for head in 0..h {
            let base = (b * h + head) * shape.q_len * k;
            for (j, v) in row.iter_mut().enumerate() {
                *v += probs[base + j].as_f64() / h as f64;
            }
        }
    }
    Some(out)
}
