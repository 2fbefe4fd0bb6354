//! The full grounding model: embedder, encoder, template generator,
//! decoder and heads wired together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcat_tensor::{GradCheckReport, Graph, ParamStore, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::decoder::{attention_map, Decoder, DecoderOutput};
use crate::embedder::{Embedder, QueryTokens, VideoClip};
use crate::encoder::{EncodedContext, Encoder};
use crate::error::{Result, StcatError};
use crate::grounding::select_segment;
use crate::layers::Dropout;
use crate::objectives::{
    bbox_loss, segment_loss, temporal_loss, total_loss, Bbox, Heads, LossBreakdown, LossParts, Target,
};
use crate::template::{Template, TemplateGenerator};

#[derive(Clone, Debug)]
pub struct Stcat {
    pub config: ModelConfig,
    pub embedder: Embedder,
    pub encoder: Encoder,
    pub template: TemplateGenerator,
    pub decoder: Decoder,
    pub heads: Heads,
}

/// Per-layer predictions used for deep supervision.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    /// `[T, 4]`
    pub boxes: Var,
    /// `[T, 1]` start distribution.
    pub start: Var,
    /// `[T, 1]` end distribution.
    pub end: Var,
    /// `[T, 1]` in-segment logits.
    pub segment: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub context: EncodedContext,
    pub template: Template,
    pub decoded: DecoderOutput,
    pub last: LayerPrediction,
    /// Predictions of every decoder layer but the last.
    pub intermediate: Vec<LayerPrediction>,
}

/// Inference result in sampled-frame coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub boxes: Vec<Bbox>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// In-segment probabilities.
    pub segment: Vec<f64>,
    pub span: (usize, usize),
    /// Box-branch cross-attention per layer, `[T][K]` head-averaged weights.
    pub attention: Vec<Vec<Vec<f64>>>,
}

fn column<F: Real>(g: &Graph<F>, v: Var) -> Vec<f64> {
    g.value(v).to_f64_vec()
}

impl Stcat {
    /// Builds the model and its freshly initialized parameters from `cfg.seed`.
    pub fn new<F: Real>(cfg: &ModelConfig) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let embedder = Embedder::new(&mut store, cfg, &mut rng)?;
        let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
        let template = TemplateGenerator::new(&mut store, cfg, &mut rng)?;
        let decoder = Decoder::new(&mut store, cfg, &mut rng)?;
        let heads = Heads::new(&mut store, cfg, &mut rng)?;
        let model = Self {
            config: cfg.clone(),
            embedder,
            encoder,
            template,
            decoder,
            heads,
        };
        Ok((model, store))
    }

    /// Checks that a clip and query fit this model.
    pub fn check_inputs(&self, clip: &VideoClip, tokens: &QueryTokens) -> Result<()> {
        let c = &self.config;
        let mut bad = Vec::new();
        if clip.frames != c.frames {
            bad.push(format!("frames {} != {}", clip.frames, c.frames));
        }
        if clip.height != c.height {
            bad.push(format!("height {} != {}", clip.height, c.height));
        }
        if clip.width != c.width {
            bad.push(format!("width {} != {}", clip.width, c.width));
        }
        if tokens.vocab_size > c.vocab_size {
            bad.push(format!("vocab_size {} > {}", tokens.vocab_size, c.vocab_size));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(StcatError::InvalidSample(format!(
                "input does not match model config: {}",
                bad.join(", ")
            )))
        }
    }

    fn layer_prediction<F: Real>(&self, g: &mut Graph<F>, boxes: Var, time_feats: Var) -> Result<LayerPrediction> {
        let (start, end) = self.heads.temporal_head(g, time_feats)?;
        let segment = self.heads.segment_head(g, time_feats)?;
        Ok(LayerPrediction {
            boxes,
            start,
            end,
            segment,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        clip: &VideoClip,
        tokens: &QueryTokens,
        drop: &mut Dropout,
    ) -> Result<ModelOutput> {
        self.check_inputs(clip, tokens)?;
        let visual = self.embedder.patch_embed(g, clip)?;
        let text = self.embedder.embed_tokens(g, tokens)?;
        let (visual, text) = self.embedder.project(g, visual, text)?;
        let context = self.encoder.encode(g, visual, text, drop)?;
        let template = self.template.generate(g, &context)?;
        let decoded = self.decoder.decode(g, &template, &context, &self.heads.bbox, drop)?;
        let boxes = self.heads.box_head(g, decoded.bbox_feats, decoded.anchors)?;
        let last = self.layer_prediction(g, boxes, decoded.time_feats)?;
        let mut intermediate = Vec::new();
        if self.config.aux_loss {
            for (&b, &t) in decoded.aux_boxes.iter().zip(&decoded.aux_time_feats) {
                intermediate.push(self.layer_prediction(g, b, t)?);
            }
        }
        Ok(ModelOutput {
            context,
            template,
            decoded,
            last,
            intermediate,
        })
    }

    /// Total loss on the tape and its breakdown. With `aux_loss` every part
    /// also includes the matching term of each intermediate layer.
    pub fn loss<F: Real>(&self, g: &mut Graph<F>, out: &ModelOutput, target: &Target) -> Result<(Var, LossBreakdown)> {
        target.validate()?;
        let start_target = target.start_heatmap()?;
        let end_target = target.end_heatmap()?;
        let labels = target.segment_labels();
        let mut sums: Option<[Var; 4]> = None;
        for pred in std::iter::once(&out.last).chain(&out.intermediate) {
            let (l1, gi) = bbox_loss(g, pred.boxes, target)?;
            let temp = temporal_loss(
                g,
                pred.start,
                pred.end,
                &start_target,
                &end_target,
                self.config.kl_direction,
            )?;
            let seg = segment_loss(g, pred.segment, &labels)?;
            let terms = [l1, gi, temp, seg];
            sums = Some(match sums {
                None => terms,
                Some(acc) => {
                    let mut next = acc;
                    for (n, t) in next.iter_mut().zip(terms) {
                        *n = g.add(*n, t)?;
                    }
                    next
                }
            });
        }
        let [l1, gi, temp, seg] = sums.expect("at least one layer prediction");
        let weights = self.config.loss_weights();
        let value = |g: &Graph<F>, v: Var| g.value(v).item().as_f64();
        let parts = LossParts {
            l1: value(g, l1),
            giou: value(g, gi),
            temp: value(g, temp),
            seg: value(g, seg),
        };
        let breakdown = total_loss(parts, weights)?;
        let mut total = g.scale(l1, F::lit(weights.l1))?;
        for (v, w) in [(gi, weights.giou), (temp, weights.temp), (seg, weights.seg)] {
            let term = g.scale(v, F::lit(w))?;
            total = g.add(total, term)?;
        }
        Ok((total, breakdown))
    }

    /// Inference with frozen parameters.
    pub fn predict<F: Real>(
        &self,
        store: &ParamStore<F>,
        clip: &VideoClip,
        tokens: &QueryTokens,
    ) -> Result<Prediction> {
        let mut g = Graph::new(store, false);
        let out = self.forward(&mut g, clip, tokens, &mut Dropout::off())?;
        let flat = column(&g, out.last.boxes);
        let boxes = flat.chunks(4).map(Bbox::from_slice).collect();
        let start = column(&g, out.last.start);
        let end = column(&g, out.last.end);
        let segment = column(&g, out.last.segment)
            .into_iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let span = select_segment(&start, &end);
        let attention = out
            .decoded
            .box_attention
            .iter()
            .map(|&a| attention_map(&g, a).expect("cross-attention node"))
            .collect();
        Ok(Prediction {
            boxes,
            start,
            end,
            segment,
            span,
            attention,
        })
    }
}

/// Replaces every all-zero parameter tensor with small random values so no
/// gradient path is trivially blocked.
pub fn perturb_zero_params<F: Real>(store: &mut ParamStore<F>, scale: f64, rng: &mut impl Rng) -> Result<()> {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, _, t)| t.data().iter().all(|v| *v == F::zero()))
        .map(|(id, _, t)| (id, t.shape().to_vec()))
        .collect();
    for (id, shape) in ids {
        let t = Tensor::from_fn(shape, |_| F::lit(rng.gen_range(-scale..scale)));
        store.set(id, t)?;
    }
    Ok(())
}

/// Central-difference check of the total loss gradient with respect to every
/// scalar of every parameter, in 64-bit.
pub fn gradient_check(
    model: &Stcat,
    store: &ParamStore<f64>,
    clip: &VideoClip,
    tokens: &QueryTokens,
    target: &Target,
    eps: f64,
) -> Result<GradCheckReport> {
    let loss_at = |s: &ParamStore<f64>, grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut g = Graph::new(s, grad);
        let out = model.forward(&mut g, clip, tokens, &mut Dropout::off())?;
        let (loss, _) = model.loss(&mut g, &out, target)?;
        let value = g.value(loss).item();
        let grads = if grad {
            let grads = g.backward(loss)?;
            Some(g.param_grads(&grads))
        } else {
            None
        };
        Ok((value, grads))
    };
    let (_, analytic) = loss_at(store, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let mut flat = 0;
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for i in 0..grad.numel() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let (plus, _) = loss_at(&work, false)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let (minus, _) = loss_at(&work, false)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = stcat_tensor::rel_error(a, numeric);
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst_index: flat,
                    analytic: a,
                    numeric,
                };
            }
            flat += 1;
        }
    }
    Ok(report)
}
