//! Prediction heads and training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stcat_tensor::nn::Mlp;
use stcat_tensor::{Graph, ParamStore, Real, Tensor, Var};

use crate::config::{AnchorSpace, KlDirection, ModelConfig};
use crate::decoder::apply_offset;
use crate::error::{Result, StcatError};
use crate::layers::zero_last_head;

/// Normalized `(cx, cy, w, h)` box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

fn overlap(a: Bbox, b: Bbox) -> (f64, f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corners as the intersection, so identical boxes give exactly 1.
    let area_a = (ax1 - ax0).max(0.0) * (ay1 - ay0).max(0.0);
    let area_b = (bx1 - bx0).max(0.0) * (by1 - by0).max(0.0);
    let union = area_a + area_b - inter;
    let enclosure = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    (inter, union, enclosure)
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: Bbox, b: Bbox) -> f64 {
    let (inter, union, _) = overlap(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `[-1, 1]`. Degenerate boxes give IoU 0 and an empty
/// enclosure contributes no penalty.
pub fn giou(a: Bbox, b: Bbox) -> f64 {
    let (inter, union, enclosure) = overlap(a, b);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosure <= 0.0 {
        iou
    } else {
        iou - (enclosure - union) / enclosure
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Discrete Gaussian over `frames` bins centred at `center`, normalized.
pub fn gaussian_heatmap(center: usize, frames: usize, sigma: f64) -> Result<Vec<f64>> {
    if center >= frames {
        return Err(StcatError::InvalidSample(format!(
            "heatmap center {center} outside {frames} frames"
        )));
    }
    if !(sigma > 0.0) {
        return Err(StcatError::Config(format!(
            "heatmap sigma must be positive, got {sigma}"
        )));
    }
    let raw: Vec<f64> = (0..frames)
        .map(|t| {
            let d = t as f64 - center as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / z).collect())
}

pub const PROB_FLOOR: f64 = 1e-12;

/// `sum_i p_i (ln p_i - ln max(q_i, floor))`, skipping `p_i = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub temp: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 3.0,
            temp: 10.0,
            seg: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [
            ("l1", self.l1),
            ("giou", self.giou),
            ("temp", self.temp),
            ("seg", self.seg),
        ] {
            if !(w >= 0.0) {
                return Err(StcatError::Config(format!(
                    "loss weight {n} must be non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l1: f64,
    pub giou: f64,
    pub temp: f64,
    pub seg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub temp: f64,
    pub seg: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l1={:.6} giou={:.6} temp={:.6} seg={:.6} total={:.6}",
            self.l1, self.giou, self.temp, self.seg, self.total
        )
    }
}

/// Weighted combination of the four loss terms.
pub fn total_loss(parts: LossParts, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let total = weights.l1 * parts.l1 + weights.giou * parts.giou + weights.temp * parts.temp + weights.seg * parts.seg;
    Ok(LossBreakdown {
        l1: parts.l1,
        giou: parts.giou,
        temp: parts.temp,
        seg: parts.seg,
        total,
        weights,
    })
}

/// Supervision for one sample in sampled-frame coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub start: usize,
    pub end: usize,
    /// One box per frame in `start..=end`.
    pub boxes: Vec<Bbox>,
    pub frames: usize,
    pub sigma: f64,
}

impl Target {
    pub fn validate(&self) -> Result<()> {
        if self.start > self.end || self.end >= self.frames {
            return Err(StcatError::InvalidSample(format!(
                "segment [{}, {}] invalid for {} frames",
                self.start, self.end, self.frames
            )));
        }
        if self.boxes.len() != self.end - self.start + 1 {
            return Err(StcatError::InvalidSample(format!(
                "{} boxes for a segment of {} frames",
                self.boxes.len(),
                self.end - self.start + 1
            )));
        }
        Ok(())
    }

    pub fn start_heatmap(&self) -> Result<Vec<f64>> {
        gaussian_heatmap(self.start, self.frames, self.sigma)
    }

    pub fn end_heatmap(&self) -> Result<Vec<f64>> {
        gaussian_heatmap(self.end, self.frames, self.sigma)
    }

    pub fn segment_labels(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|t| if (self.start..=self.end).contains(&t) { 1.0 } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    /// Shared box regression head, also used for anchor refinement.
    pub bbox: Mlp,
    pub temporal: Mlp,
    pub segment: Mlp,
    pub anchor_space: AnchorSpace,
}

impl Heads {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            bbox: zero_last_head(store, "head.bbox", cfg, 4, rng)?,
            temporal: zero_last_head(store, "head.temporal", cfg, 2, rng)?,
            segment: zero_last_head(store, "head.segment", cfg, 1, rng)?,
            anchor_space: cfg.anchor_space,
        })
    }

    /// `[T, 4]` boxes: anchor plus the head's offset, kept inside `[0, 1]`.
    pub fn box_head<F: Real>(&self, g: &mut Graph<F>, feats: Var, anchors: Var) -> Result<Var> {
        let delta = self.bbox.forward(g, feats)?;
        apply_offset(g, anchors, delta, self.anchor_space)
    }

    /// Start and end distributions over frames, each `[T, 1]`.
    pub fn temporal_head<F: Real>(&self, g: &mut Graph<F>, feats: Var) -> Result<(Var, Var)> {
        let logits = self.temporal.forward(g, feats)?;
        let start = g.slice(logits, 1, 0, 1)?;
        let end = g.slice(logits, 1, 1, 1)?;
        Ok((g.softmax(start, 0)?, g.softmax(end, 0)?))
    }

    /// `[T, 1]` in-segment logits.
    pub fn segment_head<F: Real>(&self, g: &mut Graph<F>, feats: Var) -> Result<Var> {
        Ok(self.segment.forward(g, feats)?)
    }
}

fn column<F: Real>(g: &mut Graph<F>, x: Var, c: usize) -> Result<Var> {
    Ok(g.slice(x, 1, c, 1)?)
}

/// Per-row generalized IoU of two `[L, 4]` box sets, as `[L, 1]`.
pub fn giou_on_tape<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
    let corners = |g: &mut Graph<F>, x: Var| -> Result<[Var; 4]> {
        let (cx, cy, w, h) = (column(g, x, 0)?, column(g, x, 1)?, column(g, x, 2)?, column(g, x, 3)?);
        let hw = g.scale(w, F::lit(0.5))?;
        let hh = g.scale(h, F::lit(0.5))?;
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let [ax0, ay0, ax1, ay1] = corners(g, a)?;
    let [bx0, by0, bx1, by1] = corners(g, b)?;
    let tiny = F::lit(1e-12);
    let zero = F::zero();
    let big = F::infinity();

    let ix0 = g.maximum(ax0, bx0)?;
    let iy0 = g.maximum(ay0, by0)?;
    let ix1 = g.minimum(ax1, bx1)?;
    let iy1 = g.minimum(ay1, by1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.clamp(iw, zero, big)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.clamp(ih, zero, big)?;
    let inter = g.mul(iw, ih)?;

    let area = |g: &mut Graph<F>, x0: Var, y0: Var, x1: Var, y1: Var| -> Result<Var> {
        let w = g.sub(x1, x0)?;
        let w = g.clamp(w, zero, big)?;
        let h = g.sub(y1, y0)?;
        let h = g.clamp(h, zero, big)?;
        Ok(g.mul(w, h)?)
    };
    let area_a = area(g, ax0, ay0, ax1, ay1)?;
    let area_b = area(g, bx0, by0, bx1, by1)?;
    let union = g.add(area_a, area_b)?;
    let union = g.sub(union, inter)?;
    let union_safe = g.clamp(union, tiny, big)?;
    let iou = g.div(inter, union_safe)?;

    let ex0 = g.minimum(ax0, bx0)?;
    let ey0 = g.minimum(ay0, by0)?;
    let ex1 = g.maximum(ax1, bx1)?;
    let ey1 = g.maximum(ay1, by1)?;
    let enclosure = area(g, ex0, ey0, ex1, ey1)?;
    let enclosure_safe = g.clamp(enclosure, tiny, big)?;
    let empty = g.sub(enclosure, union)?;
    let penalty = g.div(empty, enclosure_safe)?;
    Ok(g.sub(iou, penalty)?)
}

/// `(smooth-L1, 1 - GIoU)`, both averaged over the frames of the target
/// segment. Predictions outside the segment do not enter either term.
pub fn bbox_loss<F: Real>(g: &mut Graph<F>, pred: Var, target: &Target) -> Result<(Var, Var)> {
    target.validate()?;
    if g.shape(pred) != [target.frames, 4] {
        return Err(StcatError::InvalidSample(format!(
            "prediction shape {:?} does not match {} frames",
            g.shape(pred),
            target.frames
        )));
    }
    let len = target.end - target.start + 1;
    let inside = g.slice(pred, 0, target.start, len)?;
    let gt: Vec<f64> = target.boxes.iter().flat_map(|b| b.to_array()).collect();
    let gt = g.constant(Tensor::from_f64(vec![len, 4], &gt)?);
    let diff = g.sub(inside, gt)?;
    let l1 = g.smooth_l1(diff)?;
    let l1 = g.sum(l1)?;
    let l1 = g.scale(l1, F::lit(1.0 / len as f64))?;
    let gi = giou_on_tape(g, inside, gt)?;
    let gi = g.mean(gi)?;
    let gi = g.scale(gi, -F::one())?;
    let gi = g.offset(gi, F::one())?;
    Ok((l1, gi))
}

fn kl_on_tape<F: Real>(g: &mut Graph<F>, pred: Var, target: &[f64], direction: KlDirection) -> Result<Var> {
    let n = target.len();
    let floor = F::lit(PROB_FLOOR);
    let pred = g.reshape(pred, [n])?;
    let logp = g.clamp(pred, floor, F::one())?;
    let logp = g.log(logp)?;
    match direction {
        KlDirection::TargetFirst => {
            // Zero-probability target terms vanish through the product.
            let lt: Vec<f64> = target.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
            let lt = g.constant(Tensor::from_f64(vec![n], &lt)?);
            let t = g.constant(Tensor::from_f64(vec![n], target)?);
            let d = g.sub(lt, logp)?;
            let d = g.mul(t, d)?;
            Ok(g.sum(d)?)
        }
        KlDirection::PredictedFirst => {
            let lt: Vec<f64> = target.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
            let lt = g.constant(Tensor::from_f64(vec![n], &lt)?);
            let d = g.sub(logp, lt)?;
            let d = g.mul(pred, d)?;
            Ok(g.sum(d)?)
        }
    }
}

/// KL divergence of the start and end distributions against their targets.
pub fn temporal_loss<F: Real>(
    g: &mut Graph<F>,
    start: Var,
    end: Var,
    start_target: &[f64],
    end_target: &[f64],
    direction: KlDirection,
) -> Result<Var> {
    let s = kl_on_tape(g, start, start_target, direction)?;
    let e = kl_on_tape(g, end, end_target, direction)?;
    Ok(g.add(s, e)?)
}

/// Mean binary cross-entropy over every frame, computed from logits.
pub fn segment_loss<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[f64]) -> Result<Var> {
    let n = labels.len();
    let x = g.reshape(logits, [n])?;
    let y = g.constant(Tensor::from_f64(vec![n], labels)?);
    let sp = g.softplus(x)?;
    let xy = g.mul(x, y)?;
    let l = g.sub(sp, xy)?;
    Ok(g.mean(l)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_worked_examples() {
        let a = Bbox::new(0.1, 0.1, 0.2, 0.2);
        assert_eq!(giou(a, a), 1.0);
        let b = Bbox::new(0.9, 0.9, 0.2, 0.2);
        assert!((giou(a, b) + 0.92).abs() < 1e-12);
        let a = Bbox::new(0.25, 0.25, 0.5, 0.5);
        let b = Bbox::new(0.75, 0.75, 0.5, 0.5);
        assert!((giou(a, b) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_never_produce_nan() {
        let z = Bbox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(z, z), 0.0);
        assert!(giou(z, z).is_finite());
        let line = Bbox::new(0.2, 0.5, 0.0, 0.4);
        assert!(giou(line, Bbox::new(0.7, 0.5, 0.2, 0.2)).is_finite());
    }

    #[test]
    fn heatmap_properties() {
        let h = gaussian_heatmap(3, 10, 1.0).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let argmax = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
        let sharp = gaussian_heatmap(5, 8, 0.01).unwrap();
        assert!(sharp[5] > 0.999);
        assert!(gaussian_heatmap(10, 10, 1.0).is_err());
    }

    #[test]
    fn kl_identity_and_sign() {
        let p = gaussian_heatmap(2, 6, 1.0).unwrap();
        assert_eq!(kl_divergence(&p, &p), 0.0);
        let u = vec![1.0 / 6.0; 6];
        assert!(kl_divergence(&p, &u) > 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let w = LossWeights::default();
        assert_eq!(total_loss(LossParts::default(), w).unwrap().total, 0.0);
        let ones = LossParts {
            l1: 1.0,
            giou: 1.0,
            temp: 1.0,
            seg: 1.0,
        };
        assert_eq!(total_loss(ones, w).unwrap().total, 20.0);
        let bad = LossWeights { giou: -3.0, ..w };
        assert!(matches!(total_loss(ones, bad), Err(StcatError::Config(_))));
    }

    #[test]
    fn target_validation() {
        let t = Target {
            start: 2,
            end: 1,
            boxes: vec![],
            frames: 4,
            sigma: 1.0,
        };
        assert!(t.validate().is_err());
        let t = Target {
            start: 1,
            end: 2,
            boxes: vec![Bbox::new(0.5, 0.5, 0.1, 0.1)],
            frames: 4,
            sigma: 1.0,
        };
        assert!(t.validate().is_err());
        let t = Target {
            start: 1,
            end: 2,
            boxes: vec![Bbox::new(0.5, 0.5, 0.1, 0.1); 2],
            frames: 4,
            sigma: 1.0,
        };
        t.validate().unwrap();
        assert_eq!(t.segment_labels(), vec![0.0, 1.0, 1.0, 0.0]);
    }
}
