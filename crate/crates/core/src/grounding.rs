//! Tube construction at inference time and the grounding metrics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StcatError};
use crate::objectives::{iou, Bbox};

/// Default vIoU thresholds.
pub const THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// A segment `[t_start, t_end]` (inclusive) with one box per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub t_start: usize,
    pub t_end: usize,
    pub boxes: Vec<Bbox>,
}

impl Tube {
    pub fn new(t_start: usize, t_end: usize, boxes: Vec<Bbox>) -> Result<Self> {
        let tube = Self { t_start, t_end, boxes };
        tube.check()?;
        Ok(tube)
    }

    fn check(&self) -> Result<()> {
        if self.t_start > self.t_end {
            return Err(StcatError::InvalidSample(format!(
                "inverted tube segment [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        if self.boxes.len() != self.frame_count() {
            return Err(StcatError::InvalidSample(format!(
                "tube [{}, {}] has {} boxes",
                self.t_start,
                self.t_end,
                self.boxes.len()
            )));
        }
        Ok(())
    }

    /// Checks the tube against a clip of `frames` frames.
    pub fn validate(&self, frames: usize) -> Result<()> {
        self.check()?;
        if self.t_end >= frames {
            return Err(StcatError::InvalidSample(format!(
                "tube end {} exceeds {frames} frames",
                self.t_end
            )));
        }
        Ok(())
    }

    /// Number of frames covered, `t_end - t_start + 1`.
    pub fn frame_count(&self) -> usize {
        self.t_end + 1 - self.t_start
    }

    pub fn box_at(&self, frame: usize) -> Option<Bbox> {
        (self.t_start..=self.t_end)
            .contains(&frame)
            .then(|| self.boxes[frame - self.t_start])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub m_viou: f64,
    pub m_tiou: f64,
    /// Threshold (formatted as in `"0.3"`) to the fraction of samples with vIoU above it.
    pub viou_at: BTreeMap<String, f64>,
    pub samples: usize,
}

impl MetricsReport {
    pub fn at(&self, r: f64) -> Option<f64> {
        self.viou_at.get(&threshold_key(r)).copied()
    }
}

fn threshold_key(r: f64) -> String {
    format!("{r}")
}

/// Most probable segment `s <= e` under `p_s[s] * p_e[e]`. Ties resolve to
/// the smallest `s`, then the smallest `e`.
pub fn select_segment(p_start: &[f64], p_end: &[f64]) -> (usize, usize) {
    let n = p_start.len().min(p_end.len());
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..n {
        for e in s..n {
            let score = p_start[s] * p_end[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

/// Uniform downsampling map: sampled index `i` covers original frame
/// `floor(i * T_original / T_sampled)`. Clips no longer than `T_sampled` are
/// used as they are.
pub fn sampling_map(original: usize, sampled: usize) -> Vec<usize> {
    if original <= sampled {
        (0..original).collect()
    } else {
        (0..sampled).map(|i| i * original / sampled).collect()
    }
}

/// Fills every frame in `0..frames` from the sampled boxes: linear between
/// neighbours, constant beyond the first and last sample.
pub fn interpolate_boxes(sampled: &BTreeMap<usize, Bbox>, frames: usize) -> Result<BTreeMap<usize, Bbox>> {
    if sampled.is_empty() {
        return Err(StcatError::InvalidSample("no sampled boxes to interpolate".into()));
    }
    if let Some((&last, _)) = sampled.last_key_value() {
        if last >= frames {
            return Err(StcatError::InvalidSample(format!(
                "sampled frame {last} outside {frames} frames"
            )));
        }
    }
    let mut out = BTreeMap::new();
    for f in 0..frames {
        let before = sampled.range(..=f).next_back();
        let after = sampled.range(f..).next();
        let b = match (before, after) {
            (Some((&i, &a)), Some((&j, &b))) if i != j => {
                let w = (f - i) as f64 / (j - i) as f64;
                let lerp = |x: f64, y: f64| x + (y - x) * w;
                Bbox::new(lerp(a.cx, b.cx), lerp(a.cy, b.cy), lerp(a.w, b.w), lerp(a.h, b.h))
            }
            (Some((_, &a)), _) => a,
            (None, Some((_, &b))) => b,
            (None, None) => unreachable!("sampled is non-empty"),
        };
        out.insert(f, b);
    }
    Ok(out)
}

/// Maps a sampled-space segment to original frames and interpolates boxes
/// over the mapped span.
pub fn assemble_tube(boxes: &[Bbox], segment: (usize, usize), map: &[usize], original: usize) -> Result<Tube> {
    let (s, e) = segment;
    if s > e {
        return Err(StcatError::InvalidSample(format!("inverted segment ({s}, {e})")));
    }
    if e >= map.len() || boxes.len() != map.len() {
        return Err(StcatError::InvalidSample(format!(
            "segment ({s}, {e}) with {} boxes and a {}-entry sampling map",
            boxes.len(),
            map.len()
        )));
    }
    let sampled: BTreeMap<usize, Bbox> = map.iter().copied().zip(boxes.iter().copied()).collect();
    let dense = interpolate_boxes(&sampled, original)?;
    let (t_start, t_end) = (map[s], map[e]);
    let boxes = (t_start..=t_end).map(|f| dense[&f]).collect();
    Tube::new(t_start, t_end, boxes)
}

pub fn box_iou(a: Bbox, b: Bbox) -> f64 {
    iou(a, b)
}

fn overlap_span(a: &Tube, b: &Tube) -> (usize, usize, usize) {
    let lo = a.t_start.max(b.t_start);
    let hi = a.t_end.min(b.t_end);
    let union = a.frame_count() + b.frame_count() - if lo <= hi { hi + 1 - lo } else { 0 };
    (lo, hi, union)
}

/// Temporal IoU on inclusive frame ranges.
pub fn tiou(pred: &Tube, gt: &Tube) -> f64 {
    let (lo, hi, union) = overlap_span(pred, gt);
    if lo > hi {
        0.0
    } else {
        (hi + 1 - lo) as f64 / union as f64
    }
}

/// Per-frame box IoU summed over shared frames, divided by the union frame count.
pub fn viou(pred: &Tube, gt: &Tube) -> f64 {
    let (lo, hi, union) = overlap_span(pred, gt);
    if lo > hi {
        return 0.0;
    }
    let total: f64 = (lo..=hi)
        .map(|f| iou(pred.boxes[f - pred.t_start], gt.boxes[f - gt.t_start]))
        .sum();
    total / union as f64
}

/// Means of the per-sample scores and the fraction with vIoU strictly above
/// each threshold.
pub fn aggregate(viou: &[f64], tiou: &[f64], thresholds: &[f64]) -> Result<MetricsReport> {
    if viou.is_empty() || viou.len() != tiou.len() {
        return Err(StcatError::InvalidSample(format!(
            "cannot aggregate {} vIoU and {} tIoU values",
            viou.len(),
            tiou.len()
        )));
    }
    let n = viou.len() as f64;
    let viou_at = thresholds
        .iter()
        .map(|&r| (threshold_key(r), viou.iter().filter(|&&v| v > r).count() as f64 / n))
        .collect();
    Ok(MetricsReport {
        m_viou: viou.iter().sum::<f64>() / n,
        m_tiou: tiou.iter().sum::<f64>() / n,
        viou_at,
        samples: viou.len(),
    })
}

fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Serialize, Deserialize)]
struct TubeLine {
    sample_id: String,
    t_start: usize,
    t_end: usize,
    boxes: Vec<(usize, f64, f64, f64, f64)>,
}

/// Writes one tube as a JSON line.
pub fn write_tube_line(out: &mut impl Write, sample_id: &str, tube: &Tube) -> std::io::Result<()> {
    let line = TubeLine {
        sample_id: sample_id.to_owned(),
        t_start: tube.t_start,
        t_end: tube.t_end,
        boxes: tube
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| (tube.t_start + i, round6(b.cx), round6(b.cy), round6(b.w), round6(b.h)))
            .collect(),
    };
    serde_json::to_writer(&mut *out, &line)?;
    out.write_all(b"\n")
}

/// Parses a line produced by [`write_tube_line`].
pub fn parse_tube_line(line: &str) -> Result<(String, Tube)> {
    let l: TubeLine =
        serde_json::from_str(line).map_err(|e| StcatError::InvalidSample(format!("bad tube line: {e}")))?;
    for (i, b) in l.boxes.iter().enumerate() {
        if b.0 != l.t_start + i {
            return Err(StcatError::InvalidSample(format!("tube frame {} out of order", b.0)));
        }
    }
    let boxes = l.boxes.iter().map(|b| Bbox::new(b.1, b.2, b.3, b.4)).collect();
    Ok((l.sample_id, Tube::new(l.t_start, l.t_end, boxes)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(t0: usize, t1: usize) -> Tube {
        Tube::new(t0, t1, vec![Bbox::new(0.5, 0.5, 0.2, 0.2); t1 + 1 - t0]).unwrap()
    }

    #[test]
    fn sampling_map_shapes() {
        assert_eq!(sampling_map(8, 16), (0..8).collect::<Vec<_>>());
        assert_eq!(sampling_map(32, 16)[5], 10);
        assert_eq!(sampling_map(10, 4), vec![0, 2, 5, 7]);
    }

    #[test]
    fn tube_rejects_bad_shapes() {
        assert!(Tube::new(3, 2, vec![]).is_err());
        assert!(Tube::new(0, 2, vec![Bbox::new(0.5, 0.5, 0.1, 0.1)]).is_err());
        assert!(flat(2, 5).validate(5).is_err());
        flat(2, 5).validate(6).unwrap();
    }

    #[test]
    fn tiou_disjoint_and_identical() {
        assert_eq!(tiou(&flat(0, 3), &flat(5, 7)), 0.0);
        assert_eq!(tiou(&flat(2, 6), &flat(2, 6)), 1.0);
        assert_eq!(viou(&flat(2, 6), &flat(2, 6)), 1.0);
    }

    #[test]
    fn tube_line_round_trip() {
        let t = Tube::new(
            1,
            2,
            vec![Bbox::new(0.1234567, 0.5, 0.2, 0.3), Bbox::new(0.2, 0.5, 0.2, 0.3)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tube_line(&mut buf, "s0", &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("[1,0.123457,0.5,0.2,0.3]"), "{text}");
        let (id, back) = parse_tube_line(text.trim()).unwrap();
        assert_eq!(id, "s0");
        assert_eq!(back.t_start, 1);
        assert_eq!(back.boxes[1], t.boxes[1]);
    }
}
