//! Procedural "moving shapes" clips with templated queries.
//!
//! Every shape moves linearly and bounces off the frame borders. One target
//! shape performs an event (appears, changes direction, or overlaps another
//! shape) during a contiguous segment; the query names the target by colour,
//! shape and event. Distractors always share the target's colour or shape.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::VideoClip;
use crate::error::{Result, StcatError};
use crate::grounding::Tube;
use crate::objectives::Bbox;
use crate::workbench::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Side length range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            height: 32,
            width: 32,
            min_shapes: 2,
            max_shapes: 4,
            min_size: 6.0,
            max_size: 10.0,
            max_attempts: 500,
        }
    }
}

impl GenConfig {
    /// Defaults with shape sizes scaled from the 32-pixel reference frame.
    pub fn scaled(frames: usize, height: usize, width: usize) -> Self {
        let k = height.min(width) as f64 / 32.0;
        let base = Self::default();
        Self {
            frames,
            height,
            width,
            min_size: base.min_size * k,
            max_size: base.max_size * k,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(StcatError::Config(format!(
                "generator needs at least 4 frames, got {}",
                self.frames
            )));
        }
        if self.min_shapes < 2 || self.min_shapes > self.max_shapes {
            return Err(StcatError::Config(format!(
                "shape count range {}..={} invalid",
                self.min_shapes, self.max_shapes
            )));
        }
        let side = self.height.min(self.width) as f64;
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size * 2.0 < side) {
            return Err(StcatError::Config(format!(
                "shape sizes {}..{} do not fit a {}x{} frame",
                self.min_size, self.max_size, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Appears,
    Turns,
    Overlaps,
}

const KINDS: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];
const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
const EVENTS: [Event; 3] = [Event::Appears, Event::Turns, Event::Overlaps];

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }

    fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

impl ShapeKind {
    fn nouns(self) -> &'static [&'static str] {
        match self {
            ShapeKind::Square => &["square", "box"],
            ShapeKind::Circle => &["circle", "ball"],
            ShapeKind::Triangle => &["triangle"],
        }
    }
}

/// Centre path in pixels. Before `turn.0` the velocity is `velocity`, after
/// it `turn.1`; the raw path is then reflected into the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub turn: Option<(usize, [f64; 2])>,
}

/// Folds `x` into `[lo, hi]` by mirror reflection at both ends.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    if (lo..=hi).contains(&x) {
        return x;
    }
    let u = (x - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

impl Motion {
    /// Unreflected centre at frame `t`.
    pub fn raw(&self, t: usize) -> [f64; 2] {
        let t = t as f64;
        match self.turn {
            Some((t0, v2)) if t > t0 as f64 => {
                let t0 = t0 as f64;
                [
                    self.start[0] + self.velocity[0] * t0 + v2[0] * (t - t0),
                    self.start[1] + self.velocity[1] * t0 + v2[1] * (t - t0),
                ]
            }
            _ => [
                self.start[0] + self.velocity[0] * t,
                self.start[1] + self.velocity[1] * t,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    /// Side length in pixels.
    pub size: f64,
    pub motion: Motion,
    /// Inclusive frame range in which the shape is drawn.
    pub visible: (usize, usize),
}

impl ShapeSpec {
    fn bounds(&self, extent: usize) -> (f64, f64) {
        (self.size / 2.0, extent as f64 - self.size / 2.0)
    }

    /// Centre in pixels at frame `t`.
    pub fn center(&self, t: usize, height: usize, width: usize) -> [f64; 2] {
        let [x, y] = self.motion.raw(t);
        let (xl, xh) = self.bounds(width);
        let (yl, yh) = self.bounds(height);
        [reflect(x, xl, xh), reflect(y, yl, yh)]
    }

    /// True if the raw path stays inside the frame for frames `0..frames`.
    pub fn stays_inside(&self, frames: usize, height: usize, width: usize) -> bool {
        let (xl, xh) = self.bounds(width);
        let (yl, yh) = self.bounds(height);
        (0..frames).all(|t| {
            let [x, y] = self.motion.raw(t);
            (xl..=xh).contains(&x) && (yl..=yh).contains(&y)
        })
    }

    pub fn bbox(&self, t: usize, height: usize, width: usize) -> Bbox {
        let [x, y] = self.center(t, height, width);
        Bbox::new(
            x / width as f64,
            y / height as f64,
            self.size / width as f64,
            self.size / height as f64,
        )
    }

    pub fn is_visible(&self, t: usize) -> bool {
        (self.visible.0..=self.visible.1).contains(&t)
    }

    fn covers(&self, px: f64, py: f64, center: [f64; 2]) -> bool {
        let half = self.size / 2.0;
        let (dx, dy) = (px - center[0], py - center[1]);
        match self.kind {
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Triangle => {
                let depth = dy + half;
                (0.0..=self.size).contains(&depth) && dx.abs() <= depth / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<ShapeSpec>,
    pub target: usize,
    pub event: Event,
    /// Inclusive event segment.
    pub segment: (usize, usize),
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Scene {
    pub fn render(&self) -> Result<VideoClip> {
        let (h, w) = (self.height, self.width);
        let mut pixels = vec![0f32; self.frames * h * w * 3];
        for t in 0..self.frames {
            let frame = &mut pixels[t * h * w * 3..(t + 1) * h * w * 3];
            for shape in self.shapes.iter().filter(|s| s.is_visible(t)) {
                let c = shape.center(t, h, w);
                let rgb = shape.color.rgb();
                let x0 = (c[0] - shape.size / 2.0).floor().max(0.0) as usize;
                let x1 = ((c[0] + shape.size / 2.0).ceil() as usize).min(w);
                let y0 = (c[1] - shape.size / 2.0).floor().max(0.0) as usize;
                let y1 = ((c[1] + shape.size / 2.0).ceil() as usize).min(h);
                for y in y0..y1 {
                    for x in x0..x1 {
                        if shape.covers(x as f64 + 0.5, y as f64 + 0.5, c) {
                            frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
                        }
                    }
                }
            }
        }
        VideoClip::new(self.frames, h, w, pixels)
    }

    /// Target boxes over the event segment.
    pub fn ground_truth(&self) -> Result<Tube> {
        let target = &self.shapes[self.target];
        let (s, e) = self.segment;
        let boxes = (s..=e).map(|t| target.bbox(t, self.height, self.width)).collect();
        Tube::new(s, e, boxes)
    }

    /// Frames at which shapes `a` and `b` are both visible and their boxes
    /// share positive area.
    pub fn overlap_frames(&self, a: usize, b: usize) -> Vec<usize> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[b]);
        (0..self.frames)
            .filter(|&t| sa.is_visible(t) && sb.is_visible(t))
            .filter(|&t| {
                let ba = sa.bbox(t, self.height, self.width).corners();
                let bb = sb.bbox(t, self.height, self.width).corners();
                ba[2].min(bb[2]) > ba[0].max(bb[0]) && ba[3].min(bb[3]) > ba[1].max(bb[1])
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub scene: Scene,
    pub clip: VideoClip,
    pub query: String,
    pub tokens: Vec<usize>,
    pub gt: Tube,
}

fn random_velocity(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 2] {
    let speed = rng.gen_range(lo..hi);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    [speed * angle.cos(), speed * angle.sin()]
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

fn distractor_look(rng: &mut impl Rng, kind: ShapeKind, color: Color) -> (ShapeKind, Color) {
    let other_kind = *KINDS
        .iter()
        .filter(|&&k| k != kind)
        .collect::<Vec<_>>()
        .choose(rng)
        .unwrap();
    let other_color = *COLORS
        .iter()
        .filter(|&&c| c != color)
        .collect::<Vec<_>>()
        .choose(rng)
        .unwrap();
    match rng.gen_range(0..5) {
        0 => (kind, color),
        1 | 2 => (*other_kind, color),
        _ => (kind, *other_color),
    }
}

fn query_for(rng: &mut impl Rng, kind: ShapeKind, color: Color, event: Event) -> String {
    let prefix = *["", "find", "locate", "show me", "track"].choose(rng).unwrap();
    let noun = *kind.nouns().choose(rng).unwrap();
    let rel = *["that", "which"].choose(rng).unwrap();
    let phrase = match event {
        Event::Appears => *["appears", "shows up", "pops in", "briefly appears"]
            .choose(rng)
            .unwrap(),
        Event::Turns => *["changes direction", "turns around", "reverses direction"]
            .choose(rng)
            .unwrap(),
        Event::Overlaps => *[
            "overlaps another shape",
            "touches another object",
            "crosses another one",
        ]
        .choose(rng)
        .unwrap(),
    };
    let mut words = Vec::new();
    if !prefix.is_empty() {
        words.push(prefix);
    }
    words.extend(["the", color.word(), noun, rel, phrase]);
    words.join(" ")
}

fn try_scene(rng: &mut impl Rng, cfg: &GenConfig, event: Event) -> Option<Scene> {
    let (t_len, h, w) = (cfg.frames, cfg.height, cfg.width);
    let n = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let kind = *KINDS.choose(rng).unwrap();
    let color = *COLORS.choose(rng).unwrap();
    let (speed_lo, speed_hi) = match event {
        Event::Turns => (0.2, 0.6),
        _ => (0.3, 1.2),
    };
    let mut shapes: Vec<ShapeSpec> = (0..n)
        .map(|i| {
            let (k, c) = if i == 0 {
                (kind, color)
            } else {
                distractor_look(rng, kind, color)
            };
            let size = rng.gen_range(cfg.min_size..=cfg.max_size);
            let start = [
                rng.gen_range(size / 2.0..=w as f64 - size / 2.0),
                rng.gen_range(size / 2.0..=h as f64 - size / 2.0),
            ];
            ShapeSpec {
                kind: k,
                color: c,
                size,
                motion: Motion {
                    start,
                    velocity: random_velocity(rng, speed_lo, speed_hi),
                    turn: None,
                },
                visible: (0, t_len - 1),
            }
        })
        .collect();

    let segment = match event {
        Event::Appears => {
            let len = rng.gen_range((t_len / 4).max(2)..=t_len / 2);
            let start = rng.gen_range(0..=t_len - len);
            shapes[0].visible = (start, start + len - 1);
            (start, start + len - 1)
        }
        Event::Turns => {
            let turn = rng.gen_range(t_len / 4..=3 * t_len / 4);
            let angle = rng.gen_range(std::f64::consts::FRAC_PI_2..=std::f64::consts::PI);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let v = shapes[0].motion.velocity;
            shapes[0].motion.turn = Some((turn, rotate(v, sign * angle)));
            if !shapes.iter().all(|s| s.stays_inside(t_len, h, w)) {
                return None;
            }
            let half = (t_len / 8).max(1);
            (turn.saturating_sub(half), (turn + half).min(t_len - 1))
        }
        Event::Overlaps => {
            let partner = rng.gen_range(1..n);
            let meet = rng.gen_range(t_len / 4..=3 * t_len / 4);
            let pc = shapes[partner].center(meet, h, w);
            let jitter = 0.3 * shapes[0].size;
            let at = [
                pc[0] + rng.gen_range(-jitter..=jitter),
                pc[1] + rng.gen_range(-jitter..=jitter),
            ];
            let v = shapes[0].motion.velocity;
            shapes[0].motion.start = [at[0] - v[0] * meet as f64, at[1] - v[1] * meet as f64];
            if !shapes[0].stays_inside(t_len, h, w) {
                return None;
            }
            (0, 0)
        }
    };

    // Put the target at a random draw position.
    let target = rng.gen_range(0..n);
    shapes.swap(0, target);
    let mut scene = Scene {
        shapes,
        target,
        event,
        segment,
        frames: t_len,
        height: h,
        width: w,
    };

    if event == Event::Overlaps {
        let mut run = None;
        for a in 0..n {
            for b in a + 1..n {
                let frames = scene.overlap_frames(a, b);
                if frames.is_empty() {
                    continue;
                }
                if (a != target && b != target) || run.is_some() {
                    return None;
                }
                let (first, last) = (frames[0], *frames.last().unwrap());
                if last + 1 - first != frames.len() || frames.len() < 2 {
                    return None;
                }
                run = Some((first, last));
            }
        }
        scene.segment = run?;
    }
    Some(scene)
}

/// Builds the scene for `seed` by rejection sampling.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let event = *EVENTS.choose(&mut rng).unwrap();
    for _ in 0..cfg.max_attempts {
        if let Some(scene) = try_scene(&mut rng, cfg, event) {
            return Ok(scene);
        }
    }
    Err(StcatError::Generator {
        seed,
        attempts: cfg.max_attempts,
    })
}

pub fn generate_sample(seed: u64, cfg: &GenConfig) -> Result<Generated> {
    let scene = generate_scene(seed, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let target = &scene.shapes[scene.target];
    let query = query_for(&mut rng, target.kind, target.color, scene.event);
    let tokens = vocab::encode(&query);
    let clip = scene.render()?;
    let gt = scene.ground_truth()?;
    Ok(Generated {
        scene,
        clip,
        query,
        tokens,
        gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_folds_into_range() {
        assert_eq!(reflect(5.0, 0.0, 10.0), 5.0);
        assert_eq!(reflect(12.0, 0.0, 10.0), 8.0);
        assert_eq!(reflect(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(reflect(23.0, 0.0, 10.0), 3.0);
    }

    #[test]
    fn queries_use_known_words() {
        for seed in 0..30 {
            let s = generate_sample(seed, &GenConfig::default()).unwrap();
            assert!(!s.tokens.contains(&0), "{}", s.query);
        }
    }

    #[test]
    fn rejects_tiny_frames() {
        let cfg = GenConfig {
            height: 8,
            width: 8,
            ..GenConfig::default()
        };
        assert!(matches!(generate_sample(1, &cfg), Err(StcatError::Config(_))));
    }
}
