use serde::{Deserialize, Serialize};

use crate::error::{Result, StcatError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl From<Activation> for stcat_tensor::nn::Activation {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Relu => stcat_tensor::nn::Activation::Relu,
            Activation::Gelu => stcat_tensor::nn::Activation::Gelu,
        }
    }
}

/// How decoder layers apply predicted offsets to their reference anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSpace {
    /// `clamp(anchor + delta, 0, 1)`
    Plain,
    /// `sigmoid(logit(anchor) + delta)`
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(target || predicted)
    TargetFirst,
    /// KL(predicted || target)
    PredictedFirst,
}

/// Model and training hyperparameters. Serialized as a flat JSON object;
/// omitted fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames fed to the model after uniform temporal downsampling.
    pub frames: usize,
    pub max_frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Encoder blocks and decoder layers per branch.
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Heatmap width in sampled frames; `None` means `max(1, 0.05 T)`.
    pub heatmap_sigma: Option<f64>,
    pub weight_l1: f64,
    pub weight_giou: f64,
    pub weight_temp: f64,
    pub weight_seg: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drop_step: Option<usize>,
    pub lr_drop_factor: f64,
    pub grad_clip: Option<f64>,
    pub grad_accum: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub no_local_template: bool,
    pub no_global_template: bool,
    pub no_temporal_layer: bool,
    pub aux_loss: bool,
    /// Diagnostic: drop decoder self-attention across frames.
    pub decoder_self_attention: bool,
    pub anchor_space: AnchorSpace,
    pub kl_direction: KlDirection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            max_frames: 64,
            height: 32,
            width: 32,
            patch: 8,
            channels: 64,
            visual_dim: 64,
            text_dim: 64,
            depth: 2,
            heads: 4,
            ffn_dim: 256,
            activation: Activation::Relu,
            dropout: 0.0,
            vocab_size: crate::workbench::vocab::VOCAB.len(),
            heatmap_sigma: None,
            weight_l1: 5.0,
            weight_giou: 3.0,
            weight_temp: 10.0,
            weight_seg: 2.0,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_drop_step: Some(2000),
            lr_drop_factor: 0.1,
            grad_clip: None,
            grad_accum: 1,
            steps: 3000,
            checkpoint_every: 500,
            seed: 0,
            no_local_template: false,
            no_global_template: false,
            no_temporal_layer: false,
            aux_loss: false,
            decoder_self_attention: true,
            anchor_space: AnchorSpace::Plain,
            kl_direction: KlDirection::TargetFirst,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for finite-difference verification.
    pub fn micro() -> Self {
        Self {
            frames: 4,
            height: 16,
            width: 16,
            patch: 4,
            channels: 16,
            visual_dim: 16,
            text_dim: 16,
            depth: 2,
            heads: 2,
            ffn_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(StcatError::Config(m));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            ));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "height ({}) and width ({}) must be divisible by patch ({})",
                self.height, self.width, self.patch
            ));
        }
        if self.channels % 4 != 0 {
            return fail(format!("channels ({}) must be divisible by 4", self.channels));
        }
        if self.frames == 0 || self.frames > self.max_frames {
            return fail(format!("frames ({}) must be in 1..={}", self.frames, self.max_frames));
        }
        for (name, w) in [
            ("weight_l1", self.weight_l1),
            ("weight_giou", self.weight_giou),
            ("weight_temp", self.weight_temp),
            ("weight_seg", self.weight_seg),
        ] {
            if !(w >= 0.0) {
                return fail(format!("{name} must be non-negative, got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if let Some(s) = self.heatmap_sigma {
            if !(s > 0.0) {
                return fail(format!("heatmap_sigma must be positive, got {s}"));
            }
        }
        if self.vocab_size == 0 || self.grad_accum == 0 {
            return fail("vocab_size and grad_accum must be positive".into());
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn sigma_for(&self, frames: usize) -> f64 {
        self.heatmap_sigma.unwrap_or_else(|| (0.05 * frames as f64).max(1.0))
    }

    pub fn loss_weights(&self) -> crate::objectives::LossWeights {
        crate::objectives::LossWeights {
            l1: self.weight_l1,
            giou: self.weight_giou,
            temp: self.weight_temp,
            seg: self.weight_seg,
        }
    }
}
