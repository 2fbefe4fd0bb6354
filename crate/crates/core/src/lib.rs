//! Spatio-temporal video grounding with a template-conditioned transformer.
//!
//! A clip and a token query go through a toy embedder, a cross-modal
//! encoder with per-frame spatial and clip-level temporal interaction, a
//! template generator that fixes one content query for the whole clip and
//! one anchor per frame, and a dual decoder whose outputs become per-frame
//! boxes and start/end distributions.

pub mod config;
pub mod decoder;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod grounding;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod posenc;
pub mod template;
pub mod workbench;

pub use config::ModelConfig;
pub use error::{Result, StcatError};
pub use model::{Prediction, Stcat};
