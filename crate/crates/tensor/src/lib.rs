//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation together with its forward value;
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] map. Parameters live in a [`ParamStore`] and are recorded
//! as leaves of a fresh [`Graph`] for each forward pass.

mod attention;
mod backward;
mod error;
pub mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, rel_error, GradCheckReport};
pub use optim::{AdamState, AdamW};
pub use params::{Graph, Init, ParamId, ParamStore};
pub use real::Real;
pub use tape::{AttnShape, Tape, Unary, Var};
pub use tensor::Tensor;
