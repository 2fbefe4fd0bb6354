//! Synthetic data, training, persistence and evaluation around the model.

pub mod checkpoint;
pub mod dataset;
pub mod evaluate;
pub mod generator;
pub mod train;
pub mod vocab;
