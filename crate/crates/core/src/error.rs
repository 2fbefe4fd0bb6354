use std::path::PathBuf;

use stcat_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StcatError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("generator constraints unsatisfiable for seed {seed} after {attempts} attempts")]
    Generator { seed: u64, attempts: usize },
    #[error("non-finite loss at step {step} (last breakdown: {last})")]
    Diverged { step: usize, last: String },
}

pub type Result<T> = std::result::Result<T, StcatError>;

impl StcatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StcatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        StcatError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
