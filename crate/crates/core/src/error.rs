use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlugError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate shape geometry: {0}")]
    DegenerateShape(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("scene generation failed after {attempts} attempts (seed {seed})")]
    GenerationFailed { seed: u64, attempts: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("no adapters for the {0} branch")]
    MissingAdapters(&'static str),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type Result<T, E = PlugError> = std::result::Result<T, E>;

impl PlugError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Dataset {
            path: path.into(),
            message: message.into(),
        }
    }
}
