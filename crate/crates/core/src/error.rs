use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input contained NaN/Inf or violated a shape precondition.
    #[error("numerical input error: {0}")]
    NumericalInput(String),

    #[error("linear algebra error: {message} (condition number {condition_number:e})")]
    LinearAlgebra { message: String, condition_number: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("running statistics are uninitialized; run at least one training update")]
    UninitializedStatistics,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stream exhausted after {completed} of {expected} steps")]
    StreamExhausted { completed: usize, expected: usize },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {dump}")]
    NanLoss { step: usize, dump: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
