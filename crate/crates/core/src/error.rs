//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Requested dictionary cannot exist (e.g. more orthonormal rows than dimensions).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Two operands disagree on a matrix or vector shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A firing specification is malformed or cannot produce the requested data.
    #[error("invalid firing spec: {0}")]
    Spec(String),

    /// An argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}")]
    NonFinite {
        step: usize,
        /// Checkpoints recorded before the failure, for diagnosis.
        trace: Box<crate::trainer::TrainTrace>,
    },

    /// Probe training data is unusable (single class, non-finite inputs, empty split).
    #[error("probe error: {0}")]
    Probe(String),

    /// A persisted file carries the wrong format tag or version.
    #[error("format mismatch in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
