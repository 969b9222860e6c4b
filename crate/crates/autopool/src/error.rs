//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented precondition (shape, range, emptiness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A scalar or vector parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A configuration cannot produce a usable dataset or run.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The training loss became non-finite.
    #[error("training diverged at batch {batch_index}: {message}")]
    TrainingDivergence { batch_index: u64, message: String },

    /// An operation required instance-level labels that the data lacks.
    #[error("missing strong labels: {0}")]
    MissingStrongLabels(String),

    /// A file could not be parsed as one of the crate's formats.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
