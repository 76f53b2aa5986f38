//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value or key is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized file could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A numeric result left the finite domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Threshold calibration could not be performed.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Classifier training failed.
    #[error("training error: {0}")]
    Training(String),

    /// The adaptation loop could not proceed.
    #[error("adaptation error: {0}")]
    Adaptation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
