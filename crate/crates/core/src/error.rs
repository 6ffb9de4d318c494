//! Crate-wide error type.

use crate::trainer::Checkpoint;

/// Errors produced by tensor ops, file formats, scene generation and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values or invalid numeric configuration.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid argument (bad strides, factors, ranges, indices).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Scene specification violates its invariants.
    #[error("scene error: {0}")]
    Scene(String),

    /// Malformed file contents (bad magic, truncation, unsupported version).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training hit a non-finite loss; the last finite-loss state is retained.
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: usize, last_good: Box<Checkpoint> },
}

pub type Result<T> = std::result::Result<T, Error>;
