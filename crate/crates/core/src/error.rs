//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (observation files, token files).
    #[error("data error: {0}")]
    Data(String),

    /// Scaling-law fit could not produce a usable optimum.
    #[error("fit error: {0}")]
    Fit(String),

    /// Token allocation failed (bracketing, non-monotone optima, bad schedule).
    #[error("allocation error: {0}")]
    Allocation(String),

    /// Training aborted (non-finite loss, exhausted data, invalid stage).
    #[error("train error: {0}")]
    Train(String),

    /// Checkpoint serialization, validation, or versioning failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Text parse failure (configs, schedules, reports).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
