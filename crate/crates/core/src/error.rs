use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes of two operands disagree.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// Cholesky factorization met a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// A computation met an infinite or NaN value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// No pair in the trajectory had distinct parameters.
    #[error("alpha is undefined: every pair of iterates is identical")]
    UndefinedAlpha,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checksum mismatch for {path}: expected {expected}, got {actual} (quarantined to {quarantine})")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
        quarantine: PathBuf,
    },

    #[error("download of {url} failed: {message}")]
    Network { url: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
