//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (dimension mismatch,
    /// out-of-range size, malformed input).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numerical routine failed (Cholesky factorization, ill-conditioned
    /// system) even after the configured jitter escalation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Hyperparameter optimization failed on every restart. Carries the best
    /// point seen so it can be inspected.
    #[error("fit failed: {msg} (best objective seen: {best_objective})")]
    Fit { msg: String, best_objective: f64 },

    /// No candidate could be scored.
    #[error("acquisition failed: {0}")]
    Acquisition(String),

    /// Configuration file or field rejected.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed CSV content.
    #[error("csv parse error: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
