//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the poisoning laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an argument contract (bad shapes, out-of-range values).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A binary input file did not match its expected layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The poisoning ratio selects zero samples.
    #[error("degenerate poisoning ratio: {0}")]
    DegenerateAlpha(String),

    /// A numeric quantity left the finite domain (NaN/Inf) during a run.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
