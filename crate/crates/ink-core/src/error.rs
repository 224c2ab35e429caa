//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: anything a
//! user can fix in their inputs (`InvalidInput`, `Format`, `Config`) is an
//! input error; the rest are runtime failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us something structurally wrong (dimension mismatch,
    /// malformed corpus line, unknown token id, empty input where content is
    /// required).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A persisted file does not follow its documented layout.
    #[error("format error: {0}")]
    Format(String),

    /// Bad or unknown configuration key/value.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called on an object in the wrong state
    /// (e.g. querying an empty datastore).
    #[error("state error: {0}")]
    State(String),

    /// Numeric breakdown: non-finite values, zero vectors where a direction
    /// is required, degenerate kernels.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged or could not make progress. The step/epoch point at
    /// the last state that was still finite; callers that snapshot per epoch
    /// can recover from the most recent checkpoint.
    #[error("training error at epoch {epoch}, step {step}: {message}")]
    Training {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True when the error is the user's to fix rather than ours.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Format(_) | Error::Config(_)
        )
    }
}
