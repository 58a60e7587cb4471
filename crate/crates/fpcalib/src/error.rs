//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by schedule construction, model evaluation, samplers,
/// runners, and analyses.
///
/// The two broad classes matter to callers: [`Error::InvalidInput`] and
/// [`Error::UnknownCondition`] mean the caller's configuration violates a
/// documented precondition, while [`Error::Numerical`] means a run that was
/// validly configured broke down mid-flight (non-finite latent, division by a
/// vanishing coefficient) and names the timestep where it happened.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A condition label was not declared by the model.
    #[error("unknown condition label {0:?}")]
    UnknownCondition(String),

    /// Numerical failure during an otherwise valid run.
    #[error("numerical failure at timestep {t}: {msg}")]
    Numerical { t: usize, msg: String },
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for an [`Error::InvalidInput`] with a formatted message.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
