//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by sampling, model evaluation, training, and I/O.
#[derive(Error, Debug)]
pub enum PtpError {
    /// A probability vector failed validation (empty, negative, NaN, zero mass).
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// A scalar parameter is out of its legal range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An input violates a precondition (vocabulary, lengths, ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The distribution assigns (effectively) zero mass to the requested
    /// token, so no auxiliary value can reproduce it.
    #[error("unextractable token {token} at position {position}: interval has zero width")]
    UnextractableToken { token: usize, position: usize },

    /// The real interval is nonempty but contains no representable float32.
    #[error("interval [{lo}, {hi}) contains no representable float32 value")]
    UnrepresentableInterval { lo: f64, hi: f64 },

    /// Incompatible configuration (e.g. a loss that needs cached teacher rows).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file exists but does not parse as the declared format.
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, PtpError>;
