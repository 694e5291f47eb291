//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants map onto the failure classes the
/// public operations can produce.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not conform (wrong rank, wrong lengths, mismatched dims).
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric value is outside its admissible set (NaN, Inf, empty range).
    #[error("value error: {0}")]
    Value(String),

    /// A parameter violates its domain precondition (e.g. bits < 1).
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// The model or optimizer is not in a state that permits the call.
    #[error("state error: {0}")]
    State(String),

    /// Configuration file is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A binary input file is malformed; `offset` is the byte position.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Internal invariant broken; indicates a bug, not user error.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
