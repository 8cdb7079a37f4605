//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both offending shapes.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (bad flag combination, indivisible sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed data (out-of-range label, corrupt file, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (backward on a non-scalar, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Inconsistent internal state between components.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Missing prerequisite state (absent checkpoint, ...).
    #[error("state error: {0}")]
    State(String),

    /// An operation over an empty collection that requires members.
    #[error("empty set: {0}")]
    EmptySet(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
