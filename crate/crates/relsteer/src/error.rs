//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss must be a scalar node")]
    NonScalarLoss,
    #[error("contract violation: {0}")]
    Contract(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("unsupported relation phrase: {0:?}")]
    UnsupportedRelation(String),
    #[error("cannot bind object name {0:?} to a generator slot")]
    Binding(String),
    #[error("file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
