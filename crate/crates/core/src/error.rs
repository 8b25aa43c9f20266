//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by library entry points. Configuration and input-shape
/// problems are reported before any work starts; runtime failures (I/O,
/// numeric blow-ups) carry enough context to name the culprit.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or contract-violating input data.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A model or run configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// An operation was called outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A linearized row cannot fit the maximum sequence length even after
    /// dropping every cell-value token.
    #[error("sequence of length {length} exceeds max_seq_len {max} after truncation")]
    OverLength { length: usize, max: usize },
    /// A checkpoint file is unreadable or inconsistent with its manifest.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training produced a non-finite value in the named tensor.
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
