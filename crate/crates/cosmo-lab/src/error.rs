//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration failed its validation rules.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation received an argument outside its contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Matrix / vector dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An example or position index is out of range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Numerically degenerate input (zero-norm row, all-padding text, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// A serialized file does not parse as the expected format.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
