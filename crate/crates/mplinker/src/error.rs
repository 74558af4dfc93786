//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A record in a corpus or report file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record references an artifact that does not exist, or duplicates one that does.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// More negative links were requested than unlinked pairs exist.
    #[error("capacity error: requested {requested} negatives but only {available} unlinked pairs exist")]
    Capacity { requested: usize, available: usize },

    /// Too few examples to split.
    #[error("size error: need at least {min} examples, got {got}")]
    Size { min: usize, got: usize },

    /// The token budget cannot hold the non-truncatable skeleton.
    #[error("budget error: max_len {max_len} is below the skeleton length {skeleton}")]
    Budget { max_len: usize, skeleton: usize },

    /// Invalid template, verbalizer, or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A token id fell outside the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Matrix shapes do not line up.
    #[error("shape error: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// A non-finite value surfaced in the numeric core.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
