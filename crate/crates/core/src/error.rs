use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid segment ({start}, {end}): {reason}")]
    InvalidSegment { start: f64, end: f64, reason: &'static str },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token budget of {budget} exceeded at query {index} ({query:?}): {tokens} tokens")]
    TokenBudget {
        budget: usize,
        tokens: usize,
        index: usize,
        query: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of {len} frames is shorter than the {min} required by the pyramid")]
    TooShort { len: usize, min: usize },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
