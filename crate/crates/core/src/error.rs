//! Crate-wide error types.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Fatal errors surfaced by library operations.
///
/// Per-request backend failures are carried by [`BackendError`] so callers
/// can distinguish run-fatal conditions (auth rejection) from degradable
/// per-query ones (retries exhausted, malformed reply).
#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("prompt: {0}")]
    Prompt(String),

    #[error("partition: {0}")]
    Partition(String),

    #[error("concept: {0}")]
    Concept(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("config: {0}")]
    Config(String),

    #[error("backend: {0}")]
    Backend(#[from] BackendError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

/// Per-request backend failures.
#[derive(Debug, Error)]
pub enum BackendError {
    /// The endpoint rejected our credentials. Fatal for the whole run.
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },

    /// All retries were used up on transient failures.
    #[error("retries exhausted after {attempts} attempts: {last_error}")]
    Exhausted { attempts: u32, last_error: String },

    /// The endpoint answered but not in the expected shape.
    #[error("malformed endpoint reply: {0}")]
    MalformedReply(String),

    /// Request construction or transport failed in a non-retryable way.
    #[error("request failed: {0}")]
    Request(String),

    /// The simulator needs ground truth to answer.
    #[error("simulator requires ground truth for image {image_id}")]
    MissingGroundTruth { image_id: String },

    /// Simulator profile does not cover the queried class.
    #[error("simulator profile has no rates for category {category}")]
    ProfileMismatch { category: usize },

    /// The query kind cannot be answered by this backend.
    #[error("unsupported query: {0}")]
    Unsupported(String),
}

impl BackendError {
    /// Errors that must abort the run even in degraded mode.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Auth { .. })
    }
}
