use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cached activations incompatible: {0}")]
    CacheIncompatible(String),

    #[error("cache miss: {0}")]
    CacheMiss(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("state error: {0}")]
    State(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("capacity exhausted: {0}")]
    Capacity(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("worker {worker} rejected request {request}: queue full")]
    Backpressure { worker: usize, request: u64 },

    #[error("no workers available")]
    NoCapacity,

    #[error("invalid workload: {0}")]
    Workload(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
