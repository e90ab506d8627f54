use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("operation not available in {mode} hardware mode: {what}")]
    Mode { mode: String, what: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("ill-conditioned kernel matrix: {0}")]
    Conditioning(String),

    #[error("layer {layer} does not fit: {detail}")]
    Capacity { layer: usize, detail: String },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn dim(expected: usize, got: usize, what: &str) -> Self {
        Error::Dimension(format!("{what}: expected {expected}, got {got}"))
    }
}
