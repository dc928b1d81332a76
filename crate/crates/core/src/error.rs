use std::path::PathBuf;

use thiserror::Error;

use crate::lmclient::LmError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent task data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration. Carries every violation found, not just the first.
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("labeling error for example {example_id}: {reason}")]
    Labeling { example_id: String, reason: String },

    #[error(transparent)]
    Lm(#[from] LmError),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An invariant of an in-memory structure was breached.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("missing input {path}: run `{producer}` first")]
    MissingInput {
        path: PathBuf,
        producer: &'static str,
    },

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
