use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in record {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("invalid document {doc_id}: {message}")]
    Validation { doc_id: String, message: String },

    #[error("unknown entity {entity_id} in document {doc_id}")]
    UnknownEntity { doc_id: String, entity_id: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error for document {doc_id}: {message}")]
    Data { doc_id: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("gradient check harness: {0}")]
    Harness(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(doc_id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            doc_id: doc_id.into(),
            message: message.into(),
        }
    }

    /// The document the error is about, when it is about one.
    pub fn doc_id(&self) -> Option<&str> {
        match self {
            Error::Validation { doc_id, .. }
            | Error::UnknownEntity { doc_id, .. }
            | Error::Data { doc_id, .. } => Some(doc_id),
            _ => None,
        }
    }
}
