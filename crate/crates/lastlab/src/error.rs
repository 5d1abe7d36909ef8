//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LastlabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training aborted: {0}")]
    Training(String),
}
