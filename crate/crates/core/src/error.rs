use std::path::PathBuf;

use thiserror::Error;

use crate::expansion::ExpansionType;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("expander backend failed on sentence {sentence_id}: {msg}")]
    Backend { sentence_id: String, msg: String },

    #[error("backend `{backend}` does not support {kind}")]
    Capability {
        backend: String,
        kind: ExpansionType,
    },

    #[error("encoder unavailable: {0}")]
    Encoder(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("sequence of {needed} tokens exceeds the limit of {limit} after truncation")]
    Length { needed: usize, limit: usize },

    #[error("oracle budget exceeded: {0}")]
    Budget(String),

    #[error("non-finite loss on example {example_id}")]
    NonFinite { example_id: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
