use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeIcpoError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid generator request: {0}")]
    InvalidRequest(String),

    #[error("generator failed after {attempts} attempt(s): {message}")]
    Generator { attempts: u32, message: String },

    #[error("no extractable answer among {candidates} candidate(s)")]
    NoConsensus { candidates: usize },

    #[error("invalid metric input: {0}")]
    Metrics(String),

    #[error("malformed generator response: {0}")]
    Response(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MeIcpoError>;
