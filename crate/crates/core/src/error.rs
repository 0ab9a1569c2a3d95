use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("invalid label value {0} (expected 0, 1 or 2)")]
    InvalidLabel(u8),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error at {path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
