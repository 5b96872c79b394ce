use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("label kind mismatch: {0}")]
    KindMismatch(String),

    #[error("lookup error: no record for sample {0}")]
    Lookup(u64),

    #[error("corruption detected: {0}")]
    Corruption(String),

    #[error("non-finite value {what} (sample {sample:?}, step {step})")]
    NonFinite {
        what: &'static str,
        sample: Option<u64>,
        step: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
