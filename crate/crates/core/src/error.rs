use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown character {ch:?} at byte offset {offset}")]
    UnknownChar { ch: char, offset: usize },

    #[error("invalid token id {0}")]
    InvalidToken(u32),

    #[error("invalid parameters: {0}")]
    Params(String),

    #[error("hash space exhausted after {0} hashes")]
    HashExhausted(usize),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("svd did not converge after {sweeps} sweeps (residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("{path}:{line}: malformed record: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
