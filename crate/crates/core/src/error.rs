use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(PathBuf),

    #[error("corpus has no pattern labels")]
    UnlabeledCorpus,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("order {order} undefined for a candidate of {len} tokens")]
    UndefinedOrder { order: usize, len: usize },

    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("need at least 2 outputs, got {0}")]
    InsufficientOutputs(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{}: unsupported checkpoint version {found}", path.display())]
    Version { path: PathBuf, found: u32 },

    #[error("{}: corrupt checkpoint: {detail}", path.display())]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("{}: file not found", .0.display())]
    NotFound(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
