use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PsptError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PsptError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("checkpoint format error in field `{field}`: {detail}")]
    CheckpointFormat { field: String, detail: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PsptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PsptError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for configuration problems, 2 for data and I/O
    /// problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PsptError::Config(_) => 1,
            PsptError::Numeric(_) => 3,
            _ => 2,
        }
    }
}
