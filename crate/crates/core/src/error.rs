use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token id {id} out of vocabulary range (size {vocab})")]
    VocabId { id: usize, vocab: usize },

    #[error("unsupported punctuation character {0:?}")]
    UnsupportedPunct(char),

    #[error("input too short: {len} frames, need at least {min}")]
    InputTooShort { len: usize, min: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("attention query row {row} has no visible keys")]
    FullyMaskedRow { row: usize },

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("non-finite loss while perturbing parameter {param:?}")]
    NonFiniteLoss { param: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
