use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("cannot normalize a zero vector (row {row:?})")]
    ZeroVector { row: Option<usize> },

    #[error("non-finite value during evaluation: {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds capacity {capacity}")]
    Capacity { len: usize, capacity: usize },

    #[error("mask covers {mask} tokens but the sequence has {expected} reference tokens")]
    MaskShape { mask: usize, expected: usize },

    #[error("relevance needs at least one instruction token")]
    EmptyText,

    #[error("missing {0} stream")]
    MissingStream(&'static str),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("sample generation failed: {0}")]
    Generation(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
