//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence of {len} tokens exceeds context window {window}")]
    SequenceTooLong { len: usize, window: usize },

    #[error("sequence too short: need at least {min} tokens, got {len}")]
    SequenceTooShort { len: usize, min: usize },

    #[error("prompt ({prompt}) plus {requested} new tokens overflows context window {window}")]
    ContextOverflow {
        prompt: usize,
        requested: usize,
        window: usize,
    },

    #[error("empty span: {0}")]
    EmptySpan(String),

    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("empty question sample")]
    EmptyQuestionSample,

    #[error("insufficient data: need {needed} records, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("schema violation in {path}: {detail}")]
    SchemaViolation { path: String, detail: String },

    #[error("template is missing slot {0:?}")]
    MissingSlot(String),

    #[error("prompt has no demonstration structure: {0}")]
    UnparseableStructure(String),

    #[error("unknown provider {0:?} in pricing table")]
    UnknownProvider(String),

    #[error("original token count must be positive")]
    ZeroLengthOriginal,

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
