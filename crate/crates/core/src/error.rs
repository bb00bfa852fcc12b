use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("document exceeds truncation")]
    DocumentExceedsTruncation,

    #[error("document {0} has no sentences")]
    NoSentences(String),

    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty attention row {row}")]
    EmptyAttentionRow { row: usize },

    #[error("unknown head {0}")]
    UnknownHead(String),

    #[error("label count {labels} does not match sentence count {sentences}")]
    LabelMismatch { labels: usize, sentences: usize },

    #[error("document {0} has no oracle labels")]
    MissingLabels(String),

    #[error("insufficient samples: need at least 2, got {0}")]
    InsufficientSamples(usize),

    #[error("undefined cosine: zero score vector")]
    UndefinedCosine,

    #[error("reports cover different heads")]
    HeadSetMismatch,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("step must be >= 1")]
    ZeroStep,

    #[error("model already carries projected attention layers")]
    AlreadyAugmented,

    #[error("{needed} pattern heads requested but the model has {available} heads per layer")]
    TooFewHeads { needed: usize, available: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
