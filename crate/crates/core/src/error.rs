use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input value violates a domain-type invariant (e.g. a non-finite logit).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter is outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Dimensions of two operands do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Two corpus entries share the same sample id.
    #[error("duplicate id: {0}")]
    DuplicateId(String),

    /// The vocabulary does not fit the 2-byte term-id encoding.
    #[error("vocabulary size {0} exceeds the 65536 limit of 16-bit term ids")]
    UnsupportedVocab(usize),

    /// A binary payload is malformed; `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    /// A query id in the result set has no qrels entry.
    #[error("query {0} is missing from the qrels")]
    MissingQrel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
