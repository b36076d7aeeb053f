use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error("transcript parse error: missing marker `{marker}`")]
    MissingMarker { marker: String },

    #[error("transcript parse error at line {line}: {reason}")]
    MalformedTranscript { line: usize, reason: String },

    #[error("unknown state key {0}")]
    UnknownState(String),

    #[error("non-finite loss from teacher(s) {teachers:?}")]
    InfiniteLoss { teachers: Vec<usize> },

    #[error("numeric abort at iteration {iteration}, step {step}: {reason}")]
    NumericAbort {
        iteration: usize,
        step: usize,
        reason: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Io(err.to_string())
    }
}
