use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span [{start}, {end}) for sentence of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("edit covers the whole sentence; no neighboring positions to score")]
    NoNeighbors,

    #[error("phrase bank has no usable phrases{}", .label.as_ref().map(|l| format!(" for label {l}")).unwrap_or_default())]
    EmptyBank { label: Option<String> },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend does not support {0}")]
    Unsupported(&'static str),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("document {id}: {message}")]
    Document { id: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn backend(msg: impl Into<String>) -> Self {
        Error::Backend(msg.into())
    }
}
