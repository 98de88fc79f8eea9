use std::path::PathBuf;

/// Errors produced by the estimation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("too few issues to split: {0} (need at least 5)")]
    TooFewIssues(usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("id out of range: {id} (vocabulary size {size})")]
    IdOutOfRange { id: usize, size: usize },
    #[error("gradient blow-up: non-finite gradient in {0}")]
    GradientBlowUp(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("vocabulary mismatch: checkpoint {expected}, tokenizer {actual}")]
    VocabularyMismatch { expected: String, actual: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid record at line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("auth/query error (HTTP {status}): {message}")]
    AuthOrQuery { status: u16, message: String },
    #[error("transient failure after {attempts} attempts: {message}")]
    TransientFailure { attempts: u32, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
