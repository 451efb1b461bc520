use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("referential integrity violation in table `{table}` row {row}: {message}")]
    ReferentialIntegrity {
        table: String,
        row: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward already called on this tape")]
    BackwardTwice,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("eigensolver: {0}")]
    Eigen(String),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("model: {0}")]
    Model(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
