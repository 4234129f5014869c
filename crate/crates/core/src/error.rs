use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("empty density report: {0}")]
    EmptyReport(String),

    #[error("rank-deficient design matrix; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("stage `{stage}` failed for dataset `{dataset}` at K={k}: {source}")]
    Stage {
        dataset: String,
        k: usize,
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("incomplete stages: {}", .0.join(", "))]
    IncompleteStages(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
