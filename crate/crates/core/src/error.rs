use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("dataset {0} contains no events")]
    EmptyDataset(String),

    #[error("unknown schema `{0}` (expected `structured` or `categorical`)")]
    UnknownSchema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("query time {t} is not after the last history event at {last}")]
    NotAfterHistory { t: f64, last: f64 },

    #[error("thinning bound violated at t={t}: intensity {intensity} exceeds bound {bound}")]
    BoundViolated { t: f64, intensity: f64, bound: f64 },

    #[error("non-positive intensity {value} for observed event at t={t}")]
    ZeroIntensity { t: f64, value: f64 },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("restriction matches no event type")]
    EmptyRestriction,

    #[error("unresolved template placeholder `{0}`")]
    Placeholder(String),

    #[error("backend request failed: {0}")]
    Backend(String),

    #[error("corrupt cache entry {path}: {message}")]
    CacheCorrupt { path: PathBuf, message: String },

    #[error("no covered queries")]
    NoCoverage,

    #[error("record {0} is missing a predicted or true time")]
    MissingTime(String),

    #[error("missing artifact {path}: run stage `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
