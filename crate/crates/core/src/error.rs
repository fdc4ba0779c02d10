use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("measure has no support points")]
    EmptyMeasure,

    #[error("negative weight {weight} at index {index}")]
    NegativeWeight { index: usize, weight: f64 },

    #[error("total mass must be positive, got {0}")]
    NonPositiveMass(f64),

    #[error("weights sum to {0}, outside 1 ± 1e-8 (enable renormalization to accept)")]
    NotNormalized(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("image has no positive pixel")]
    ZeroImage,

    #[error("instance has {cells} cells, above the oracle cap of {cap}")]
    OracleCap { cells: usize, cap: usize },

    #[error("candidate enumeration needs {count} tuples, above the cap of {cap}")]
    CandidateCap { count: usize, cap: usize },

    #[error("non-finite scaling in linear-domain iterations; enable the log-domain path")]
    NonFiniteScaling,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("samples have zero variance")]
    ZeroVariance,

    #[error("internal solver error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
