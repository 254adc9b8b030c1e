use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the testing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column {0} has zero variance")]
    ConstantColumn(usize),
    #[error("invalid train fraction {fraction} for n = {n}")]
    InvalidFraction { n: usize, fraction: f64 },
    #[error("invalid fold count {k} for n = {n}")]
    InvalidK { n: usize, k: usize },
    #[error("covariance is not positive definite")]
    SingularCovariance,
    #[error("mixture component {0} degenerated")]
    DegenerateComponent(usize),
    #[error("all mixture component densities underflowed")]
    NumericalUnderflow,
    #[error("non-finite training loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
