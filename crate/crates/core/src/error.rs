use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the imputation and CAR-fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("row {row}, field `{field}`: {message}")]
    Validation {
        row: usize,
        field: String,
        message: String,
    },
    #[error("unresolvable zcta_id for facilities: {}", .0.join(", "))]
    Join(Vec<String>),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("no observations")]
    NoObservations,
    #[error("need at least {needed} observed values, found {found}")]
    TooFewObservations { needed: usize, found: usize },
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("intrinsic boundary: Q singular")]
    IntrinsicBoundary,
    #[error("linear algebra: {0}")]
    LinearAlgebra(String),
    #[error("non-finite state at iteration {iteration} in `{component}`")]
    NonFiniteState {
        iteration: usize,
        component: &'static str,
    },
    #[error("persistence baseline degenerate")]
    DegenerateBaseline,
    #[error("too few draws: {0} (need at least 100)")]
    TooFewDraws(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(row: usize, field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            row,
            field: field.to_string(),
            message: message.into(),
        }
    }
}
