//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("trial {trial}: {source}")]
    AtTrial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("representation '{representation}': {source}")]
    InRepresentation {
        representation: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_trial(self, trial: usize) -> Self {
        Error::AtTrial {
            trial,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_representation(self, name: &str) -> Self {
        Error::InRepresentation {
            representation: name.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
