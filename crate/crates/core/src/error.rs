use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("insufficient data: {what} needs at least {required} samples, got {available}")]
    InsufficientData {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported polynomial degree {0} (supported: 1, 2)")]
    UnsupportedDegree(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("R² undefined: truth is constant")]
    UndefinedR2,

    #[error(
        "no model: zero elites after {iterations} iterations (best long-term R² seen {best_r2:.4}, final lambda {final_lambda})"
    )]
    NoModel {
        iterations: usize,
        best_r2: f64,
        final_lambda: f64,
    },

    #[error("unknown plant '{name}' (available: {available})")]
    UnknownPlant { name: String, available: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::UnsupportedDegree(_) | Error::UnknownPlant { .. } => 2,
            Error::NoModel { .. } => 4,
            _ => 3,
        }
    }
}
