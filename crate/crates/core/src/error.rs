use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid value in {op}: {detail}")]
    InvalidValue { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of vocabulary: {field}={value} (allowed {min}..={max})")]
    Index {
        field: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },

    #[error("mask error: query {query} has no visible keys")]
    Mask { query: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("cadence gap at {timestamp}: expected step {expected_secs}s, found {found_secs}s")]
    Gap {
        timestamp: String,
        expected_secs: i64,
        found_secs: i64,
    },

    #[error("split '{split}' spans {span} steps, shorter than L_x + L_y = {needed}")]
    EmptySplit {
        split: &'static str,
        span: usize,
        needed: usize,
    },

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user-supplied configuration or arguments
    /// (exit code 2) rather than a runtime failure (exit code 1).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Io { .. }
                | Error::Input(_)
                | Error::Serde(_)
                | Error::Parse { .. }
                | Error::Gap { .. }
                | Error::EmptySplit { .. }
        )
    }
}
