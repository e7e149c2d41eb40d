use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state outside the model domain: e = {e} must exceed -e_bar = {}", -e_bar)]
    Domain { e: f64, e_bar: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sample is constant; the statistic is undefined")]
    ConstantSample,

    #[error("sample size {given} outside the supported range [{min}, {max}]")]
    SampleSize { given: usize, min: usize, max: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: empty file")]
    EmptyFile { path: PathBuf },

    #[error("{path}: {bad} of {total} rows could not be parsed (budget 5%):\n{report}")]
    TooManyBadRows {
        path: PathBuf,
        bad: usize,
        total: usize,
        report: String,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("objective evaluated to NaN: {0}")]
    NotANumber(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by an internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_) | Error::NotANumber(_))
    }
}
