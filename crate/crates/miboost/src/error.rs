//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("cannot parse cell at row {row}, column \"{column}\": \"{value}\"")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("duplicate column label \"{0}\"")]
    DuplicateColumn(String),

    #[error("response column \"{0}\" not found")]
    ResponseColumnMissing(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("imputation precondition violated: {0}")]
    ImputationPrecondition(String),

    #[error("imputation model does not cover variable \"{0}\", which is missing in the new data but was fully observed in training")]
    ModelCoverage(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
