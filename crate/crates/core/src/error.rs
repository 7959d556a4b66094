//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: schema,
//! parse, and validation problems are user-input errors (exit 2), while
//! factorization and degenerate-data problems are numerical errors
//! (exit 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate key: {0}")]
    DuplicateKey(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Validity(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("inestimable contrast: {0}")]
    Estimability(String),

    #[error("empty comparison: {0}")]
    EmptyComparison(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by malformed input or invalid requests, as
    /// opposed to numerical failures during computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Parse(_)
                | Error::DuplicateKey(_)
                | Error::Dimension(_)
                | Error::Validity(_)
                | Error::Parameter(_)
                | Error::Estimability(_)
                | Error::EmptyComparison(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
