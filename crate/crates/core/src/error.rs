//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input array does not match the study design.
    #[error("dimension mismatch at {location}: expected {expected}, got {actual}")]
    DimensionMismatch {
        location: String,
        expected: usize,
        actual: usize,
    },

    /// A design or configuration value violates its constraints.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A likelihood or kernel evaluation produced a non-finite value.
    #[error("non-finite intermediate in {0}")]
    NonFinite(&'static str),

    /// The normal equations for a laboratory's bias update are degenerate.
    #[error("singular design: bias update for laboratory {lab} has a vanishing denominator")]
    SingularDesign { lab: usize },

    /// The bias block of the observed information cannot be inverted reliably.
    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    /// A contrast matrix for a composite hypothesis is rank deficient.
    #[error("rank-deficient contrast: rank {rank} < {required} columns")]
    RankDeficient { rank: usize, required: usize },

    /// A probability or quantile argument is outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A data or configuration file failed to parse.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(location: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            location: location.into(),
            expected,
            actual,
        }
    }

    /// True for errors that indicate bad input rather than a numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::InvalidInput(_)
                | Error::Domain(_)
                | Error::Parse { .. }
                | Error::Io { .. }
        )
    }
}
