use std::path::PathBuf;

use thiserror::Error;

use crate::memcap::Violation;
use crate::strategy::Constraint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(Constraint),

    #[error("infeasible: {0}")]
    Infeasible(Box<Violation>),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

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

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI diagnostics and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidSystem(_) => "invalid_system",
            Error::InvalidStrategy(_) => "invalid_strategy",
            Error::Infeasible(_) => "infeasible",
            Error::Range(_) => "range",
            Error::InvalidSweep(_) => "invalid_sweep",
            Error::Io { .. } => "io",
            Error::Json { .. } => "parse",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
