use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside the domain of the model it configures.
    #[error("domain error: {0}")]
    Domain(String),

    /// An optimization problem whose dimensions or coefficients are inconsistent.
    #[error("malformed problem: {0}")]
    Malformed(String),

    /// The solver stopped without reaching an optimal point.
    #[error("solver failed ({status:?}) while {context}")]
    Solver {
        status: crate::solver::SolveStatus,
        context: String,
    },

    /// An invariant the caller relies on does not hold (e.g. an infeasible reference point).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A requested window or agent subset is not covered by the profiles.
    #[error("window out of range: {0}")]
    Window(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
