use std::path::PathBuf;

use thiserror::Error;

use crate::intervention::InterventionTrace;
use crate::linalg::AccumulatedBasis;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    Input(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("degenerate probe: all weight rows are zero")]
    DegenerateProbe,

    #[error("basis saturated at k = {dim} directions before probing reached the majority baseline")]
    Saturated {
        dim: usize,
        partial: Box<(AccumulatedBasis, InterventionTrace)>,
    },

    #[error("parse error in {what} at byte offset {offset}: {message}")]
    Parse {
        what: &'static str,
        offset: u64,
        message: String,
    },

    #[error("schema error in {what}: field `{field}`: {message}")]
    Schema {
        what: &'static str,
        field: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}

impl Error {
    /// Process exit status for this error: 2 for configuration problems,
    /// 4 for basis saturation, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Saturated { .. } => 4,
            _ => 3,
        }
    }
}
