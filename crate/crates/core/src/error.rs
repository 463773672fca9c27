use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Spatial geometry cannot be realised (indivisible sizes, stride mismatch, ...).
    #[error("geometry: {0}")]
    Geometry(String),

    /// A resampling mode was used in the wrong direction.
    #[error("resample mode {mode} cannot map {from:?} to {to:?}")]
    Mode {
        mode: &'static str,
        from: (usize, usize),
        to: (usize, usize),
    },

    /// A caller broke an operation's contract.
    #[error("contract violated: {0}")]
    Contract(String),

    /// A function could not be evaluated (non-finite result during a gradient check).
    #[error("evaluation failed: {0}")]
    Evaluation(String),

    /// A tensor produced during training contained NaN or Inf.
    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
