use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sequence")]
    EmptySequence,

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),

    #[error("negative firing weight {value} at frame {frame}")]
    NegativeAlpha { frame: usize, value: f64 },

    #[error("more than one boundary fired at frame {0}")]
    MultipleFires(usize),

    #[error("empty segmentation: no segment fired and residual below threshold")]
    EmptySegmentation,

    #[error("alignment error at row {row}: {reason}")]
    Alignment { row: usize, reason: String },

    #[error("unreachable target rate: {0}")]
    UnreachableRate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Numerical(_)
                | Error::Divergence { .. }
                | Error::MultipleFires(_)
        )
    }
}
