use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} is outside the open interval (0, 1)")]
    OutsideUnitInterval { value: f64 },

    #[error("covariance has a negative eigenvalue {eigenvalue:e}")]
    NumericalDegeneracy { eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no Gaussian has opacity above the floor {floor}")]
    NoValidTarget { floor: f64 },

    #[error("theta update rejected: step size {step} would produce negative weights")]
    ThetaStepTooLarge { step: f64 },

    #[error("integral of exp(-U/tau) underflowed")]
    IntegralUnderflow,

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iter}: loss was non-finite on two consecutive iterations")]
    Aborted { iter: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
