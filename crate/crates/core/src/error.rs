use thiserror::Error;

use crate::solver::TraceRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("window {tau} too large for mode {mode} of length {len}")]
    WindowTooLarge { mode: usize, tau: usize, len: usize },

    #[error("mode {mode} of length {len} cannot be trimmed by {width} on each side")]
    ShapeUnderflow { mode: usize, len: usize, width: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid mode partition: {0}")]
    InvalidModePartition(String),

    #[error("invalid layer chain {dims:?}: {reason}")]
    InvalidChain { dims: Vec<usize>, reason: String },

    #[error("forward cache does not match the parameters: {0}")]
    CacheMismatch(String),

    #[error("non-finite gradient entry {value} at index {index}")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("kernel must sum to 1, got {sum}")]
    KernelNotNormalized { sum: f64 },

    #[error("unsupported down-sampling factor {0}")]
    InvalidFactor(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite loss at iteration {iter} (l_rec={l_rec}, l_ae={l_ae})")]
    NonFiniteLoss {
        iter: usize,
        l_rec: f64,
        l_ae: f64,
        trace: Vec<TraceRecord>,
    },

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
