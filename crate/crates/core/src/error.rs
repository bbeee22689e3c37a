use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("time index {t} outside 1..={max}")]
    TimeOutOfRange { t: usize, max: usize },

    #[error("negative DDIM radicand at t={t} ({value:e})")]
    NegativeRadicand { t: usize, value: f64 },

    #[error("projection at ({row0}, {col0}) of {patch_h}x{patch_w} exceeds {height}x{width} canvas")]
    OutOfBounds {
        row0: usize,
        col0: usize,
        patch_h: usize,
        patch_w: usize,
        height: usize,
        width: usize,
    },

    #[error("time-state invariant breach: {0}")]
    InvariantBreach(String),

    #[error("denoiser does not support a {height}x{width} input")]
    UnsupportedShape { height: usize, width: usize },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
