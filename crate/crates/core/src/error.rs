use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step index {t} outside 1..={num_steps}")]
    StepOutOfRange { t: usize, num_steps: usize },

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f64),

    #[error("non-finite loss at step {step} (t = {timesteps:?}, w_bce = {w_bce}, w_iou = {w_iou})")]
    NonFiniteLoss {
        step: u64,
        timesteps: Vec<usize>,
        w_bce: f64,
        w_iou: f64,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("missing ground-truth mask for {}", .0.display())]
    MissingMask(PathBuf),

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
