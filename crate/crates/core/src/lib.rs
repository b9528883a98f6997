//! Conditional diffusion mask generation for camouflaged object detection.
//!
//! A denoiser conditioned on an image iteratively recovers a segmentation
//! mask from Gaussian noise. Predictions from every reverse step are pooled
//! by a consensus vote into the final mask.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
