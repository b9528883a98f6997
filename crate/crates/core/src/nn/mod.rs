//! Minimal differentiable building blocks on top of candle tensors.

pub mod conv;
pub mod fused;
pub mod layers;
pub mod params;

pub use conv::conv2d;
pub use fused::{ada_group_norm_silu, upsample2x};
pub use layers::{group_norm, resize_bilinear, softmax_last_dim, Conv2d, LayerNorm, Linear};
pub use params::{Init, Scope, VarStore};
