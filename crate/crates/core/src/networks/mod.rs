//! The conditional denoiser `f(x_t, I, t) → x̂0`.

pub mod atcn;
pub mod dn;
pub mod time;

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

pub use atcn::{Atcn, AtcnConfig, FeaturePyramid};
pub use dn::{DenoisingNet, DnConfig, PyramidFusion};
pub use time::TimeEmbedding;

use crate::error::{shape_err, Error, Result};
use crate::nn::VarStore;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub atcn: AtcnConfig,
    pub dn: DnConfig,
    /// Optional safetensors file with ATCN weights (names relative to `atcn.`).
    pub backbone_weights: Option<PathBuf>,
}

impl ModelConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        self.atcn.validate(errors);
        self.dn.validate(errors);
    }
}

/// Anything that predicts the clean mask from a noised one.
pub trait Denoiser {
    /// `x_t: (B, 1, H, W)`, `image: (B, 3, H, W)`; every item is at step `t`
    /// of `schedule`. Returns `x̂0` in `[-1, 1]`.
    fn predict_x0(&self, x_t: &Tensor, image: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct CamoDiffusion {
    time: TimeEmbedding,
    atcn: Atcn,
    fusion: PyramidFusion,
    dn: DenoisingNet,
    device: Device,
}

impl CamoDiffusion {
    pub fn new(store: &VarStore, cfg: &ModelConfig) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let root = store.root();
        let time_dim = cfg.dn.time_embed_dim;
        let width = cfg.atcn.stage_channels[0];
        let model = Self {
            time: TimeEmbedding::new(&root.pp("time"), time_dim)?,
            atcn: Atcn::new(&root.pp("atcn"), &cfg.atcn, time_dim)?,
            fusion: PyramidFusion::new(&root.pp("fusion"), &cfg.atcn.stage_channels, width)?,
            dn: DenoisingNet::new(&root.pp("dn"), &cfg.dn, width)?,
            device: store.device().clone(),
        };
        if let Some(path) = &cfg.backbone_weights {
            load_backbone_weights(store, path)?;
        }
        Ok(model)
    }

    pub fn atcn(&self) -> &Atcn {
        &self.atcn
    }

    pub fn fusion(&self) -> &PyramidFusion {
        &self.fusion
    }

    pub fn dn(&self) -> &DenoisingNet {
        &self.dn
    }

    pub fn time_embedding(&self, times: &[f64]) -> Result<Tensor> {
        self.time.forward(times, &self.device)
    }

    pub fn pyramid(&self, x_t: &Tensor, image: &Tensor, times: &[f64]) -> Result<FeaturePyramid> {
        let temb = self.time_embedding(times)?;
        self.atcn.forward(image, x_t, &temb)
    }

    /// Full forward pass with one continuous time in (0, 1) per batch item.
    pub fn forward(&self, x_t: &Tensor, image: &Tensor, times: &[f64]) -> Result<Tensor> {
        let batch = x_t.dim(0)?;
        if times.len() != batch {
            return Err(shape_err(format!("{} times for batch of {batch}", times.len())));
        }
        let temb = self.time_embedding(times)?;
        let pyramid = self.atcn.forward(image, x_t, &temb)?;
        let z1 = self.fusion.forward(&pyramid)?;
        self.dn.forward(x_t, &z1, &temb)
    }
}

impl Denoiser for CamoDiffusion {
    fn predict_x0(&self, x_t: &Tensor, image: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        let s = schedule.time(t)?;
        let times = vec![s; x_t.dim(0)?];
        self.forward(x_t, image, &times)
    }
}

/// Copies externally trained ATCN weights into `store`.
pub fn load_backbone_weights(store: &VarStore, path: &Path) -> Result<()> {
    let tensors = candle_core::safetensors::load(path, store.device())?;
    let mut loaded = 0usize;
    for (name, value) in tensors {
        let full = format!("atcn.{name}");
        let Some(var) = store.get(&full) else {
            log::warn!("backbone weight `{name}` has no matching parameter; skipped");
            continue;
        };
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "backbone weight `{name}` has shape {:?}, expected {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        loaded += 1;
    }
    log::info!("loaded {loaded} backbone tensors from {}", path.display());
    Ok(())
}
