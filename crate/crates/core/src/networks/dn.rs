//! Denoising network: pyramid fusion into a single condition map, then a
//! small U-shaped encoder/decoder over the noised mask with time-modulated
//! group normalization.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::atcn::{FeaturePyramid, NUM_STAGES};
use crate::error::{shape_err, Result};
use crate::nn::{ada_group_norm_silu, resize_bilinear, upsample2x, Conv2d, Linear, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnConfig {
    pub base_channels: usize,
    /// Number of resolution levels; the condition joins at level 2 (H/4).
    pub depth: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl Default for DnConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            time_embed_dim: 128,
            groups: 8,
        }
    }
}

impl DnConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.base_channels == 0 {
            errors.push("model.dn.base_channels must be >= 1".into());
        }
        if self.depth < 3 {
            errors.push(format!("model.dn.depth must be >= 3 to reach the H/4 condition level, got {}", self.depth));
        }
        if self.time_embed_dim < 2 {
            errors.push("model.dn.time_embed_dim must be >= 2".into());
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 {
            errors.push(format!(
                "model.dn.groups ({}) must divide base_channels ({})",
                self.groups, self.base_channels
            ));
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Level at which the fused condition is concatenated (H/4).
const CONDITION_LEVEL: usize = 2;

/// Local emphasis: two conv+ReLU layers then bilinear upsampling.
#[derive(Debug, Clone)]
pub struct LocalEmphasis {
    cr1: Conv2d,
    cr2: Conv2d,
}

impl LocalEmphasis {
    fn new(scope: &Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            cr1: Conv2d::new(&scope.pp("cr1"), in_ch, out_ch, 3, 1, 1)?,
            cr2: Conv2d::new(&scope.pp("cr2"), out_ch, out_ch, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, f: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let x = self.cr1.forward(f)?.relu()?;
        let x = self.cr2.forward(&x)?.relu()?;
        resize_bilinear(&x, out_h, out_w)
    }
}

/// Turns the feature pyramid into the condition map `Z1` at H/4.
#[derive(Debug, Clone)]
pub struct PyramidFusion {
    le: Vec<LocalEmphasis>,
    /// `fuse[i]` produces `Z_{i+1}` from `[Z_{i+2}, F_{i+1}^up]`, i = 0..3.
    fuse: Vec<Conv2d>,
    width: usize,
}

impl PyramidFusion {
    pub fn new(scope: &Scope, stage_channels: &[usize; NUM_STAGES], width: usize) -> Result<Self> {
        let le = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LocalEmphasis::new(&scope.pp(format!("le{}", i + 1)), c, width))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (0..NUM_STAGES - 1)
            .map(|i| Conv2d::new(&scope.pp(format!("fuse{}", i + 1)), 2 * width, width, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { le, fuse, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// All pyramid levels resized to the scale of `F1`.
    pub fn upsample(&self, pyramid: &FeaturePyramid) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = pyramid.maps[0].dims4()?;
        self.le
            .iter()
            .zip(pyramid.maps.iter())
            .map(|(le, f)| le.forward(f, h, w))
            .collect()
    }

    /// `Z4 = F4up`, `Z_i = Conv3x3([Z_{i+1}, F_i up])` down to `Z1`.
    pub fn fuse(&self, upsampled: &[Tensor]) -> Result<Tensor> {
        if upsampled.len() != NUM_STAGES {
            return Err(shape_err(format!("expected {NUM_STAGES} maps, got {}", upsampled.len())));
        }
        let dims = upsampled[0].dims();
        if upsampled.iter().any(|u| u.dims() != dims) {
            return Err(shape_err("pyramid maps are not at a common scale"));
        }
        let mut z = upsampled[NUM_STAGES - 1].clone();
        for i in (0..NUM_STAGES - 1).rev() {
            z = self.fuse[i].forward(&Tensor::cat(&[&z, &upsampled[i]], 1)?)?;
        }
        Ok(z)
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.fuse(&self.upsample(pyramid)?)
    }
}

/// Convolution followed by adaptive group normalization and SiLU.
#[derive(Debug, Clone)]
struct ConvAdaGn {
    conv: Conv2d,
    modulation: Linear,
    groups: usize,
}

impl ConvAdaGn {
    fn new(scope: &Scope, in_ch: usize, out_ch: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), in_ch, out_ch, 3, 1, 1)?,
            modulation: Linear::new(&scope.pp("ada"), time_dim, 2 * out_ch)?,
            groups,
        })
    }

    fn forward(&self, x: &Tensor, temb_act: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(x)?;
        let c = h.dim(1)?;
        let ss = self.modulation.forward(temb_act)?;
        ada_group_norm_silu(&h, &ss.narrow(1, 0, c)?, &ss.narrow(1, c, c)?, self.groups)
    }
}

#[derive(Debug, Clone)]
struct Level {
    first: ConvAdaGn,
    second: ConvAdaGn,
}

impl Level {
    fn new(scope: &Scope, in_ch: usize, out_ch: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            first: ConvAdaGn::new(&scope.pp("0"), in_ch, out_ch, time_dim, groups)?,
            second: ConvAdaGn::new(&scope.pp("1"), out_ch, out_ch, time_dim, groups)?,
        })
    }

    fn forward(&self, x: &Tensor, temb_act: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x, temb_act)?, temb_act)
    }
}

#[derive(Debug, Clone)]
pub struct DenoisingNet {
    cfg: DnConfig,
    input: Conv2d,
    encoder: Vec<Level>,
    decoder: Vec<Level>,
    output: Conv2d,
}

impl DenoisingNet {
    pub fn new(scope: &Scope, cfg: &DnConfig, condition_channels: usize) -> Result<Self> {
        let t = cfg.time_embed_dim;
        let g = cfg.groups;
        let input = Conv2d::new(&scope.pp("input"), 1, cfg.channels(0), 3, 1, 1)?;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut prev = cfg.channels(0);
        for l in 0..cfg.depth {
            let extra = if l == CONDITION_LEVEL { condition_channels } else { 0 };
            encoder.push(Level::new(&scope.pp(format!("enc{l}")), prev + extra, cfg.channels(l), t, g)?);
            prev = cfg.channels(l);
        }
        let mut decoder = Vec::with_capacity(cfg.depth - 1);
        for l in 0..cfg.depth - 1 {
            let in_ch = cfg.channels(l + 1) + cfg.channels(l);
            decoder.push(Level::new(&scope.pp(format!("dec{l}")), in_ch, cfg.channels(l), t, g)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            input,
            encoder,
            decoder,
            output: Conv2d::new(&scope.pp("output"), cfg.channels(0), 1, 3, 1, 1)?,
        })
    }

    /// Predicts `x̂0 ∈ [-1, 1]` with the same shape as `x_t`.
    pub fn forward(&self, x_t: &Tensor, condition: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x_t.dims4()?;
        if c != 1 {
            return Err(shape_err(format!("x_t must have one channel, got {c}")));
        }
        let scale = 1 << (self.cfg.depth - 1);
        if h % scale != 0 || w % scale != 0 {
            return Err(shape_err(format!("spatial size {h}x{w} not divisible by {scale}")));
        }
        let (_, _, zh, zw) = condition.dims4()?;
        if (zh * 4, zw * 4) != (h, w) {
            return Err(shape_err(format!("condition {zh}x{zw} is not at H/4 of {h}x{w}")));
        }
        let temb_act = temb.silu()?;
        let mut x = self.input.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (l, level) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = x.avg_pool2d(2)?;
            }
            if l == CONDITION_LEVEL {
                x = Tensor::cat(&[&x, condition], 1)?;
            }
            x = level.forward(&x, &temb_act)?;
            skips.push(x.clone());
        }
        for l in (0..self.cfg.depth - 1).rev() {
            x = upsample2x(&x)?;
            x = Tensor::cat(&[&x, &skips[l]], 1)?;
            x = self.decoder[l].forward(&x, &temb_act)?;
        }
        // tanh keeps x̂0 inside [-1, 1]; the clamp guards against rounding.
        Ok(self.output.forward(&x)?.tanh()?.clamp(-1f32, 1f32)?)
    }
}
