//! Adaptive transformer conditional network.
//!
//! A four-stage pyramid transformer over the image. The first stage embeds
//! the image together with the noised mask through a zero-initialized
//! convolution, so an untrained network ignores `x_t` entirely. Every stage
//! prepends a time token to its patch sequence.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{softmax_last_dim, Conv2d, LayerNorm, Linear, Scope};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtcnConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_depths: [usize; NUM_STAGES],
    pub patch_strides: [usize; NUM_STAGES],
    pub attention_reduction: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub mlp_ratio: usize,
}

impl Default for AtcnConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128, 160],
            stage_depths: [2, 2, 2, 2],
            patch_strides: [4, 2, 2, 2],
            attention_reduction: [8, 4, 2, 1],
            num_heads: [1, 2, 4, 8],
            mlp_ratio: 4,
        }
    }
}

impl AtcnConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.patch_strides != [4, 2, 2, 2] {
            errors.push(format!("model.atcn.patch_strides must be [4, 2, 2, 2], got {:?}", self.patch_strides));
        }
        for i in 0..NUM_STAGES {
            let (c, h) = (self.stage_channels[i], self.num_heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                errors.push(format!("model.atcn stage {}: {c} channels not divisible by {h} heads", i + 1));
            }
            if self.stage_depths[i] == 0 {
                errors.push(format!("model.atcn stage {}: depth must be >= 1", i + 1));
            }
            if self.attention_reduction[i] == 0 {
                errors.push(format!("model.atcn stage {}: attention_reduction must be >= 1", i + 1));
            }
        }
        if self.mlp_ratio == 0 {
            errors.push("model.atcn.mlp_ratio must be >= 1".into());
        }
    }

    /// Total downsampling factor of the last stage.
    pub fn total_stride(&self) -> usize {
        self.patch_strides.iter().product()
    }
}

/// Multi-scale condition features `F1..F4` at `H/4 .. H/32`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: [Tensor; NUM_STAGES],
}

/// Overlapping patch embedding; stage 1 adds a zero-initialized branch for
/// the noised mask.
#[derive(Debug, Clone)]
struct PatchEmbed {
    conv: Conv2d,
    zero_conv: Option<Conv2d>,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(scope: &Scope, in_ch: usize, out_ch: usize, stride: usize, with_mask: bool) -> Result<Self> {
        let kernel = 2 * stride - 1;
        let pad = kernel / 2;
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), in_ch, out_ch, kernel, stride, pad)?,
            zero_conv: if with_mask {
                Some(Conv2d::zeros(&scope.pp("zero_conv"), 1, out_ch, kernel, stride, pad)?)
            } else {
                None
            },
            norm: LayerNorm::new(&scope.pp("norm"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, usize, usize)> {
        let mut f = self.conv.forward(x)?;
        if let (Some(zero_conv), Some(mask)) = (&self.zero_conv, mask) {
            f = (f + zero_conv.forward(mask)?)?;
        }
        let (_, _, h, w) = f.dims4()?;
        let tokens = f.flatten_from(2)?.transpose(1, 2)?;
        Ok((self.norm.forward(&tokens)?, h, w))
    }
}

/// Multi-head attention whose keys and values come from a spatially reduced
/// copy of the patch grid; the time token always attends and is attended.
#[derive(Debug, Clone)]
struct SrAttention {
    heads: usize,
    q: Linear,
    kv: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
}

impl SrAttention {
    fn new(scope: &Scope, dim: usize, heads: usize, reduction: usize) -> Result<Self> {
        let reduce = if reduction > 1 {
            Some((
                Conv2d::new(&scope.pp("sr"), dim, dim, reduction, reduction, 0)?,
                LayerNorm::new(&scope.pp("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            heads,
            q: Linear::new(&scope.pp("q"), dim, dim)?,
            kv: Linear::new(&scope.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&scope.pp("proj"), dim, dim)?,
            reduce,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let head_dim = c / self.heads;
        let q = self
            .q
            .forward(x)?
            .reshape((b, n, self.heads, head_dim))?
            .transpose(1, 2)?
            .contiguous()?;
        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let time = x.narrow(1, 0, 1)?;
                let grid = x.narrow(1, 1, n - 1)?.transpose(1, 2)?.reshape((b, c, h, w))?;
                let reduced = conv.forward(&grid)?.flatten_from(2)?.transpose(1, 2)?;
                Tensor::cat(&[&time, &norm.forward(&reduced)?], 1)?
            }
            None => x.clone(),
        };
        let m = kv_src.dim(1)?;
        let kv = self.kv.forward(&kv_src)?.reshape((b, m, 2, self.heads, head_dim))?;
        let k = kv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let attn = softmax_last_dim(&(q.matmul(&k.t()?)? * scale)?)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: SrAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(scope: &Scope, dim: usize, heads: usize, reduction: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&scope.pp("norm1"), dim)?,
            attn: SrAttention::new(&scope.pp("attn"), dim, heads, reduction)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            fc1: Linear::new(&scope.pp("fc1"), dim, dim * mlp_ratio)?,
            fc2: Linear::new(&scope.pp("fc2"), dim * mlp_ratio, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        let y = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: PatchEmbed,
    time_proj: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Stage {
    fn time_token(&self, temb: &Tensor) -> Result<Tensor> {
        Ok(self.time_proj.forward(temb)?.unsqueeze(1)?)
    }

    fn encode(&self, tokens: Tensor, h: usize, w: usize, temb: &Tensor) -> Result<Tensor> {
        let (b, n, c) = tokens.dims3()?;
        let mut seq = Tensor::cat(&[&self.time_token(temb)?, &tokens], 1)?;
        for block in &self.blocks {
            seq = block.forward(&seq, h, w)?;
        }
        let seq = self.norm.forward(&seq)?;
        // Drop the time token before folding back into a map.
        let patches = seq.narrow(1, 1, n)?;
        Ok(patches.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Atcn {
    cfg: AtcnConfig,
    stages: Vec<Stage>,
}

impl Atcn {
    pub fn new(scope: &Scope, cfg: &AtcnConfig, time_dim: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = 3;
        for i in 0..NUM_STAGES {
            let s = scope.pp(format!("stage{}", i + 1));
            let dim = cfg.stage_channels[i];
            let blocks = (0..cfg.stage_depths[i])
                .map(|j| {
                    Block::new(
                        &s.pp(format!("block{j}")),
                        dim,
                        cfg.num_heads[i],
                        cfg.attention_reduction[i],
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                embed: PatchEmbed::new(&s.pp("embed"), in_ch, dim, cfg.patch_strides[i], i == 0)?,
                time_proj: Linear::new(&s.pp("time_proj"), time_dim, dim)?,
                blocks,
                norm: LayerNorm::new(&s.pp("norm"), dim)?,
            });
            in_ch = dim;
        }
        Ok(Self { cfg: cfg.clone(), stages })
    }

    pub fn config(&self) -> &AtcnConfig {
        &self.cfg
    }

    /// Stage-1 token sequence `(B, H/4·W/4, C1)` from the image and the
    /// noised mask.
    pub fn zoe_embed(&self, image: &Tensor, x_t: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = image.dims4()?;
        let (_, _, mh, mw) = x_t.dims4()?;
        if (h, w) != (mh, mw) {
            return Err(shape_err(format!("image {h}x{w} vs mask {mh}x{mw}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err(format!("spatial size {h}x{w} not divisible by 4")));
        }
        Ok(self.stages[0].embed.forward(image, Some(x_t))?.0)
    }

    /// Time token of one stage, `(B, 1, C_stage)`.
    pub fn time_token(&self, stage: usize, temb: &Tensor) -> Result<Tensor> {
        let s = self
            .stages
            .get(stage)
            .ok_or_else(|| shape_err(format!("no stage {stage}")))?;
        s.time_token(temb)
    }

    pub fn forward(&self, image: &Tensor, x_t: &Tensor, temb: &Tensor) -> Result<FeaturePyramid> {
        let (b, ch, h, w) = image.dims4()?;
        if ch != 3 {
            return Err(shape_err(format!("image must have 3 channels, got {ch}")));
        }
        if x_t.dims() != [b, 1, h, w] {
            return Err(shape_err(format!("x_t {:?} does not match image {:?}", x_t.dims(), image.dims())));
        }
        let stride = self.cfg.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(shape_err(format!("spatial size {h}x{w} not divisible by {stride}")));
        }
        let mut maps = Vec::with_capacity(NUM_STAGES);
        let mut input = image.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let mask = (i == 0).then_some(x_t);
            let (tokens, fh, fw) = stage.embed.forward(&input, mask)?;
            let f = stage.encode(tokens, fh, fw, temb)?;
            maps.push(f.clone());
            input = f;
        }
        let maps: [Tensor; NUM_STAGES] = maps.try_into().expect("four stages");
        Ok(FeaturePyramid { maps })
    }
}
