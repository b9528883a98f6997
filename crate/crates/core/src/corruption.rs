//! Forward diffusion used during training: structure corruption of the
//! ground-truth contour followed by Gaussian noising.

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Turns structure corruption off entirely (pixel-level noise only).
    pub enabled: bool,
    pub apply_prob: f64,
    pub boundary_radius: usize,
    pub block_size: usize,
    pub block_flip_prob: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            apply_prob: 0.5,
            boundary_radius: 3,
            block_size: 16,
            block_flip_prob: 0.3,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        for (name, p) in [("apply_prob", self.apply_prob), ("block_flip_prob", self.block_flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                errors.push(format!("corruption.{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.boundary_radius < 1 {
            errors.push("corruption.boundary_radius must be >= 1".into());
        }
        if self.block_size < 1 {
            errors.push("corruption.block_size must be >= 1".into());
        }
    }
}

pub(crate) fn check_binary(mask: ArrayView2<f32>) -> Result<()> {
    match mask.iter().find(|&&v| v != 1.0 && v != -1.0) {
        Some(&v) => Err(Error::NonBinaryMask(f64::from(v))),
        None => Ok(()),
    }
}

/// Summed-area table over foreground indicators, `(h + 1) × (w + 1)`.
struct ForegroundCounts {
    table: Array2<u32>,
}

impl ForegroundCounts {
    fn new(mask: ArrayView2<f32>) -> Self {
        let (h, w) = mask.dim();
        let mut table = Array2::<u32>::zeros((h + 1, w + 1));
        for i in 0..h {
            for j in 0..w {
                let fg = u32::from(mask[[i, j]] > 0.0);
                table[[i + 1, j + 1]] = fg + table[[i, j + 1]] + table[[i + 1, j]] - table[[i, j]];
            }
        }
        Self { table }
    }

    /// Foreground count and area of the Chebyshev window of `radius` around
    /// `(i, j)`, clipped to the image.
    fn window(&self, i: usize, j: usize, radius: usize) -> (u32, u32) {
        let (h, w) = (self.table.nrows() - 1, self.table.ncols() - 1);
        let (i0, i1) = (i.saturating_sub(radius), (i + radius + 1).min(h));
        let (j0, j1) = (j.saturating_sub(radius), (j + radius + 1).min(w));
        let t = &self.table;
        let count = t[[i1, j1]] + t[[i0, j0]] - t[[i0, j1]] - t[[i1, j0]];
        (count, ((i1 - i0) * (j1 - j0)) as u32)
    }
}

/// Pixels whose `radius` neighborhood contains both classes.
pub fn boundary_band(mask: ArrayView2<f32>, radius: usize) -> Array2<bool> {
    let counts = ForegroundCounts::new(mask);
    Array2::from_shape_fn(mask.dim(), |(i, j)| {
        let (fg, area) = counts.window(i, j, radius);
        fg > 0 && fg < area
    })
}

/// `iterations` rounds of 3×3 dilation (or erosion) of the foreground.
/// Pixels outside the image never constrain erosion.
fn morph(counts: &ForegroundCounts, dim: (usize, usize), iterations: usize, dilate: bool) -> Array2<f32> {
    Array2::from_shape_fn(dim, |(i, j)| {
        let (fg, area) = counts.window(i, j, iterations);
        let on = if dilate { fg > 0 } else { fg == area };
        if on {
            1.0
        } else {
            -1.0
        }
    })
}

/// Randomly destroys the GT contour inside the boundary band.
///
/// The image is tiled into `block_size` squares; each square touching the
/// band is, with `block_flip_prob`, replaced inside the band by a dilated or
/// eroded copy of the mask (1..=`boundary_radius` rounds of a 3×3 square).
pub fn structure_corrupt<R: Rng>(mask: ArrayView2<f32>, cfg: &CorruptionConfig, rng: &mut R) -> Result<Array2<f32>> {
    check_binary(mask)?;
    let mut out = mask.to_owned();
    let apply = rng.random::<f64>() < cfg.apply_prob;
    if !cfg.enabled || !apply {
        return Ok(out);
    }
    let dim = mask.dim();
    let radius = cfg.boundary_radius.max(1);
    let block = cfg.block_size.max(1);
    let band = boundary_band(mask, radius);
    let counts = ForegroundCounts::new(mask);
    let mut variants: Vec<Option<Array2<f32>>> = vec![None; 2 * radius];

    for bi in (0..dim.0).step_by(block) {
        for bj in (0..dim.1).step_by(block) {
            let rows = bi..(bi + block).min(dim.0);
            let cols = bj..(bj + block).min(dim.1);
            let touches = rows.clone().any(|i| cols.clone().any(|j| band[[i, j]]));
            if !touches {
                continue;
            }
            if rng.random::<f64>() >= cfg.block_flip_prob {
                continue;
            }
            let dilate = rng.random::<bool>();
            let iterations = rng.random_range(1..=radius);
            let slot = (iterations - 1) * 2 + usize::from(dilate);
            let perturbed = variants[slot].get_or_insert_with(|| morph(&counts, dim, iterations, dilate));
            for i in rows.clone() {
                for j in cols.clone() {
                    if band[[i, j]] {
                        out[[i, j]] = perturbed[[i, j]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `√ᾱ_t·x0 + √(1 − ᾱ_t)·noise` for a single step index.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    if x0.dims() != noise.dims() {
        return Err(shape_err(format!("q_sample: x0 {:?} vs noise {:?}", x0.dims(), noise.dims())));
    }
    let (a, b) = schedule.forward_marginal_params(t)?;
    Ok(((x0 * a)? + (noise * b)?)?)
}

/// Batched [`q_sample`] with one step index per leading-dimension item.
pub fn q_sample_batch(schedule: &NoiseSchedule, x0: &Tensor, steps: &[usize], noise: &Tensor) -> Result<Tensor> {
    if x0.dims() != noise.dims() {
        return Err(shape_err(format!("q_sample: x0 {:?} vs noise {:?}", x0.dims(), noise.dims())));
    }
    let batch = x0.dim(0)?;
    if steps.len() != batch {
        return Err(shape_err(format!("q_sample: {} steps for batch of {batch}", steps.len())));
    }
    let mut a = Vec::with_capacity(batch);
    let mut b = Vec::with_capacity(batch);
    for &t in steps {
        let (sa, sb) = schedule.forward_marginal_params(t)?;
        a.push(sa as f32);
        b.push(sb as f32);
    }
    let mut bshape = vec![1usize; x0.rank()];
    bshape[0] = batch;
    let a = Tensor::from_vec(a, bshape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let b = Tensor::from_vec(b, bshape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
}
