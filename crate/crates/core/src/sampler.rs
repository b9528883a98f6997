//! Reverse diffusion from pure noise, consensus time ensembling of the
//! per-step predictions, and multi-chain ensembles.

use candle_core::Tensor;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::networks::Denoiser;
use crate::rng::{mix_index, randn, rng_from};
use crate::schedule::NoiseSchedule;

/// Upper clip for the adaptive threshold.
pub const THRESHOLD_EPS: f64 = 1e-6;

/// Number of chains pooled by the ensemble mode.
pub const ENSEMBLE_CHAINS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Consensus over the T predictions of one chain.
    Single,
    /// Consensus over the 3T predictions of three independent chains.
    Ensemble3,
}

impl SampleMode {
    pub fn chains(self) -> usize {
        match self {
            SampleMode::Single => 1,
            SampleMode::Ensemble3 => ENSEMBLE_CHAINS,
        }
    }
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(SampleMode::Single),
            "ensemble3" => Ok(SampleMode::Ensemble3),
            other => Err(Error::InvalidArgument(format!("unknown sample mode `{other}`"))),
        }
    }
}

/// Denoised estimates in probability space, earliest step (t = T) first.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHistory {
    pub preds: Vec<Array2<f64>>,
}

impl PredictionHistory {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    /// Prediction of the last reverse step.
    pub fn last(&self) -> Option<&Array2<f64>> {
        self.preds.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub mask: Array2<f64>,
    pub per_chain_final: Vec<Array2<f64>>,
}

/// One reverse step: `c_xt·x_t + c_x0·x̂0 + σ_t·z`. `z` must be absent at t = 1.
pub fn ddpm_step(x_t: &Tensor, x0_hat: &Tensor, t: usize, schedule: &NoiseSchedule, z: Option<&Tensor>) -> Result<Tensor> {
    if x_t.dims() != x0_hat.dims() {
        return Err(shape_err(format!("x_t {:?} vs x̂0 {:?}", x_t.dims(), x0_hat.dims())));
    }
    let c = schedule.posterior_coeffs(t)?;
    let mean = ((x_t * c.c_xt)? + (x0_hat * c.c_x0)?)?;
    match z {
        None => Ok(mean),
        Some(_) if t == 1 => Err(Error::InvalidArgument("the final reverse step takes no noise".into())),
        Some(z) => {
            if z.dims() != x_t.dims() {
                return Err(shape_err(format!("noise {:?} vs x_t {:?}", z.dims(), x_t.dims())));
            }
            Ok((mean + (z * c.sigma)?)?)
        }
    }
}

fn to_probability_maps(x0_hat: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, _, h, w) = x0_hat.dims4()?;
    let values = x0_hat.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(values
        .chunks(h * w)
        .take(b)
        .map(|plane| Array2::from_shape_fn((h, w), |(i, j)| ((plane[i * w + j] + 1.0) / 2.0).clamp(0.0, 1.0)))
        .collect())
}

/// Runs one reverse chain per batch item. Item `i` draws all of its noise
/// from `seeds[i]`, so a chain does not depend on what it is batched with.
pub fn sample_chains<D: Denoiser + ?Sized>(model: &D, images: &Tensor, schedule: &NoiseSchedule, seeds: &[u64]) -> Result<Vec<PredictionHistory>> {
    Ok(run_chains(model, images, schedule, seeds)?.0)
}

/// [`sample_chains`] that also returns the final state `x_0`, `(B, 1, H, W)`.
pub fn run_chains<D: Denoiser + ?Sized>(model: &D, images: &Tensor, schedule: &NoiseSchedule, seeds: &[u64]) -> Result<(Vec<PredictionHistory>, Tensor)> {
    let (b, _, h, w) = images.dims4()?;
    if seeds.len() != b {
        return Err(shape_err(format!("{} seeds for {b} images", seeds.len())));
    }
    let device = images.device();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng_from(s)).collect();
    let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Result<Tensor> {
        let parts = rngs
            .iter_mut()
            .map(|r| randn(r, &[1, 1, h, w], device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let mut x = draw(&mut rngs)?;
    let mut histories = vec![PredictionHistory { preds: Vec::with_capacity(schedule.num_steps()) }; b];
    for t in (1..=schedule.num_steps()).rev() {
        let x0_hat = model.predict_x0(&x, images, t, schedule)?.clamp(-1f32, 1f32)?;
        for (history, map) in histories.iter_mut().zip(to_probability_maps(&x0_hat)?) {
            history.preds.push(map);
        }
        let z = if t > 1 { Some(draw(&mut rngs)?) } else { None };
        x = ddpm_step(&x, &x0_hat, t, schedule, z.as_ref())?;
    }
    Ok((histories, x))
}

/// Single-image chain; `image` is `(1, 3, H, W)`.
pub fn sample_chain<D: Denoiser + ?Sized>(image: &Tensor, model: &D, schedule: &NoiseSchedule, seed: u64) -> Result<PredictionHistory> {
    if image.dim(0)? != 1 {
        return Err(shape_err("sample_chain expects a single image"));
    }
    Ok(sample_chains(model, image, schedule, &[seed])?.remove(0))
}

/// Binarizes at `τ = min(2·mean(P), 1 − ε)`; an all-zero map stays all-zero.
pub fn adaptive_threshold(p: &Array2<f64>) -> Array2<bool> {
    let mean = p.mean().unwrap_or(0.0);
    if mean <= 0.0 {
        return Array2::from_elem(p.dim(), false);
    }
    let tau = (2.0 * mean).min(1.0 - THRESHOLD_EPS);
    p.mapv(|v| v >= tau)
}

/// `floor(k / n + 1/2)` evaluated exactly: true iff `k ≥ n / 2`.
pub fn majority_vote(k: usize, n: usize) -> bool {
    2 * k >= n
}

/// Consensus over already-binarized predictions: the vote mask times the
/// pixelwise mean probability.
pub fn consensus(binaries: &[Array2<bool>], probs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("consensus needs at least one prediction".into()));
    }
    if binaries.len() != n {
        return Err(shape_err(format!("{} binary maps for {n} predictions", binaries.len())));
    }
    let dim = probs[0].dim();
    if probs.iter().any(|p| p.dim() != dim) || binaries.iter().any(|b| b.dim() != dim) {
        return Err(shape_err("predictions differ in size"));
    }
    let mut votes = Array2::<usize>::zeros(dim);
    let mut sum = Array2::<f64>::zeros(dim);
    for (b, p) in binaries.iter().zip(probs) {
        Zip::from(&mut votes).and(b).for_each(|v, &on| *v += usize::from(on));
        sum += p;
    }
    let mut out = Array2::<f64>::zeros(dim);
    Zip::from(&mut out).and(&votes).and(&sum).for_each(|o, &k, &s| {
        if majority_vote(k, n) {
            *o = s / n as f64;
        }
    });
    Ok(out)
}

/// Consensus time ensemble over every prediction of every history.
pub fn cte(histories: &[PredictionHistory]) -> Result<EnsembleResult> {
    let probs: Vec<Array2<f64>> = histories.iter().flat_map(|h| h.preds.iter().cloned()).collect();
    if probs.is_empty() {
        return Err(Error::InvalidArgument("consensus needs at least one prediction".into()));
    }
    let binaries: Vec<Array2<bool>> = probs.iter().map(adaptive_threshold).collect();
    let mask = consensus(&binaries, &probs)?;
    let per_chain_final = histories.iter().filter_map(|h| h.last().cloned()).collect();
    Ok(EnsembleResult { mask, per_chain_final })
}

/// Sub-seed of chain `chain` for a prediction seeded with `seed`.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    mix_index(seed, chain as u64)
}

/// Predictions for a batch of images; image `i` uses `seeds[i]`.
pub fn predict_batch<D: Denoiser + ?Sized>(
    images: &Tensor,
    model: &D,
    schedule: &NoiseSchedule,
    mode: SampleMode,
    seeds: &[u64],
) -> Result<Vec<(EnsembleResult, Vec<PredictionHistory>)>> {
    let b = images.dim(0)?;
    let mut per_image: Vec<Vec<PredictionHistory>> = vec![Vec::new(); b];
    for chain in 0..mode.chains() {
        let chain_seeds: Vec<u64> = seeds.iter().map(|&s| chain_seed(s, chain)).collect();
        for (slot, history) in per_image.iter_mut().zip(sample_chains(model, images, schedule, &chain_seeds)?) {
            slot.push(history);
        }
    }
    per_image
        .into_iter()
        .map(|histories| Ok((cte(&histories)?, histories)))
        .collect()
}

/// Single-image prediction; `image` is `(1, 3, H, W)`.
pub fn predict<D: Denoiser + ?Sized>(image: &Tensor, model: &D, schedule: &NoiseSchedule, mode: SampleMode, seed: u64) -> Result<EnsembleResult> {
    if image.dim(0)? != 1 {
        return Err(shape_err("predict expects a single image"));
    }
    Ok(predict_batch(image, model, schedule, mode, &[seed])?.remove(0).0)
}
