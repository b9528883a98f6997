//! Procedural camouflage scenes: a fractal value-noise background with a
//! foreground shape filled by the same texture family at slightly different
//! scale, contrast and tint.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetSample;
use crate::error::{Error, Result};
use crate::rng::{mix_index, mix_seed, rng_from};

const MIN_AREA: f64 = 0.05;
const MAX_AREA: f64 = 0.60;
const MAX_SHAPE_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Blob,
    Ring,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub size: usize,
    pub seed: u64,
    pub texture_octaves: usize,
    pub shape: ShapeKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 8,
            size: 64,
            seed: 0,
            texture_octaves: 4,
            shape: ShapeKind::Blob,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.n_images < 1 {
            errors.push("data.synthetic.n_images must be >= 1".into());
        }
        if self.size < 32 {
            errors.push(format!("data.synthetic.size must be >= 32, got {}", self.size));
        }
        if self.texture_octaves < 1 {
            errors.push("data.synthetic.texture_octaves must be >= 1".into());
        }
    }
}

/// Smooth random field in roughly `[0, 1]`: octaves of bilinear value noise
/// with smoothstep interpolation, halving amplitude per octave.
fn fbm(rng: &mut ChaCha8Rng, size: usize, base_cells: usize, octaves: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((size, size));
    let mut amp = 1.0;
    let mut total = 0.0;
    for o in 0..octaves {
        let cells = base_cells << o;
        let lattice = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random::<f64>());
        let scale = cells as f64 / size as f64;
        for ((i, j), v) in out.indexed_iter_mut() {
            let y = (i as f64 + 0.5) * scale;
            let x = (j as f64 + 0.5) * scale;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (fy, fx) = (smooth(y - y0 as f64), smooth(x - x0 as f64));
            let top = lattice[[y0, x0]] * (1.0 - fx) + lattice[[y0, x0 + 1]] * fx;
            let bottom = lattice[[y0 + 1, x0]] * (1.0 - fx) + lattice[[y0 + 1, x0 + 1]] * fx;
            *v += amp * (top * (1.0 - fy) + bottom * fy);
        }
        total += amp;
        amp *= 0.5;
    }
    out.mapv_inplace(|v| v / total);
    out
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    /// (amplitude, phase) of harmonics 2, 3, 4.
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn draw(rng: &mut ChaCha8Rng, size: f64, radius: (f64, f64)) -> Self {
        let mut harmonics = [(0.0, 0.0); 3];
        for (k, h) in harmonics.iter_mut().enumerate() {
            *h = (rng.random_range(0.0..0.3) / (k as f64 + 1.0), rng.random_range(0.0..2.0 * PI));
        }
        Blob {
            cy: size * rng.random_range(0.3..0.7),
            cx: size * rng.random_range(0.3..0.7),
            radius: size * rng.random_range(radius.0..radius.1),
            harmonics,
        }
    }

    fn boundary(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, phi))| a * ((k as f64 + 2.0) * theta + phi).sin())
            .sum();
        self.radius * (1.0 + wobble)
    }

    fn polar(&self, i: usize, j: usize) -> (f64, f64) {
        let dy = i as f64 + 0.5 - self.cy;
        let dx = j as f64 + 0.5 - self.cx;
        ((dy * dy + dx * dx).sqrt(), dy.atan2(dx))
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        let (r, theta) = self.polar(i, j);
        r <= self.boundary(theta)
    }
}

fn draw_mask(rng: &mut ChaCha8Rng, size: usize, shape: ShapeKind) -> Array2<bool> {
    let s = size as f64;
    match shape {
        ShapeKind::Blob => {
            let b = Blob::draw(rng, s, (0.18, 0.3));
            Array2::from_shape_fn((size, size), |(i, j)| b.contains(i, j))
        }
        ShapeKind::Ring => {
            let b = Blob::draw(rng, s, (0.25, 0.35));
            let inner = rng.random_range(0.4..0.6);
            Array2::from_shape_fn((size, size), |(i, j)| {
                let (r, theta) = b.polar(i, j);
                let edge = b.boundary(theta);
                r <= edge && r >= inner * edge
            })
        }
        ShapeKind::Multi => {
            let count = rng.random_range(2..=3);
            let blobs: Vec<Blob> = (0..count).map(|_| Blob::draw(rng, s, (0.1, 0.17))).collect();
            // Spread the centres over the whole frame.
            let blobs: Vec<Blob> = blobs
                .into_iter()
                .map(|mut b| {
                    b.cy = s * rng.random_range(0.2..0.8);
                    b.cx = s * rng.random_range(0.2..0.8);
                    b
                })
                .collect();
            Array2::from_shape_fn((size, size), |(i, j)| blobs.iter().any(|b| b.contains(i, j)))
        }
    }
}

fn area(mask: &Array2<bool>) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// A mask with foreground area in `[5%, 60%]`; falls back to a centred disk.
fn valid_mask(rng: &mut ChaCha8Rng, size: usize, shape: ShapeKind) -> Array2<bool> {
    for _ in 0..MAX_SHAPE_TRIES {
        let m = draw_mask(rng, size, shape);
        if (MIN_AREA..=MAX_AREA).contains(&area(&m)) {
            return m;
        }
    }
    let c = size as f64 / 2.0;
    let r = size as f64 * 0.25;
    Array2::from_shape_fn((size, size), |(i, j)| (i as f64 + 0.5 - c).powi(2) + (j as f64 + 0.5 - c).powi(2) <= r * r)
}

fn make_one(cfg: &SynthConfig, index: usize) -> DatasetSample {
    let mut rng = rng_from(mix_index(mix_seed(cfg.seed, "synthetic"), index as u64));
    let size = cfg.size;
    let mask = valid_mask(&mut rng, size, cfg.shape);

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let contrast = rng.random_range(0.5..0.8);
    let fg_contrast = contrast * rng.random_range(0.85..1.15);
    let bg_cells = rng.random_range(2..=4);
    let fg_cells = bg_cells * 2;

    let bg = fbm(&mut rng, size, bg_cells, cfg.texture_octaves);
    let fg = fbm(&mut rng, size, fg_cells, cfg.texture_octaves);
    let image = Array3::from_shape_fn((3, size, size), |(c, i, j)| {
        let v = if mask[[i, j]] {
            base[c] + offset[c] + fg_contrast * tint[c] * (fg[[i, j]] - 0.5)
        } else {
            base[c] + contrast * tint[c] * (bg[[i, j]] - 0.5)
        };
        v.clamp(0.0, 1.0) as f32
    });
    DatasetSample {
        id: format!("synth_{index:04}"),
        image,
        mask: mask.mapv(|m| if m { 1.0 } else { -1.0 }),
    }
}

/// Generates `cfg.n_images` scenes; item `i` depends only on `(seed, i)`.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<Vec<DatasetSample>> {
    let mut errors = Vec::new();
    cfg.validate(&mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    Ok((0..cfg.n_images).map(|i| make_one(cfg, i)).collect())
}
