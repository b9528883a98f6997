//! Image/mask pairs: folder datasets, the synthetic camouflage generator,
//! resizing and batch assembly.

mod loader;
mod synth;

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

pub use loader::{image_files, load_dataset, read_rgb, write_dataset, DatasetIter};
pub use synth::{make_synthetic, ShapeKind, SynthConfig};

use crate::error::{shape_err, Result};
use crate::nn::layers::bilinear_matrix;

/// One image with its ±1 mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub id: String,
    /// `(3, H, W)` RGB in `[0, 1]`.
    pub image: Array3<f32>,
    /// `(H, W)` with values in `{-1, +1}`.
    pub mask: Array2<f32>,
}

impl DatasetSample {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    /// Square resize: bilinear for the image, nearest for the mask.
    pub fn resized(&self, size: usize) -> DatasetSample {
        DatasetSample {
            id: self.id.clone(),
            image: resize_image(&self.image, size, size),
            mask: resize_nearest(&self.mask, size, size),
        }
    }

    /// Fraction of foreground pixels.
    pub fn mask_area(&self) -> f64 {
        self.mask.iter().filter(|&&v| v > 0.0).count() as f64 / self.mask.len() as f64
    }
}

/// Per-channel `(x − mean) / std` applied when images enter the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            errors.push(format!("data.normalization.std must be positive, got {:?}", self.std));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            errors.push(format!("data.normalization.mean must be finite, got {:?}", self.mean));
        }
    }
}

/// Bilinear resize (half-pixel centres) of a `(C, H, W)` image.
pub fn resize_image(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let rh = Array2::from_shape_vec((out_h, h), bilinear_matrix(h, out_h)).expect("matrix shape");
    let rw = Array2::from_shape_vec((out_w, w), bilinear_matrix(w, out_w)).expect("matrix shape");
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for (ch, mut dst) in out.axis_iter_mut(Axis(0)).enumerate() {
        let plane = image.index_axis(Axis(0), ch).mapv(f64::from);
        let resized = rh.dot(&plane).dot(&rw.t());
        dst.assign(&resized.mapv(|v| v as f32));
    }
    out
}

/// Nearest-neighbour resize sampling source pixel `floor((i + ½)·in/out)`.
pub fn resize_nearest(map: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    let src = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| map[[src(i, h, out_h), src(j, w, out_w)]])
}

/// Maps a `[0, 1]` mask to ±1 with threshold 0.5 (inclusive).
pub fn binarize_mask(map: &Array2<f32>) -> Array2<f32> {
    map.mapv(|v| if v >= 0.5 { 1.0 } else { -1.0 })
}

/// Normalized `(B, 3, H, W)` image batch; `flips[i]` mirrors item `i` horizontally.
pub fn image_batch(samples: &[&DatasetSample], flips: &[bool], norm: &Normalization, device: &Device) -> Result<Tensor> {
    let (h, w) = check_batch(samples, flips)?;
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for (s, &flip) in samples.iter().zip(flips) {
        for c in 0..3 {
            let (m, sd) = (norm.mean[c], norm.std[c]);
            for i in 0..h {
                for j in 0..w {
                    let jj = if flip { w - 1 - j } else { j };
                    data.push(((f64::from(s.image[[c, i, jj]]) - m) / sd) as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), device)?)
}

/// Mask planes after the same flips as [`image_batch`].
pub fn mask_planes(samples: &[&DatasetSample], flips: &[bool]) -> Result<Vec<Array2<f32>>> {
    check_batch(samples, flips)?;
    Ok(samples
        .iter()
        .zip(flips)
        .map(|(s, &flip)| {
            if flip {
                let mut m = s.mask.clone();
                m.invert_axis(Axis(1));
                m.as_standard_layout().to_owned()
            } else {
                s.mask.clone()
            }
        })
        .collect())
}

/// Stacks `(H, W)` planes into a `(B, 1, H, W)` tensor.
pub fn stack_planes(planes: &[Array2<f32>], device: &Device) -> Result<Tensor> {
    let Some(first) = planes.first() else {
        return Err(shape_err("empty batch"));
    };
    let (h, w) = first.dim();
    if planes.iter().any(|p| p.dim() != (h, w)) {
        return Err(shape_err("mask planes differ in size"));
    }
    let data: Vec<f32> = planes.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (planes.len(), 1, h, w), device)?)
}

fn check_batch(samples: &[&DatasetSample], flips: &[bool]) -> Result<(usize, usize)> {
    let Some(first) = samples.first() else {
        return Err(shape_err("empty batch"));
    };
    if flips.len() != samples.len() {
        return Err(shape_err(format!("{} flip flags for {} samples", flips.len(), samples.len())));
    }
    let (h, w) = (first.height(), first.width());
    for s in samples {
        if s.image.dim() != (3, h, w) || s.mask.dim() != (h, w) {
            return Err(shape_err(format!("sample `{}` is not 3×{h}×{w}", s.id)));
        }
    }
    Ok((h, w))
}
