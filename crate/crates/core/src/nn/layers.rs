use candle_core::{DType, Device, Tensor, D};

use super::conv::conv2d;
use super::params::{Init, Scope};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.var("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: scope.var("bias", &[out_dim], Init::Uniform(bound))?,
        })
    }

    /// Applies to the last dimension of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            3 => x.broadcast_matmul(&w)?,
            r => return Err(shape_err(format!("linear: unsupported rank {r}"))),
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(scope: &Scope, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self::with_init(scope, in_ch, out_ch, kernel, stride, padding, Init::Uniform(bound))
    }

    /// Weight and bias both start at zero.
    pub fn zeros(scope: &Scope, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::with_init(scope, in_ch, out_ch, kernel, stride, padding, Init::Const(0.0))
    }

    fn with_init(scope: &Scope, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: scope.var("weight", &[out_ch, in_ch, kernel, kernel], init)?,
            bias: scope.var("bias", &[out_ch], init)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.var("gamma", &[dim], Init::Const(1.0))?,
            beta: scope.var("beta", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Group normalization without affine parameters for `(B, C, H, W)`.
pub fn group_norm(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(shape_err(format!("group_norm: {c} channels not divisible into {groups} groups")));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-stochastic bilinear interpolation matrix `(out, in)` using half-pixel
/// centers (corners not aligned).
pub fn bilinear_matrix(in_size: usize, out_size: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_size * in_size];
    let scale = in_size as f64 / out_size as f64;
    for o in 0..out_size {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_size - 1);
        let i1 = (i0 + 1).min(in_size - 1);
        let lambda = src - i0 as f64;
        m[o * in_size + i0] += 1.0 - lambda;
        m[o * in_size + i1] += lambda;
    }
    m
}

fn matrix_tensor(in_size: usize, out_size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_matrix(in_size, out_size), (out_size, in_size), device)?.to_dtype(dtype)?)
}

/// Differentiable bilinear resize of `(B, C, H, W)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let rw = matrix_tensor(w, out_w, x.dtype(), x.device())?;
    let rh = matrix_tensor(h, out_h, x.dtype(), x.device())?;
    let y = x.broadcast_matmul(&rw.t()?)?;
    let y = rh.broadcast_matmul(&y)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(2, 16), (16, 16), (5, 3), (4, 16), (1, 4)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_of_constant_is_constant() -> Result<()> {
        let x = Tensor::full(0.37f32, (2, 3, 2, 2), &Device::Cpu)?;
        let y = resize_bilinear(&x, 16, 16)?;
        assert_eq!(y.dims(), &[2, 3, 16, 16]);
        for v in y.flatten_all()?.to_vec1::<f32>()? {
            assert!((v - 0.37).abs() < 1e-6);
        }
        Ok(())
    }

    #[test]
    fn upsample_matches_half_pixel_convention() -> Result<()> {
        // [0, 1] upsampled 2x with half-pixel centers: [0, 0.25, 0.75, 1].
        let x = Tensor::new(&[[[[0f64, 1.0]]]], &Device::Cpu)?;
        let y = resize_bilinear(&x, 1, 4)?.flatten_all()?.to_vec1::<f64>()?;
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        Ok(())
    }
}
