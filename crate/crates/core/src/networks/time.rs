use candle_core::{Device, Tensor};

use crate::error::Result;
use crate::nn::{Linear, Scope};

/// Sinusoidal features of continuous times in (0, 1), shape `(B, dim)`.
pub fn sinusoidal_features(times: &[f64], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(times.len() * dim);
    for &s in times {
        let arg = 1000.0 * s;
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((arg * f).sin(), (arg * f).cos())).unzip();
        data.extend(sin.iter().map(|&v| v as f32));
        data.extend(cos.iter().map(|&v| v as f32));
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (times.len(), dim), device)?)
}

/// Shared time embedding: sinusoidal features through a two-layer perceptron.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: Linear::new(&scope.pp("fc1"), dim, dim)?,
            fc2: Linear::new(&scope.pp("fc2"), dim, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, times: &[f64], device: &Device) -> Result<Tensor> {
        let x = sinusoidal_features(times, self.dim, device)?;
        self.fc2.forward(&self.fc1.forward(&x)?.silu()?)
    }
}
