//! Fused `silu(group_norm(x)·(1 + scale) + shift)` with a hand-written
//! backward pass, replacing a chain of broadcast ops that dominate the
//! denoiser's runtime on CPU.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor};

use crate::error::{shape_err, Result};

const GN_EPS: f64 = 1e-5;

trait Real: Copy + Send + Sync + 'static {
    fn f64(self) -> f64;
    fn from(v: f64) -> Self;
}

impl Real for f32 {
    fn f64(self) -> f64 {
        self as f64
    }
    fn from(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn f64(self) -> f64 {
        self
    }
    fn from(v: f64) -> Self {
        v
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
}

impl Dims {
    fn group_len(&self) -> usize {
        self.channels / self.groups * self.spatial
    }
}

/// Mean and inverse standard deviation of one group.
fn stats<T: Real>(x: &[T]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + GN_EPS).sqrt())
}

fn forward<T: Real>(x: &[T], scale: &[T], shift: &[T], d: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let cpg = d.channels / d.groups;
    for (bg, chunk) in x.chunks(d.group_len()).enumerate() {
        let (mean, inv) = stats(chunk);
        let (b, g) = (bg / d.groups, bg % d.groups);
        for (ci, plane) in chunk.chunks(d.spatial).enumerate() {
            let c = g * cpg + ci;
            let s = 1.0 + scale[b * d.channels + c].f64();
            let t = shift[b * d.channels + c].f64();
            out.extend(plane.iter().map(|v| {
                let u = (v.f64() - mean) * inv * s + t;
                T::from(u * sigmoid(u))
            }));
        }
    }
    out
}

/// Gradients packed as `[dx (B·C·HW), dscale (B·C), dshift (B·C)]`.
fn backward<T: Real>(x: &[T], scale: &[T], shift: &[T], dy: &[T], d: Dims) -> Vec<T> {
    let bc = d.batch * d.channels;
    let mut dx = vec![T::from(0.0); x.len()];
    let mut dscale = vec![0f64; bc];
    let mut dshift = vec![0f64; bc];
    let cpg = d.channels / d.groups;
    let gl = d.group_len();
    let mut dxhat = vec![0f64; gl];
    let mut xhat = vec![0f64; gl];
    for (bg, chunk) in x.chunks(gl).enumerate() {
        let (mean, inv) = stats(chunk);
        let (b, g) = (bg / d.groups, bg % d.groups);
        let dy_chunk = &dy[bg * gl..(bg + 1) * gl];
        for ci in 0..cpg {
            let c = b * d.channels + g * cpg + ci;
            let s = 1.0 + scale[c].f64();
            let t = shift[c].f64();
            for k in ci * d.spatial..(ci + 1) * d.spatial {
                let xh = (chunk[k].f64() - mean) * inv;
                let u = xh * s + t;
                let sg = sigmoid(u);
                let du = dy_chunk[k].f64() * sg * (1.0 + u * (1.0 - sg));
                dscale[c] += du * xh;
                dshift[c] += du;
                xhat[k] = xh;
                dxhat[k] = du * s;
            }
        }
        let n = gl as f64;
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for (k, out) in dx[bg * gl..(bg + 1) * gl].iter_mut().enumerate() {
            *out = T::from(inv * (dxhat[k] - mean_d - xhat[k] * mean_dx));
        }
    }
    dx.extend(dscale.into_iter().map(T::from));
    dx.extend(dshift.into_iter().map(T::from));
    dx
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("fused group norm requires contiguous operands"),
    }
}

struct AdaGroupNormSilu(Dims);

impl CustomOp3 for AdaGroupNormSilu {
    fn name(&self) -> &'static str {
        "ada-group-norm-silu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(forward(slice(x, l1)?, slice(a, l2)?, slice(b, l3)?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(forward(slice(x, l1)?, slice(a, l2)?, slice(b, l3)?, d))
            }
            _ => candle_core::bail!("ada-group-norm-silu supports matching f32 or f64 operands only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = self.0;
        let packed = Tensor::cat(&[x.flatten_all()?, scale.flatten_all()?, shift.flatten_all()?, dy.contiguous()?.flatten_all()?], 0)?
            .apply_op1_no_bwd(&AdaGroupNormSiluGrad(d))?;
        let n = x.elem_count();
        let bc = d.batch * d.channels;
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let ds = packed.narrow(0, n, bc)?.reshape(scale.shape())?;
        let db = packed.narrow(0, n + bc, bc)?.reshape(shift.shape())?;
        Ok((Some(dx), Some(ds), Some(db)))
    }
}

/// Input `[x, scale, shift, dy]` flattened and concatenated.
struct AdaGroupNormSiluGrad(Dims);

impl CustomOp1 for AdaGroupNormSiluGrad {
    fn name(&self) -> &'static str {
        "ada-group-norm-silu-grad"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let n = d.batch * d.channels * d.spatial;
        let bc = d.batch * d.channels;
        fn split<T: Real>(v: &[T], n: usize, bc: usize, d: Dims) -> Vec<T> {
            let (x, rest) = v.split_at(n);
            let (a, rest) = rest.split_at(bc);
            let (b, dy) = rest.split_at(bc);
            backward(x, a, b, dy, d)
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(split(slice(v, layout)?, n, bc, d)),
            CpuStorage::F64(v) => CpuStorage::F64(split(slice(v, layout)?, n, bc, d)),
            _ => candle_core::bail!("ada-group-norm-silu supports f32 and f64 only"),
        };
        Ok((out, Shape::from(n + 2 * bc)))
    }
}

/// `silu(gn(x)·(1 + scale) + shift)` for `x: (B, C, H, W)` and per-item,
/// per-channel `scale`, `shift: (B, C)`. Group norm has no affine part.
pub fn ada_group_norm_silu(x: &Tensor, scale: &Tensor, shift: &Tensor, groups: usize) -> Result<Tensor> {
    let (batch, channels, h, w) = x.dims4()?;
    if groups == 0 || channels % groups != 0 {
        return Err(shape_err(format!("{channels} channels not divisible into {groups} groups")));
    }
    if scale.dims() != [batch, channels] || shift.dims() != [batch, channels] {
        return Err(shape_err(format!(
            "modulation {:?}/{:?} does not match ({batch}, {channels})",
            scale.dims(),
            shift.dims()
        )));
    }
    let dims = Dims {
        batch,
        channels,
        spatial: h * w,
        groups,
    };
    Ok(x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, AdaGroupNormSilu(dims))?)
}

fn repeat2x<T: Copy>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(4 * x.len());
    for plane in x.chunks(h * w) {
        for row in plane.chunks(w) {
            for _ in 0..2 {
                out.extend(row.iter().flat_map(|&v| [v, v]));
            }
        }
    }
    out
}

fn sum2x2<T: Real>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(x.len() / 4);
    for plane in x.chunks(oh * ow) {
        for i in 0..h {
            let (r0, r1) = (&plane[2 * i * ow..(2 * i + 1) * ow], &plane[(2 * i + 1) * ow..(2 * i + 2) * ow]);
            out.extend((0..w).map(|j| T::from(r0[2 * j].f64() + r0[2 * j + 1].f64() + r1[2 * j].f64() + r1[2 * j + 1].f64())));
        }
    }
    out
}

/// `(B, C, H, W) → (B, C, 2H, 2W)`, nearest neighbour.
struct Upsample2x {
    h: usize,
    w: usize,
}

/// Adjoint of [`Upsample2x`]: sums each 2×2 block.
struct Sum2x2 {
    h: usize,
    w: usize,
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let shape = Shape::from((dims[0], dims[1], 2 * self.h, 2 * self.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(repeat2x(slice(v, layout)?, self.h, self.w)),
            CpuStorage::F64(v) => CpuStorage::F64(repeat2x(slice(v, layout)?, self.h, self.w)),
            _ => candle_core::bail!("upsample2x supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Sum2x2 { h: self.h, w: self.w })?))
    }
}

impl CustomOp1 for Sum2x2 {
    fn name(&self) -> &'static str {
        "sum2x2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let shape = Shape::from((dims[0], dims[1], self.h, self.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(sum2x2(slice(v, layout)?, self.h, self.w)),
            CpuStorage::F64(v) => CpuStorage::F64(sum2x2(slice(v, layout)?, self.h, self.w)),
            _ => candle_core::bail!("sum2x2 supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// Nearest-neighbour 2× upsampling of `(B, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Upsample2x { h, w })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::group_norm;
    use candle_core::{Device, Var};

    fn composite(x: &Tensor, scale: &Tensor, shift: &Tensor, groups: usize) -> Result<Tensor> {
        let h = group_norm(x, groups)?;
        let s = scale.unsqueeze(2)?.unsqueeze(3)?;
        let t = shift.unsqueeze(2)?.unsqueeze(3)?;
        Ok(h.broadcast_mul(&(s + 1.0)?)?.broadcast_add(&t)?.silu()?)
    }

    #[test]
    fn matches_composite_values_and_gradients() -> Result<()> {
        let dev = Device::Cpu;
        let n = 2 * 4 * 3 * 5;
        let x = Var::from_vec((0..n).map(|i| (i as f64 * 0.73).sin() * 2.0).collect::<Vec<_>>(), (2, 4, 3, 5), &dev)?;
        let a = Var::from_vec((0..8).map(|i| (i as f64 * 0.41).cos() * 0.5).collect::<Vec<_>>(), (2, 4), &dev)?;
        let b = Var::from_vec((0..8).map(|i| (i as f64 * 1.3).sin() * 0.3).collect::<Vec<_>>(), (2, 4), &dev)?;
        let weights = Tensor::from_vec((0..n).map(|i| ((i * 7 % 11) as f64) - 5.0).collect::<Vec<_>>(), (2, 4, 3, 5), &dev)?;
        let fused = ada_group_norm_silu(&x, &a, &b, 2)?;
        let reference = composite(&x, &a, &b, 2)?;
        let diff = (&fused - &reference)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-12, "{diff}");
        let g1 = (fused * &weights)?.sum_all()?.backward()?;
        let g2 = (reference * &weights)?.sum_all()?.backward()?;
        for v in [&x, &a, &b] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap())?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(d < 1e-10, "{d}");
        }
        Ok(())
    }

    #[test]
    fn upsample_repeats_pixels() -> Result<()> {
        let x = Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu)?.reshape((1, 1, 2, 2))?;
        let up = upsample2x(&x)?;
        assert_eq!(up.dims(), &[1, 1, 4, 4]);
        let want = x.upsample_nearest2d(4, 4)?.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(up.flatten_all()?.to_vec1::<f32>()?, want);
        Ok(())
    }

    #[test]
    fn upsample_gradient_sums_blocks() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_vec(vec![0.5f64; 6], (1, 1, 2, 3), &dev)?;
        let weights = Tensor::from_vec((0..24).map(|i| i as f64).collect::<Vec<_>>(), (1, 1, 4, 6), &dev)?;
        let grads = (upsample2x(&x)? * weights)?.sum_all()?.backward()?;
        let g = grads.get(&x).unwrap().flatten_all()?.to_vec1::<f64>()?;
        // Block (i, j) covers weights 12i + 2j + {0, 1, 6, 7}.
        let want: Vec<f64> = (0..2).flat_map(|i| (0..3).map(move |j| (4 * (12 * i + 2 * j) + 14) as f64)).collect();
        assert_eq!(g, want);
        Ok(())
    }
}
