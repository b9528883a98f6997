//! 2-D convolution as a fused custom op: each batch item is unfolded
//! (im2col) into a reused buffer and multiplied by the kernel matrix. The
//! backward pass uses the same unfold for the weight gradient and the
//! matching fold (col2im) for the input gradient.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

trait Elem: Copy + Default + AddAssign + Send + Sync + 'static {
    const ONE: Self;
}

impl Elem for f32 {
    const ONE: Self = 1.0;
}

impl Elem for f64 {
    const ONE: Self = 1.0;
}

/// Row-major `dst (m×n) (+)= op(lhs) · op(rhs)` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(m: usize, n: usize, k: usize, dst: &mut [T], accumulate: bool, lhs: &[T], lhs_t: bool, rhs: &[T], rhs_t: bool) {
    assert!(dst.len() >= m * n && lhs.len() >= m * k && rhs.len() >= k * n);
    // (row stride, column stride) of each operand as seen by the product.
    let (lhs_rs, lhs_cs) = if lhs_t { (1, m as isize) } else { (k as isize, 1) };
    let (rhs_rs, rhs_cs) = if rhs_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices were checked above to cover every index reached
    // through these strides, and `dst` does not alias the inputs.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.as_ptr(),
            rhs_cs,
            rhs_rs,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Output positions `o` along one axis whose input index `o·s + k_off − p` lies in `0..n`.
fn valid_range(n: usize, out: usize, k_off: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k_off).div_ceil(s);
    // Largest o with o·s + k_off ≤ n − 1 + p.
    let hi = if n + p > k_off { ((n - 1 + p - k_off) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// `(C, H, W)` to `(C·k·k, Ho·Wo)`. Only in-image positions are written, so
/// padding entries keep whatever `dst` held (zeros when reused for one geometry).
fn unfold_into<T: Elem>(src: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = ho * wo;
    let (h, w, k, s, p) = (g.height, g.width, g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = valid_range(h, ho, ky, s, p);
            for kx in 0..k {
                let (x0, x1) = valid_range(w, wo, kx, s, p);
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut dst[row * cols..(row + 1) * cols];
                let ix0 = x0 * s + kx - p;
                for oy in y0..y1 {
                    let iy = oy * s + ky - p;
                    let src_row = &plane[iy * w..(iy + 1) * w];
                    let d = &mut dst_row[oy * wo + x0..oy * wo + x1];
                    if s == 1 {
                        d.copy_from_slice(&src_row[ix0..ix0 + d.len()]);
                    } else {
                        for (d, v) in d.iter_mut().zip(src_row[ix0..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`unfold_into`]: adds `(C·k·k, Ho·Wo)` columns into `(C, H, W)`.
fn fold_into<T: Elem>(src: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = ho * wo;
    let (h, w, k, s, p) = (g.height, g.width, g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = valid_range(h, ho, ky, s, p);
            for kx in 0..k {
                let (x0, x1) = valid_range(w, wo, kx, s, p);
                let row = (c * k + ky) * k + kx;
                let src_row = &src[row * cols..(row + 1) * cols];
                let ix0 = x0 * s + kx - p;
                for oy in y0..y1 {
                    let iy = oy * s + ky - p;
                    let dst_row = &mut plane[iy * w..(iy + 1) * w];
                    let col = &src_row[oy * wo + x0..oy * wo + x1];
                    for (d, v) in dst_row[ix0..].iter_mut().step_by(s).zip(col) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

fn forward<T: Elem>(x: &[T], w: &[T], bias: &[T], g: &ConvGeometry, batch: usize, out_ch: usize) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.out_len());
    let mut buf = vec![T::default(); rows * cols];
    let mut out = vec![T::default(); batch * out_ch * cols];
    for (b, item) in out.chunks_mut(out_ch * cols).enumerate() {
        for (plane, &bv) in item.chunks_mut(cols).zip(bias) {
            plane.fill(bv);
        }
        unfold_into(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut buf);
        matmul(out_ch, cols, rows, item, true, w, false, &buf, false);
    }
    out
}

/// Row-major transpose of an `r × c` matrix.
fn transpose<T: Elem>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Bias gradient: per-channel sum of `gy` over batch and space.
fn grad_bias<T: Elem>(gy: &[T], out_ch: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); out_ch];
    for item in gy.chunks(out_ch * cols) {
        for (o, plane) in out.iter_mut().zip(item.chunks(cols)) {
            for &v in plane {
                *o += v;
            }
        }
    }
    out
}

fn grad_input<T: Elem>(gy: &[T], w: &[T], g: &ConvGeometry, batch: usize, out_ch: usize) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.out_len());
    let mut buf = vec![T::default(); rows * cols];
    let mut out = vec![T::default(); batch * g.in_len()];
    let wt = transpose(w, out_ch, rows);
    for b in 0..batch {
        matmul(rows, cols, out_ch, &mut buf, false, &wt, false, &gy[b * out_ch * cols..(b + 1) * out_ch * cols], false);
        fold_into(&buf, g, &mut out[b * g.in_len()..(b + 1) * g.in_len()]);
    }
    out
}

fn grad_weight<T: Elem>(x: &[T], gy: &[T], g: &ConvGeometry, batch: usize, out_ch: usize) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.out_len());
    let mut buf = vec![T::default(); rows * cols];
    let mut out = vec![T::default(); out_ch * rows];
    for b in 0..batch {
        unfold_into(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut buf);
        matmul(out_ch, rows, cols, &mut out, b > 0, &gy[b * out_ch * cols..(b + 1) * out_ch * cols], false, &buf, true);
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d requires contiguous operands"),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    geom: ConvGeometry,
    batch: usize,
    out_ch: usize,
}

impl ConvSpec {
    fn input_shape(&self) -> Shape {
        Shape::from((self.batch, self.geom.channels, self.geom.height, self.geom.width))
    }

    fn output_shape(&self) -> Shape {
        Shape::from((self.batch, self.out_ch, self.geom.out_height(), self.geom.out_width()))
    }

    fn weight_shape(&self) -> Shape {
        Shape::from((self.out_ch, self.geom.channels, self.geom.kernel, self.geom.kernel))
    }
}

/// Applies `f` to two same-typed contiguous storages.
fn dispatch2(
    name: &str,
    a: (&CpuStorage, &Layout),
    b: (&CpuStorage, &Layout),
    f32_fn: impl FnOnce(&[f32], &[f32]) -> Vec<f32>,
    f64_fn: impl FnOnce(&[f64], &[f64]) -> Vec<f64>,
) -> candle_core::Result<CpuStorage> {
    match (a.0, b.0) {
        (CpuStorage::F32(x), CpuStorage::F32(y)) => Ok(CpuStorage::F32(f32_fn(contiguous(x, a.1)?, contiguous(y, b.1)?))),
        (CpuStorage::F64(x), CpuStorage::F64(y)) => Ok(CpuStorage::F64(f64_fn(contiguous(x, a.1)?, contiguous(y, b.1)?))),
        _ => candle_core::bail!("{name} supports matching f32 or f64 operands only"),
    }
}

/// `(x, w, bias) → y`.
struct Conv(ConvSpec);

/// `(gy, w) → gx`.
struct ConvGradInput(ConvSpec);

/// `(x, gy) → gw`.
struct ConvGradWeight(ConvSpec);

/// `gy → gbias`.
struct ConvGradBias(ConvSpec);

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
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
        let c = self.0;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(forward(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
                &c.geom,
                c.batch,
                c.out_ch,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(forward(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
                &c.geom,
                c.batch,
                c.out_ch,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands only"),
        };
        Ok((out, c.output_shape()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        gy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let gy = gy.contiguous()?;
        let gx = gy.apply_op2_no_bwd(w, &ConvGradInput(self.0))?;
        let gw = x.apply_op2_no_bwd(&gy, &ConvGradWeight(self.0))?;
        let gb = gy.apply_op1_no_bwd(&ConvGradBias(self.0))?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

impl CustomOp1 for ConvGradBias {
    fn name(&self) -> &'static str {
        "conv2d-grad-bias"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = self.0;
        let cols = c.geom.out_len();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(grad_bias(contiguous(v, layout)?, c.out_ch, cols)),
            CpuStorage::F64(v) => CpuStorage::F64(grad_bias(contiguous(v, layout)?, c.out_ch, cols)),
            _ => candle_core::bail!("conv2d supports f32 and f64 only"),
        };
        Ok((out, Shape::from(c.out_ch)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = self.0;
        let out = dispatch2(
            self.name(),
            (s1, l1),
            (s2, l2),
            |gy, w| grad_input(gy, w, &c.geom, c.batch, c.out_ch),
            |gy, w| grad_input(gy, w, &c.geom, c.batch, c.out_ch),
        )?;
        Ok((out, c.input_shape()))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = self.0;
        let out = dispatch2(
            self.name(),
            (s1, l1),
            (s2, l2),
            |x, gy| grad_weight(x, gy, &c.geom, c.batch, c.out_ch),
            |x, gy| grad_weight(x, gy, &c.geom, c.batch, c.out_ch),
        )?;
        Ok((out, c.weight_shape()))
    }
}

/// Convolution of `x: (B, C, H, W)` with `weight: (O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_ch, in_ch, kh, kw) = weight.dims4()?;
    if in_ch != channels || kh != kw {
        return Err(shape_err(format!(
            "conv2d: input {:?} incompatible with weight {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    if height + 2 * padding < kh || width + 2 * padding < kw || stride == 0 {
        return Err(shape_err(format!(
            "conv2d: kernel {kh} stride {stride} padding {padding} does not fit input {height}x{width}"
        )));
    }
    let spec = ConvSpec {
        geom: ConvGeometry {
            channels,
            height,
            width,
            kernel: kh,
            stride,
            padding,
        },
        batch,
        out_ch,
    };
    let bias = match bias {
        Some(b) if b.dims() == [out_ch] => b.contiguous()?,
        Some(b) => return Err(shape_err(format!("conv2d: bias {:?} for {out_ch} output channels", b.dims()))),
        None => Tensor::zeros(out_ch, weight.dtype(), weight.device())?,
    };
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias, Conv(spec))?)
}
