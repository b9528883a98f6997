//! Boundary-weighted BCE and IoU losses on probability-space masks.

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2};

use crate::error::{shape_err, Error, Result};

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;
pub const IOU_SMOOTH: f64 = 1.0;
pub const POOL_WINDOW: usize = 31;
pub const BOUNDARY_GAIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub w_bce: f64,
    pub w_iou: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.w_bce.is_finite() && self.w_iou.is_finite()
    }
}

/// Mirror index for 'symmetric' padding (edge sample repeated).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// `1 + 5·|meanpool31(gt) − gt|` with stride 1 and symmetric padding.
pub fn boundary_weights(gt: ArrayView2<f64>) -> Result<Array2<f64>> {
    if let Some(&v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryMask(v));
    }
    let (h, w) = gt.dim();
    let r = (POOL_WINDOW / 2) as isize;
    let area = (POOL_WINDOW * POOL_WINDOW) as f64;
    let mut rows = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            rows[[i, j]] = (-r..=r).map(|d| gt[[i, reflect(j as isize + d, w)]]).sum();
        }
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let pooled: f64 = (-r..=r).map(|d| rows[[reflect(i as isize + d, h), j]]).sum::<f64>() / area;
        1.0 + BOUNDARY_GAIN * (pooled - gt[[i, j]]).abs()
    }))
}

/// Weights for a `(B, 1, H, W)` probability-space GT tensor.
pub fn boundary_weights_tensor(gt: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = gt.dims4()?;
    let values = gt.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(values.len());
    for plane in values.chunks(h * w) {
        let view = ArrayView2::from_shape((h, w), plane).expect("plane shape");
        out.extend(boundary_weights(view)?.iter().copied());
    }
    Ok(Tensor::from_vec(out, (b, c, h, w), gt.device())?.to_dtype(gt.dtype())?)
}

fn check_shapes(pred: &Tensor, gt: &Tensor, w: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() || pred.dims() != w.dims() {
        return Err(shape_err(format!(
            "pred {:?}, gt {:?}, weights {:?}",
            pred.dims(),
            gt.dims(),
            w.dims()
        )));
    }
    if pred.rank() < 2 {
        return Err(shape_err("loss inputs need a leading batch dimension"));
    }
    Ok(())
}

/// Per-item sum over every non-leading dimension.
fn item_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(1)?)
}

/// `Σ w·BCE(p, g) / Σ w` per batch item, averaged over the batch.
pub fn weighted_bce(pred: &Tensor, gt: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_shapes(pred, gt, w)?;
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_g = gt.affine(-1.0, 1.0)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let bce = ((gt * p.log()?)? + (one_minus_g * one_minus_p.log()?)?)?.neg()?;
    let per_item = (item_sum(&(w * bce)?)? / item_sum(w)?)?;
    Ok(per_item.mean_all()?)
}

/// `1 − (Σ w·p·g + s) / (Σ w·(p + g − p·g) + s)` per item, averaged.
pub fn weighted_iou(pred: &Tensor, gt: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_shapes(pred, gt, w)?;
    let inter = item_sum(&(w * (pred * gt)?)?)?;
    let union = item_sum(&(w * ((pred + gt)? - (pred * gt)?)?)?)?;
    let ratio = ((inter + IOU_SMOOTH)? / (union + IOU_SMOOTH)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Loss between a predicted mask `x̂0 ∈ [-1, 1]` and the ±1 ground truth.
/// Returns the differentiable total and its scalar parts.
pub fn total_loss(x0_hat: &Tensor, x0: &Tensor) -> Result<(Tensor, LossBreakdown)> {
    if x0_hat.dims() != x0.dims() {
        return Err(shape_err(format!("x̂0 {:?} vs x0 {:?}", x0_hat.dims(), x0.dims())));
    }
    let p = x0_hat.affine(0.5, 0.5)?;
    let g = x0.affine(0.5, 0.5)?.detach();
    let w = boundary_weights_tensor(&g)?;
    let bce = weighted_bce(&p, &g, &w)?;
    let iou = weighted_iou(&p, &g, &w)?;
    let total = (&bce + &iou)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        total: scalar(&total)?,
        w_bce: scalar(&bce)?,
        w_iou: scalar(&iou)?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn constant_gt_has_unit_weights() {
        for v in [0.0, 1.0] {
            let gt = Array2::from_elem((20, 13), v);
            let w = boundary_weights(gt.view()).unwrap();
            assert!(w.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn weights_are_bounded() {
        let gt = Array2::from_shape_fn((40, 40), |(i, j)| f64::from(u8::from((i * 7 + j * 3) % 5 == 0)));
        let w = boundary_weights(gt.view()).unwrap();
        assert!(w.iter().all(|&x| (1.0..=6.0).contains(&x)));
    }

    #[test]
    fn rejects_soft_gt() {
        let mut gt = Array2::<f64>::zeros((8, 8));
        gt[[2, 2]] = 0.4;
        assert!(boundary_weights(gt.view()).is_err());
    }

    #[test]
    fn reflect_index() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, vec![2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1]);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() -> Result<()> {
        let data: Vec<f32> = (0..64).map(|i| if (i % 8) < 3 { 1.0 } else { -1.0 }).collect();
        let x = Tensor::from_vec(data, (1, 1, 8, 8), &Device::Cpu)?;
        let (_, parts) = total_loss(&x, &x)?;
        assert!(parts.total < 1e-6, "{parts:?}");
        assert!(parts.w_iou.abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn unit_weights_reduce_to_mean_bce() -> Result<()> {
        let dev = Device::Cpu;
        let p = [0.2f64, 0.9, 0.6, 0.3];
        let g = [0.0f64, 1.0, 1.0, 0.0];
        let pt = Tensor::new(&p, &dev)?.reshape((1, 4))?;
        let gt = Tensor::new(&g, &dev)?.reshape((1, 4))?;
        let w = Tensor::ones((1, 4), candle_core::DType::F64, &dev)?;
        let got = weighted_bce(&pt, &gt, &w)?.to_scalar::<f64>()?;
        let want = p
            .iter()
            .zip(g)
            .map(|(p, g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((got - want).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn inverted_half_mask_iou_is_near_one() -> Result<()> {
        let dev = Device::Cpu;
        let g = Tensor::new(&[[1f64, 1.0], [0.0, 0.0]], &dev)?.reshape((1, 2, 2))?;
        let p = g.affine(-1.0, 1.0)?;
        let w = Tensor::ones((1, 2, 2), candle_core::DType::F64, &dev)?;
        // Hand computation: inter = 0, union = 4, loss = 1 - 1/5.
        let got = weighted_iou(&p, &g, &w)?.to_scalar::<f64>()?;
        assert!((got - 0.8).abs() < 1e-12);
        Ok(())
    }
}
