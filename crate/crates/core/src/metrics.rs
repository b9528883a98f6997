//! Segmentation quality measures: MAE, S-measure, weighted F-measure and
//! mean E-measure, plus directory-level evaluation.
//!
//! Predictions are `[0, 1]` maps and ground truths `{0, 1}` maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Division guard used by the reference formulations.
pub const EPS: f64 = f64::EPSILON;
pub const S_ALPHA: f64 = 0.5;
pub const E_THRESHOLDS: usize = 256;
const WF_BETA2: f64 = 1.0;
const WF_KERNEL_RADIUS: usize = 3;
const WF_KERNEL_SIGMA: f64 = 5.0;

fn check(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(shape_err(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    if pred.is_empty() {
        return Err(shape_err("empty maps"));
    }
    Ok(())
}

pub fn mae(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt.iter()).map(|(&p, &g)| (p - f64::from(u8::from(g))).abs()).sum();
    Ok(sum / pred.len() as f64)
}

// ---------------------------------------------------------------- S-measure

/// Sample standard deviation (`n − 1`), zero for fewer than two values.
fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sigma = sample_std(values, mean);
    2.0 * mean / (mean * mean + 1.0 + sigma + EPS)
}

fn s_object(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let u = fg.len() as f64 / pred.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Foreground centroid as 1-based (column, row) split indices, rounding half to even.
fn centroid(gt: ArrayView2<bool>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let mut count = 0usize;
    let (mut sr, mut sc) = (0f64, 0f64);
    for ((i, j), &g) in gt.indexed_iter() {
        if g {
            count += 1;
            sr += i as f64;
            sc += j as f64;
        }
    }
    if count == 0 {
        return ((w as f64 / 2.0).round_ties_even() as usize + 1, (h as f64 / 2.0).round_ties_even() as usize + 1);
    }
    let x = (sc / count as f64).round_ties_even() as usize;
    let y = (sr / count as f64).round_ties_even() as usize;
    (x + 1, y + 1)
}

fn ssim(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.sum() / nf;
    let y = gt.iter().filter(|&&g| g).count() as f64 / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let dx = p - x;
        let dy = f64::from(u8::from(g)) - y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = if n > 1 { nf - 1.0 } else { 1.0 };
    let (sigma_x, sigma_y, sigma_xy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x + sigma_y);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let (x, y) = centroid(gt);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let quads = [(0..y, 0..x), (0..y, x..w), (y..h, 0..x), (y..h, x..w)];
    quads
        .into_iter()
        .map(|(r, c)| {
            let weight = (r.len() * c.len()) as f64 / area;
            if weight == 0.0 {
                return 0.0;
            }
            let p = pred.slice(s![r.clone(), c.clone()]);
            let g = gt.slice(s![r, c]);
            weight * ssim(p, g)
        })
        .sum()
}

/// Structure measure `α·S_object + (1 − α)·S_region`, α = 0.5, clipped at 0.
pub fn s_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    check(pred, gt)?;
    let y = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
    let mean_pred = pred.sum() / pred.len() as f64;
    Ok(if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        (S_ALPHA * s_object(pred, gt) + (1.0 - S_ALPHA) * s_region(pred, gt)).max(0.0)
    })
}

// ------------------------------------------------------- weighted F-measure

/// Euclidean distance to the nearest foreground pixel and that pixel's
/// index. Ties go to the smallest (row, column). Foreground pixels map to
/// themselves at distance 0. Requires at least one foreground pixel.
pub fn nearest_foreground(gt: ArrayView2<bool>) -> (Array2<f64>, Array2<(usize, usize)>) {
    let (h, w) = gt.dim();
    // Per row, nearest foreground column to the left (inclusive) and right.
    let mut left = Array2::<Option<usize>>::from_elem((h, w), None);
    let mut right = Array2::<Option<usize>>::from_elem((h, w), None);
    for i in 0..h {
        let mut last = None;
        for j in 0..w {
            if gt[[i, j]] {
                last = Some(j);
            }
            left[[i, j]] = last;
        }
        let mut next = None;
        for j in (0..w).rev() {
            if gt[[i, j]] {
                next = Some(j);
            }
            right[[i, j]] = next;
        }
    }
    let mut dist = Array2::<f64>::zeros((h, w));
    let mut idx = Array2::<(usize, usize)>::from_elem((h, w), (0, 0));
    for i in 0..h {
        for j in 0..w {
            let mut best: Option<(usize, usize, usize)> = None;
            for r in 0..h {
                let dr = r.abs_diff(i);
                if let Some((d2, _, _)) = best {
                    if dr * dr > d2 {
                        if r > i {
                            break;
                        }
                        continue;
                    }
                }
                let cand = match (left[[r, j]], right[[r, j]]) {
                    (Some(a), Some(b)) => Some(if j - a <= b - j { a } else { b }),
                    (Some(a), None) => Some(a),
                    (None, Some(b)) => Some(b),
                    (None, None) => None,
                };
                if let Some(c) = cand {
                    let d2 = dr * dr + c.abs_diff(j).pow(2);
                    let better = match best {
                        None => true,
                        Some((bd, br, bc)) => (d2, r, c) < (bd, br, bc),
                    };
                    if better {
                        best = Some((d2, r, c));
                    }
                }
            }
            let (d2, r, c) = best.expect("at least one foreground pixel");
            dist[[i, j]] = (d2 as f64).sqrt();
            idx[[i, j]] = (r, c);
        }
    }
    (dist, idx)
}

/// Normalized 1-D Gaussian taps; their outer product is the normalized
/// `(2r+1)²` kernel.
fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let x = k as f64 - radius as f64;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Same-size separable Gaussian filtering with zero padding.
fn gaussian_filter(x: &Array2<f64>, radius: usize, sigma: f64) -> Array2<f64> {
    let taps = gaussian_taps(radius, sigma);
    let (h, w) = x.dim();
    let r = radius as isize;
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let d = k as isize - r;
                let (ii, jj) = if horizontal { (i as isize, j as isize + d) } else { (i as isize + d, j as isize) };
                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                    acc += t * src[[ii as usize, jj as usize]];
                }
            }
            acc
        })
    };
    pass(&pass(x, true), false)
}

/// Weighted F-measure (β² = 1). An empty ground truth scores 0.
pub fn weighted_f_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    check(pred, gt)?;
    if !gt.iter().any(|&g| g) {
        return Ok(0.0);
    }
    let e = Array2::from_shape_fn(gt.dim(), |ij| (pred[ij] - f64::from(u8::from(gt[ij]))).abs());
    let (dist, idx) = nearest_foreground(gt);
    let et = Array2::from_shape_fn(gt.dim(), |ij| if gt[ij] { e[ij] } else { e[idx[ij]] });
    let ea = gaussian_filter(&et, WF_KERNEL_RADIUS, WF_KERNEL_SIGMA);
    let (mut fg_count, mut fg_err, mut bg_err) = (0f64, 0f64, 0f64);
    for (ij, &g) in gt.indexed_iter() {
        if g {
            let min_e = if ea[ij] < e[ij] { ea[ij] } else { e[ij] };
            fg_count += 1.0;
            fg_err += min_e;
        } else {
            let b = 2.0 - (0.5f64.ln() / 5.0 * dist[ij]).exp();
            bg_err += e[ij] * b;
        }
    }
    let tp = fg_count - fg_err;
    let recall = 1.0 - fg_err / fg_count;
    let precision = tp / (EPS + tp + bg_err);
    Ok((1.0 + WF_BETA2) * recall * precision / (EPS + recall + WF_BETA2 * precision))
}

// -------------------------------------------------------------- E-measure

/// Threshold `k` of the mean E-measure sweep: `(k + 1/2) / 256`.
pub fn e_threshold(k: usize) -> f64 {
    (k as f64 + 0.5) / E_THRESHOLDS as f64
}

/// Number of sweep thresholds that `p` reaches (`p ≥ τ_k`).
fn threshold_count(p: f64) -> usize {
    let mut n = ((p * E_THRESHOLDS as f64) + 0.5).floor().clamp(0.0, E_THRESHOLDS as f64) as usize;
    while n < E_THRESHOLDS && p >= e_threshold(n) {
        n += 1;
    }
    while n > 0 && p < e_threshold(n - 1) {
        n -= 1;
    }
    n
}

/// Enhanced-alignment score of a binarized map given the four confusion
/// counts (pred fg ∧ gt fg, pred fg ∧ gt bg, pred bg ∧ gt fg, pred bg ∧ gt bg).
fn enhanced_alignment(tp: usize, fp: usize, fn_: usize, tn: usize) -> f64 {
    let n = (tp + fp + fn_ + tn) as f64;
    let gt_fg = tp + fn_;
    let pred_fg = tp + fp;
    if gt_fg == 0 {
        return (fn_ + tn) as f64 / n;
    }
    if gt_fg as f64 == n {
        return pred_fg as f64 / n;
    }
    let mp = pred_fg as f64 / n;
    let mg = gt_fg as f64 / n;
    let score = |a: f64, b: f64| {
        let xi = 2.0 * a * b / (a * a + b * b + EPS);
        (xi + 1.0).powi(2) / 4.0
    };
    let parts = [
        (tp, 1.0 - mp, 1.0 - mg),
        (fp, 1.0 - mp, -mg),
        (fn_, -mp, 1.0 - mg),
        (tn, -mp, -mg),
    ];
    parts.iter().map(|&(count, a, b)| count as f64 * score(a, b)).sum::<f64>() / n
}

/// Mean E-measure over the 256 thresholds `(k + 1/2)/256`.
pub fn e_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64> {
    check(pred, gt)?;
    let mut fg_hist = vec![0usize; E_THRESHOLDS + 1];
    let mut bg_hist = vec![0usize; E_THRESHOLDS + 1];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let bin = threshold_count(p);
        if g {
            fg_hist[bin] += 1;
        } else {
            bg_hist[bin] += 1;
        }
    }
    let gt_fg: usize = fg_hist.iter().sum();
    let gt_bg: usize = bg_hist.iter().sum();
    // Pixels above threshold k are those with bin ≥ k + 1.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut total = 0.0;
    for k in (0..E_THRESHOLDS).rev() {
        tp += fg_hist[k + 1];
        fp += bg_hist[k + 1];
        total += enhanced_alignment(tp, fp, gt_fg - tp, gt_bg - fp);
    }
    Ok(total / E_THRESHOLDS as f64)
}

// ------------------------------------------------------------- aggregation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub e_phi: f64,
}

impl Scores {
    pub fn compute(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, gt)?,
            s_alpha: s_measure(pred, gt)?,
            f_beta_w: weighted_f_measure(pred, gt)?,
            e_phi: e_measure(pred, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub e_phi: f64,
    pub n_images: usize,
}

impl MetricReport {
    /// Per-image means. Errors on an empty input.
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a Scores>) -> Result<Self> {
        let mut sum = Scores { mae: 0.0, s_alpha: 0.0, f_beta_w: 0.0, e_phi: 0.0 };
        let mut n = 0usize;
        for s in scores {
            sum.mae += s.mae;
            sum.s_alpha += s.s_alpha;
            sum.f_beta_w += s.f_beta_w;
            sum.e_phi += s.e_phi;
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no images to aggregate".into()));
        }
        let nf = n as f64;
        Ok(Self {
            mae: sum.mae / nf,
            s_alpha: sum.s_alpha / nf,
            f_beta_w: sum.f_beta_w / nf,
            e_phi: sum.e_phi / nf,
            n_images: n,
        })
    }

    /// Aligned text table with metric names as columns.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}\n",
            "MAE", "S_alpha", "F_beta_w", "E_phi", "images", self.mae, self.s_alpha, self.f_beta_w, self.e_phi, self.n_images
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirEvaluation {
    pub per_image: BTreeMap<String, Scores>,
    pub aggregate: MetricReport,
    /// Stems present on only one side.
    pub unmatched: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Reads an 8-bit grayscale map scaled to `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| f64::from(img.get_pixel(j as u32, i as u32)[0]) / 255.0))
}

/// Bilinear resize (half-pixel centres) of a single-channel map.
pub fn resize_map(x: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let rh = crate::nn::layers::bilinear_matrix(h, out_h);
    let rw = crate::nn::layers::bilinear_matrix(w, out_w);
    let rh = Array2::from_shape_vec((out_h, h), rh).expect("bilinear matrix shape");
    let rw = Array2::from_shape_vec((out_w, w), rw).expect("bilinear matrix shape");
    rh.dot(&x).dot(&rw.t())
}

/// Scores every prediction whose stem has a ground truth. Predictions at a
/// different size are bilinearly resized to the ground truth first.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<DirEvaluation> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let mut unmatched: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    unmatched.extend(gts.keys().filter(|k| !preds.contains_key(*k)).cloned());
    unmatched.sort();
    for stem in &unmatched {
        log::warn!("`{stem}` has no counterpart; skipped");
    }
    let mut per_image = BTreeMap::new();
    for (stem, pred_path) in &preds {
        let Some(gt_path) = gts.get(stem) else { continue };
        let gt = read_gray(gt_path)?.mapv(|v| v > 0.5);
        let mut pred = read_gray(pred_path)?;
        if pred.dim() != gt.dim() {
            pred = resize_map(pred.view(), gt.nrows(), gt.ncols()).mapv(|v| v.clamp(0.0, 1.0));
        }
        per_image.insert(stem.clone(), Scores::compute(pred.view(), gt.view())?);
    }
    if per_image.is_empty() {
        return Err(Error::Data(format!(
            "no prediction in {} matches a ground truth in {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let aggregate = MetricReport::from_scores(per_image.values())?;
    Ok(DirEvaluation { per_image, aggregate, unmatched })
}

impl DirEvaluation {
    /// Writes the evaluation as pretty-printed JSON.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
