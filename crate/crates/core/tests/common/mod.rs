//! Brute-force reference implementations and random instances shared by the
//! integration tests. Written directly from the metric definitions, without
//! the histogram, separable-filter or row-scan shortcuts of the library.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = f64::EPSILON;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(p: &Array2<f64>, g: &Array2<bool>) -> f64 {
    let mut s = 0.0;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            s += (p[[i, j]] - if g[[i, j]] { 1.0 } else { 0.0 }).abs();
        }
    }
    s / p.len() as f64
}

// ---------------------------------------------------------------- S-measure

fn object(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mu = mean(v);
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mu / (mu * mu + 1.0 + sd + EPS)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
    let sx = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|b| (b - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(p: &Array2<f64>, g: &Array2<bool>) -> f64 {
    let (h, w) = p.dim();
    let gf = g.mapv(|b| if b { 1.0 } else { 0.0 });
    let y = gf.sum() / (h * w) as f64;
    if y == 0.0 {
        return 1.0 - p.sum() / (h * w) as f64;
    }
    if y == 1.0 {
        return p.sum() / (h * w) as f64;
    }
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &b)| b).map(|(&a, _)| a).collect();
    let bg: Vec<f64> = p.iter().zip(g).filter(|(_, &b)| !b).map(|(&a, _)| 1.0 - a).collect();
    let so = y * object(&fg) + (1.0 - y) * object(&bg);

    let (mut rs, mut cs, mut count) = (0.0, 0.0, 0.0);
    for ((i, j), &b) in g.indexed_iter() {
        if b {
            rs += i as f64;
            cs += j as f64;
            count += 1.0;
        }
    }
    let cx = ((cs / count).round_ties_even() as usize + 1).min(w);
    let cy = ((rs / count).round_ties_even() as usize + 1).min(h);
    let mut sr = 0.0;
    for (r0, r1, c0, c1) in [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)] {
        let (mut pv, mut gv) = (Vec::new(), Vec::new());
        for i in r0..r1 {
            for j in c0..c1 {
                pv.push(p[[i, j]]);
                gv.push(gf[[i, j]]);
            }
        }
        if !pv.is_empty() {
            sr += pv.len() as f64 / (h * w) as f64 * ssim(&pv, &gv);
        }
    }
    (0.5 * so + 0.5 * sr).max(0.0)
}

// ------------------------------------------------------- weighted F-measure

pub fn weighted_f(p: &Array2<f64>, g: &Array2<bool>) -> f64 {
    let (h, w) = p.dim();
    let fg: Vec<(usize, usize)> = g.indexed_iter().filter(|(_, &b)| b).map(|(ij, _)| ij).collect();
    if fg.is_empty() {
        return 0.0;
    }
    let e = Array2::from_shape_fn((h, w), |(i, j)| (p[[i, j]] - if g[[i, j]] { 1.0 } else { 0.0 }).abs());
    let mut dist = Array2::<f64>::zeros((h, w));
    let mut et = e.clone();
    for i in 0..h {
        for j in 0..w {
            let best = fg
                .iter()
                .map(|&(r, c)| (r.abs_diff(i).pow(2) + c.abs_diff(j).pow(2), r, c))
                .min()
                .unwrap();
            dist[[i, j]] = (best.0 as f64).sqrt();
            et[[i, j]] = e[[best.1, best.2]];
        }
    }
    let mut kernel = [[0.0f64; 7]; 7];
    let mut ksum = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, k) in row.iter_mut().enumerate() {
            let (x, y) = (a as f64 - 3.0, b as f64 - 3.0);
            *k = (-(x * x + y * y) / 50.0).exp();
            ksum += *k;
        }
    }
    let mut ea = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (a, row) in kernel.iter().enumerate() {
                for (b, k) in row.iter().enumerate() {
                    let (ii, jj) = (i as isize + a as isize - 3, j as isize + b as isize - 3);
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += k / ksum * et[[ii as usize, jj as usize]];
                    }
                }
            }
            ea[[i, j]] = acc;
        }
    }
    let (mut tp, mut fpw, mut ew_fg) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] {
                let m = if ea[[i, j]] < e[[i, j]] { ea[[i, j]] } else { e[[i, j]] };
                ew_fg += m;
            } else {
                fpw += e[[i, j]] * (2.0 - (0.5f64.ln() / 5.0 * dist[[i, j]]).exp());
            }
        }
    }
    let n_fg = fg.len() as f64;
    tp += n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let pr = tp / (EPS + tp + fpw);
    2.0 * r * pr / (EPS + r + pr)
}

// -------------------------------------------------------------- E-measure

pub fn e_measure(p: &Array2<f64>, g: &Array2<bool>) -> f64 {
    let n = p.len() as f64;
    let gf: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mg = gf.iter().sum::<f64>() / n;
    let mut total = 0.0;
    for k in 0..256 {
        let tau = (k as f64 + 0.5) / 256.0;
        let fm: Vec<f64> = p.iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
        let mf = fm.iter().sum::<f64>() / n;
        let enhanced: f64 = if mg == 0.0 {
            fm.iter().map(|f| 1.0 - f).sum()
        } else if mg == 1.0 {
            fm.iter().sum()
        } else {
            fm.iter()
                .zip(&gf)
                .map(|(f, b)| {
                    let (a, c) = (f - mf, b - mg);
                    let align = 2.0 * a * c / (a * a + c * c + EPS);
                    (align + 1.0).powi(2) / 4.0
                })
                .sum()
        };
        total += enhanced / n;
    }
    total / 256.0
}

// ------------------------------------------------------ random instances

/// A random prediction/ground-truth pair. Ground truths are blob unions with
/// occasional all-background or all-foreground maps; predictions mix
/// uniform noise with values lying exactly on E-measure thresholds.
pub fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Array2<f64>, Array2<bool>) {
    let kind = rng.random_range(0..20);
    let gt = match kind {
        0 => Array2::from_elem((h, w), false),
        1 => Array2::from_elem((h, w), true),
        _ => {
            let blobs = rng.random_range(1..4);
            let centres: Vec<(f64, f64, f64)> = (0..blobs)
                .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(1.0..6.0)))
                .collect();
            let g = Array2::from_shape_fn((h, w), |(i, j)| {
                centres.iter().any(|&(ci, cj, r)| (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2) <= r * r)
            });
            if g.iter().all(|&b| b) || !g.iter().any(|&b| b) {
                Array2::from_shape_fn((h, w), |(i, j)| i < h / 2 && j < w / 3)
            } else {
                g
            }
        }
    };
    let noise = rng.random_range(0.0..1.0);
    let pred = Array2::from_shape_fn((h, w), |(i, j)| {
        let r: f64 = rng.random();
        if r < 0.1 {
            (rng.random_range(0..256) as f64 + 0.5) / 256.0
        } else if r < 0.15 {
            if rng.random::<bool>() { 0.0 } else { 1.0 }
        } else {
            let base = if gt[[i, j]] { 1.0 } else { 0.0 };
            ((1.0 - noise) * base + noise * rng.random::<f64>()).clamp(0.0, 1.0)
        }
    });
    (pred, gt)
}

pub fn as_float(g: &Array2<bool>) -> Array2<f64> {
    g.mapv(|b| if b { 1.0 } else { 0.0 })
}
