//! Discrete diffusion timetables.
//!
//! Both schedule kinds are defined on continuous time `s ∈ (0, 1)` and
//! discretized on the grid `s_i = i / T`, squeezed affinely into
//! `[EPS_T, 1 - EPS_T]` so the tangent never hits its poles. By convention
//! `alpha_bar[0] = 1`, which makes the last reverse step deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin keeping continuous time away from 0 and 1.
pub const EPS_T: f64 = 1e-3;

/// Offset at which the shifted schedule performed best (`-2 ln 5.5`).
pub fn default_shift() -> f64 {
    -2.0 * 5.5f64.ln()
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    SnrShifted,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_steps: usize,
    kind: ScheduleKind,
    shift: f64,
    /// `T + 1` entries, `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    /// `beta[t - 1]` holds β_t.
    beta: Vec<f64>,
    /// `log_snr[t - 1]` holds log SNR at step t.
    log_snr: Vec<f64>,
}

/// Continuous time of grid point `i` out of `num_steps`.
pub fn grid_time(i: usize, num_steps: usize) -> f64 {
    let u = i as f64 / num_steps as f64;
    0.5 + (1.0 - 2.0 * EPS_T) * (u - 0.5)
}

/// `log SNR(s) = -2 log tan(π s / 2) + shift`.
pub fn shifted_log_snr(s: f64, shift: f64) -> f64 {
    -2.0 * (std::f64::consts::FRAC_PI_2 * s).tan().ln() + shift
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cosine_alpha_bar(s: f64) -> f64 {
    let f = |s: f64| {
        let c = ((s + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    f(s) / f(0.0)
}

impl NoiseSchedule {
    pub fn snr_shifted(num_steps: usize, shift: f64) -> Result<Self> {
        if num_steps < 1 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !shift.is_finite() {
            return Err(Error::InvalidArgument(format!("shift must be finite, got {shift}")));
        }
        let log_snr: Vec<f64> = (1..=num_steps)
            .map(|i| shifted_log_snr(grid_time(i, num_steps), shift))
            .collect();
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        alpha_bar.extend(log_snr.iter().map(|&l| sigmoid(l)));
        let beta = alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]).collect();
        Ok(Self {
            num_steps,
            kind: ScheduleKind::SnrShifted,
            shift,
            alpha_bar,
            beta,
            log_snr,
        })
    }

    pub fn cosine(num_steps: usize) -> Result<Self> {
        if num_steps < 1 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        let mut beta = Vec::with_capacity(num_steps);
        alpha_bar.push(1.0);
        let mut prev_raw = 1.0;
        for i in 1..=num_steps {
            let raw = cosine_alpha_bar(grid_time(i, num_steps));
            let b = (1.0 - raw / prev_raw).min(MAX_BETA);
            prev_raw = raw;
            beta.push(b);
            let last = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(last * (1.0 - b));
        }
        let log_snr = alpha_bar[1..].iter().map(|&a| (a / (1.0 - a)).ln()).collect();
        Ok(Self {
            num_steps,
            kind: ScheduleKind::Cosine,
            shift: 0.0,
            alpha_bar,
            beta,
            log_snr,
        })
    }

    pub fn new(kind: ScheduleKind, num_steps: usize, shift: f64) -> Result<Self> {
        match kind {
            ScheduleKind::SnrShifted => Self::snr_shifted(num_steps, shift),
            ScheduleKind::Cosine => Self::cosine(num_steps),
        }
    }

    /// Same kind and shift on a different number of steps.
    pub fn with_steps(&self, num_steps: usize) -> Result<Self> {
        Self::new(self.kind, num_steps, self.shift)
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::StepOutOfRange {
                t,
                num_steps: self.num_steps,
            });
        }
        Ok(())
    }

    /// ᾱ_t for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::StepOutOfRange {
            t,
            num_steps: self.num_steps,
        })
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn log_snr(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.log_snr[t - 1])
    }

    /// Continuous time in (0, 1) fed to the network for step `t`.
    pub fn time(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(grid_time(t, self.num_steps))
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))` of `q(x_t | x_0)`.
    pub fn forward_marginal_params(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let a = self.alpha_bar[t];
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Coefficients of the reverse posterior mean and its standard deviation:
    /// `x_{t-1} = c_xt·x_t + c_x0·x̂_0 + σ_t·z`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        self.check(t)?;
        let ab_t = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.beta[t - 1];
        let alpha = 1.0 - beta;
        let denom = 1.0 - ab_t;
        Ok(PosteriorCoeffs {
            c_xt: alpha.sqrt() * (1.0 - ab_prev) / denom,
            c_x0: ab_prev.sqrt() * beta / denom,
            sigma: ((1.0 - ab_prev) / denom * beta).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub c_xt: f64,
    pub c_x0: f64,
    pub sigma: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_is_half_without_shift() {
        let s = NoiseSchedule::snr_shifted(10, 0.0).unwrap();
        assert!((s.alpha_bar(5).unwrap() - 0.5).abs() < 1e-9);
        let (a, b) = s.forward_marginal_params(5).unwrap();
        assert!((a - 0.7071).abs() < 1e-4 && (b - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn default_shift_midpoint() {
        let s = NoiseSchedule::snr_shifted(10, default_shift()).unwrap();
        let expected = 1.0 / (1.0 + 5.5f64 * 5.5);
        assert!((s.alpha_bar(5).unwrap() - expected).abs() < 1e-9);
        assert!((s.alpha_bar(5).unwrap() - 0.032).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::snr_shifted(0, 0.0).is_err());
        assert!(NoiseSchedule::snr_shifted(10, f64::NAN).is_err());
        assert!(NoiseSchedule::snr_shifted(10, f64::INFINITY).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
        let s = NoiseSchedule::cosine(10).unwrap();
        assert!(matches!(s.forward_marginal_params(0), Err(Error::StepOutOfRange { .. })));
        assert!(s.posterior_coeffs(11).is_err());
    }

    #[test]
    fn first_step_is_deterministic() {
        for s in [NoiseSchedule::snr_shifted(10, 0.0).unwrap(), NoiseSchedule::cosine(10).unwrap()] {
            let c = s.posterior_coeffs(1).unwrap();
            assert_eq!((c.c_xt, c.c_x0, c.sigma), (0.0, 1.0, 0.0));
        }
    }

    #[test]
    fn last_step_coefficients_match_direct_formula() {
        let s = NoiseSchedule::snr_shifted(10, 0.0).unwrap();
        // Recompute from the closed-form grid, independent of stored betas.
        let ab = |i: usize| {
            let u = i as f64 / 10.0;
            let time = 0.5 + 0.998 * (u - 0.5);
            let l = -2.0 * (std::f64::consts::PI * time / 2.0).tan().ln();
            1.0 / (1.0 + (-l).exp())
        };
        let (ab_t, ab_p) = (ab(10), ab(9));
        let alpha = ab_t / ab_p;
        let beta = 1.0 - alpha;
        let c_xt = alpha.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
        let c_x0 = ab_p.sqrt() * beta / (1.0 - ab_t);
        let sigma = ((1.0 - ab_p) / (1.0 - ab_t) * beta).sqrt();
        let got = s.posterior_coeffs(10).unwrap();
        assert!((got.c_xt - c_xt).abs() < 1e-12);
        assert!((got.c_x0 - c_x0).abs() < 1e-12);
        assert!((got.sigma - sigma).abs() < 1e-12);
    }

    #[test]
    fn cosine_betas_are_clipped() {
        for t in [1usize, 2, 10] {
            let s = NoiseSchedule::cosine(t).unwrap();
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_BETA));
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn log_snr_matches_alpha_bar() {
        for s in [
            NoiseSchedule::snr_shifted(1000, 0.0).unwrap(),
            NoiseSchedule::snr_shifted(10, default_shift()).unwrap(),
            NoiseSchedule::cosine(100).unwrap(),
        ] {
            for t in 1..=s.num_steps() {
                let a = s.alpha_bar(t).unwrap();
                let snr = a / (1.0 - a);
                let rel = (s.log_snr(t).unwrap().exp() - snr).abs() / snr;
                assert!(rel < 1e-9, "t={t}: rel {rel}");
            }
        }
    }
}
