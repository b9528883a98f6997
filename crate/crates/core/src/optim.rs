//! AdamW with global-norm gradient clipping and a cosine learning-rate decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm bound on the gradient; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errors.push(format!("optimizer.lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            errors.push(format!("optimizer.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("optimizer.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            errors.push(format!("optimizer.eps must be positive, got {}", self.eps));
        }
        if !(self.grad_clip >= 0.0) {
            errors.push(format!("optimizer.grad_clip must be >= 0, got {}", self.grad_clip));
        }
    }
}

/// `lr · (1 + cos(π · step / total)) / 2`, held at 0 past `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone)]
struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Decoupled-weight-decay Adam over a named, ordered set of variables.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, cfg: OptimizerConfig) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, var) in vars {
            let m = var.as_tensor().zeros_like()?;
            let v = var.as_tensor().zeros_like()?;
            if slots.insert(name.clone(), Slot { var, m, v }).is_some() {
                return Err(Error::InvalidArgument(format!("variable `{name}` registered twice")));
            }
        }
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments by variable name.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.slots.iter().map(|(n, s)| (n.as_str(), &s.m, &s.v))
    }

    /// Restores moments and the update count, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: &BTreeMap<String, (Tensor, Tensor)>) -> Result<()> {
        if moments.len() != self.slots.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries, model has {}",
                moments.len(),
                self.slots.len()
            )));
        }
        for (name, slot) in self.slots.iter_mut() {
            let (m, v) = moments
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing `{name}`")))?;
            if m.dims() != slot.var.dims() || v.dims() != slot.var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` has the wrong shape")));
            }
            slot.m = m.to_dtype(slot.var.dtype())?;
            slot.v = v.to_dtype(slot.var.dtype())?;
        }
        self.step = step;
        Ok(())
    }

    /// Global L2 norm of the gradients of the tracked variables.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for slot in self.slots.values() {
            if let Some(g) = grads.get(slot.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update at learning rate `lr`. Variables without a
    /// gradient are still decayed and their moments still decay.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<StepStats> {
        let grad_norm = self.grad_norm(grads)?;
        if !grad_norm.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite gradient norm {grad_norm}")));
        }
        let clip_scale = if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.cfg.grad_clip / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for slot in self.slots.values_mut() {
            let theta = slot.var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => (g * clip_scale)?,
                None => theta.zeros_like()?,
            };
            slot.m = ((&slot.m * b1)? + (&g * (1.0 - b1))?)?;
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let next = ((theta * decay)? - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}
