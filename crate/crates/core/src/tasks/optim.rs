//! Hand-rolled AdamW with decoupled weight decay, global-norm gradient
//! clipping, and a warmup-then-cosine learning-rate schedule. Moments are
//! kept in double precision regardless of the parameter precision, so the
//! optimizer trajectory is reproducible bit-for-bit and survives checkpoint
//! round-trips exactly.

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::real::Real;

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_steps: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |d: String| Err(KernelError::contract("optimizer config", d));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return err(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based) for a run of `total_steps`: linear
    /// warmup to `lr` over `warmup_steps`, then cosine decay to zero.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.warmup_steps.min(total_steps);
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total_steps.saturating_sub(warmup);
        if span == 0 {
            return self.lr;
        }
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW state: step count plus first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, n: usize) -> Self {
        AdamW { cfg, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One update with learning rate `lr`: clip the gradient to the global
    /// norm ceiling, update the moments, and apply the bias-corrected step
    /// with decoupled weight decay. Returns the pre-clip gradient norm.
    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(KernelError::dim(
                "optimizer step",
                format!("{} parameters", self.m.len()),
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        let mut sq = 0.0f64;
        for g in grads {
            let g = g.as_f64();
            sq += g * g;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(KernelError::contract(
                "optimizer step",
                format!("non-finite gradient norm {norm}"),
            ));
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = self.cfg.weight_decay;
        for i in 0..params.len() {
            let g = grads[i].as_f64() * scale;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p = params[i].as_f64();
            let step = lr * (mhat / (vhat.sqrt() + self.cfg.eps) + wd * p);
            params[i] = T::from_f64(p - step);
        }
        Ok(norm)
    }
}
