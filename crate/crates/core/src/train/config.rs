use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    /// Optimizer steps between periodic checkpoints.
    pub save_every: u64,
    pub seed: u64,
    /// Global L2 clipping threshold; 0 disables clipping.
    pub max_grad_norm: f32,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            lr: 5e-5,
            batch_size: 8,
            grad_accum_steps: 1,
            save_every: 1000,
            seed: 0,
            max_grad_norm: 1.0,
            warmup_steps: 10,
            schedule: Schedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch_size and grad_accum_steps must be >= 1");
        }
        if self.save_every == 0 {
            return bad("save_every must be >= 1");
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be > 0");
        }
        Ok(())
    }

    pub fn adam(&self, lr: f32) -> AdamParams {
        AdamParams {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Learning rate for optimizer step `step` (0-based) out of `total`.
    /// Linear warmup, then constant or cosine decay to zero.
    pub fn lr_at(&self, step: u64, total: u64) -> f32 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1);
                let t = (step - self.warmup_steps).min(span) as f64 / span as f64;
                (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}
