use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRETRAIN_PEAK_LR: f64 = 1e-4;
pub const FINETUNE_PEAK_LR: f64 = 5e-5;
pub const WARMUP_FRACTION: f64 = 0.05;

/// Linear warmup then cosine annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl ScheduleConfig {
    /// Warmup of `fraction · total` steps, at least 1 and below `total`.
    pub fn with_warmup_fraction(peak_lr: f64, total_steps: usize, fraction: f64, min_lr: f64) -> Result<Self> {
        let warmup = ((fraction * total_steps as f64).round() as usize).clamp(1, total_steps.saturating_sub(1).max(1));
        let cfg = ScheduleConfig {
            peak_lr,
            warmup_steps: warmup,
            total_steps,
            min_lr,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.warmup_steps && self.warmup_steps < self.total_steps) {
            return Err(Error::Config(format!(
                "need 0 < warmup ({}) < total ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::Config(format!("invalid learning rates peak {} min {}", self.peak_lr, self.min_lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return self.min_lr;
        }
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}
