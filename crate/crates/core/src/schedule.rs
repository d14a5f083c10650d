use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `lr_max`, then cosine annealing down to `lr_min`
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// 1e-3 → 5e-5 over 100 000 steps with a 10 000-step warmup.
    pub fn full_scale() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 5e-5,
            total_steps: 100_000,
            warmup_steps: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return Ok(self.lr_max);
            }
            return Ok(self.lr_max * (step as f64 / self.warmup_steps as f64));
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cosine = 1.0 + (std::f64::consts::PI * progress).cos();
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * cosine)
    }
}
