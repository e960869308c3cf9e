//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIV_FACTOR: f64 = 25.0;
pub const DEFAULT_FINAL_DIV_FACTOR: f64 = 1e4;

/// One-cycle schedule: linear ramp from `peak/div_factor` to `peak` over the
/// warmup fraction, then cosine annealing down to `peak/(div_factor·final_div_factor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub total_steps: u64,
}

impl OneCycle {
    pub fn new(peak_lr: f64, warmup_frac: f64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            warmup_frac,
            div_factor: DEFAULT_DIV_FACTOR,
            final_div_factor: DEFAULT_FINAL_DIV_FACTOR,
            total_steps,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.peak_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.peak_lr / (self.div_factor * self.final_div_factor)
    }

    /// Step at which the peak is reached.
    pub fn warmup_steps(&self) -> u64 {
        if self.total_steps == 0 {
            return 0;
        }
        let w = (self.warmup_frac * self.total_steps as f64).round() as u64;
        w.clamp(1, self.total_steps)
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidStep {
                step,
                total: self.total_steps,
            });
        }
        let warm = self.warmup_steps();
        if warm == 0 {
            return Ok(self.initial_lr());
        }
        if step == warm {
            return Ok(self.peak_lr);
        }
        if step < warm {
            let t = step as f64 / warm as f64;
            let init = self.initial_lr();
            return Ok(init + (self.peak_lr - init) * t);
        }
        if step == self.total_steps {
            return Ok(self.final_lr());
        }
        let t = (step - warm) as f64 / (self.total_steps - warm) as f64;
        let fin = self.final_lr();
        Ok(fin + (self.peak_lr - fin) * 0.5 * (1.0 + (PI * t).cos()))
    }
}

pub fn onecycle_lr(step: u64, total_steps: u64, peak_lr: f64, warmup_frac: f64) -> Result<f64> {
    OneCycle::new(peak_lr, warmup_frac, total_steps).lr(step)
}
