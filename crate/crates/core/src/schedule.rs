//! Linear warmup followed by cosine decay.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub peak_lr: Real,
    pub final_lr: Real,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(warmup_steps: usize, peak_lr: Real, final_lr: Real, total_steps: usize) -> Result<Self> {
        let s = Schedule {
            warmup_steps,
            peak_lr,
            final_lr,
            total_steps,
        };
        if warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
            )));
        }
        if !(peak_lr > final_lr && final_lr >= 0.0) {
            return Err(Error::config(format!(
                "need peak_lr > final_lr >= 0, got peak {peak_lr}, final {final_lr}"
            )));
        }
        Ok(s)
    }

    /// Warmup covering `fraction` of `total_steps`, rounded.
    pub fn with_warmup_fraction(fraction: Real, peak_lr: Real, final_lr: Real, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("warmup fraction {fraction} outside [0, 1)")));
        }
        let warmup = (fraction * total_steps as Real).round() as usize;
        Schedule::new(warmup.min(total_steps.saturating_sub(1)), peak_lr, final_lr, total_steps)
    }

    /// `peak·step/warmup` during warmup, then
    /// `final + (peak − final)·(1 + cos πt)/2` with
    /// `t = (step − warmup)/(total − warmup)`.
    pub fn lr_at(&self, step: usize) -> Result<Real> {
        if step > self.total_steps {
            return Err(Error::config(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as Real / self.warmup_steps as Real);
        }
        let t = (step - self.warmup_steps) as Real / (self.total_steps - self.warmup_steps) as Real;
        if t == 0.0 {
            return Ok(self.peak_lr);
        }
        if t == 1.0 {
            return Ok(self.final_lr);
        }
        let cos = (std::f64::consts::PI as Real * t).cos();
        Ok(self.final_lr + (self.peak_lr - self.final_lr) * (1.0 + cos) / 2.0)
    }
}
