use serde::{Deserialize, Serialize};

use super::OptimError;

/// Linear warmup from 0 to `peak_lr`, then linear decay to `end_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub end_lr: f64,
}

impl Default for ScheduleConfig {
    /// 31250 steps, 10% warmup, peak 2.5e-3, decaying to zero.
    fn default() -> Self {
        Self {
            total_steps: 31250,
            warmup_fraction: 0.1,
            peak_lr: 2.5e-3,
            end_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.total_steps == 0 {
            return Err(OptimError::InvalidConfig("total_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(OptimError::InvalidConfig("warmup_fraction must be in [0, 1]".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(OptimError::InvalidConfig("peak_lr must be positive".into()));
        }
        if !(self.end_lr >= 0.0 && self.end_lr.is_finite()) {
            return Err(OptimError::InvalidConfig("end_lr must be non-negative".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    /// Learning rate for `step` in `0..=total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64, OptimError> {
        if step > self.total_steps {
            return Err(OptimError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let w = self.warmup_steps();
        if step <= w && w > 0 {
            // step / w is exactly 1.0 at the boundary.
            return Ok(self.peak_lr * (step as f64 / w as f64));
        }
        let remaining = (self.total_steps - step) as f64 / (self.total_steps - w) as f64;
        Ok(self.end_lr + (self.peak_lr - self.end_lr) * remaining)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_anchors() {
        let s = ScheduleConfig::default();
        assert_eq!(s.warmup_steps(), 3125);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(3125).unwrap(), 2.5e-3);
        assert_eq!(s.lr_at(31250).unwrap(), 0.0);
        let mid = s.lr_at(17188).unwrap();
        assert!((mid - 1.24996e-3).abs() < 5e-9, "{mid}");
        assert!(matches!(s.lr_at(31251), Err(OptimError::StepOutOfRange { .. })));
    }

    #[test]
    fn peak_attained_once() {
        let s = ScheduleConfig {
            total_steps: 200,
            ..Default::default()
        };
        let peaks = (0..=200).filter(|&t| s.lr_at(t).unwrap() == s.peak_lr).count();
        assert_eq!(peaks, 1);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = ScheduleConfig {
            total_steps: 10,
            warmup_fraction: 0.0,
            peak_lr: 1.0,
            end_lr: 0.5,
        };
        assert_eq!(s.lr_at(0).unwrap(), 1.0);
        assert_eq!(s.lr_at(10).unwrap(), 0.5);
    }

    #[test]
    fn full_warmup_never_decays() {
        let s = ScheduleConfig {
            total_steps: 4,
            warmup_fraction: 1.0,
            peak_lr: 1.0,
            end_lr: 0.0,
        };
        assert_eq!(s.lr_at(2).unwrap(), 0.5);
        assert_eq!(s.lr_at(4).unwrap(), 1.0);
    }
}
