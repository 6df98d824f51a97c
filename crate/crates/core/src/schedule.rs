//! Warmup-Stable-Decay learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("decay_fraction must lie in (0, 1], got {0}")]
    DecayFraction(f64),
    #[error("peak_lr must be finite and >= 0, got {0}")]
    PeakLr(f64),
}

/// Linear warmup to `peak_lr`, a constant stable phase, then a linear decay
/// to `decay_fraction · peak_lr` over `decay_steps`.
///
/// `decay_steps == 0` means the schedule never leaves the stable phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    #[serde(default = "default_decay_fraction")]
    pub decay_fraction: f64,
    #[serde(default)]
    pub decay_steps: u64,
}

fn default_decay_fraction() -> f64 {
    0.1
}

impl WsdSchedule {
    /// Warmup followed by a constant phase, the setting used for every
    /// learning-rate search run.
    pub fn stable_only(warmup_steps: u64, peak_lr: f64) -> Self {
        Self {
            warmup_steps,
            peak_lr,
            decay_fraction: default_decay_fraction(),
            decay_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return Err(ScheduleError::DecayFraction(self.decay_fraction));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(ScheduleError::PeakLr(self.peak_lr));
        }
        Ok(())
    }

    /// Shape of the schedule in `[0, 1]`, independent of `peak_lr`.
    ///
    /// `stable_steps` is the length of the stable phase; the decay phase (if
    /// any) starts at `warmup_steps + stable_steps`.
    pub fn multiplier(&self, step: u64, stable_steps: u64) -> f64 {
        if step < self.warmup_steps {
            return step as f64 / self.warmup_steps as f64;
        }
        let decay_start = self.warmup_steps.saturating_add(stable_steps);
        if self.decay_steps == 0 || step <= decay_start {
            return 1.0;
        }
        let into_decay = step - decay_start;
        if into_decay >= self.decay_steps {
            return self.decay_fraction;
        }
        let progress = into_decay as f64 / self.decay_steps as f64;
        1.0 - (1.0 - self.decay_fraction) * progress
    }

    /// Learning rate at `step`.
    pub fn lr(&self, step: u64, stable_steps: u64) -> f64 {
        self.peak_lr * self.multiplier(step, stable_steps)
    }

    /// Total steps covered by warmup, stable and decay phases.
    pub fn total_steps(&self, stable_steps: u64) -> u64 {
        self.warmup_steps + stable_steps + self.decay_steps
    }
}

/// Free-function form of [`WsdSchedule::lr`].
pub fn wsd_lr(schedule: &WsdSchedule, step: u64, stable_steps: u64) -> f64 {
    schedule.lr(step, stable_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> WsdSchedule {
        WsdSchedule {
            warmup_steps: 1000,
            peak_lr: 4e-4,
            decay_fraction: 0.1,
            decay_steps: 500,
        }
    }

    #[test]
    fn warmup_starts_at_zero_and_is_linear() {
        let s = sched();
        assert_eq!(s.lr(0, 2000), 0.0);
        assert_eq!(s.lr(500, 2000), 2e-4);
        assert_eq!(s.lr(1000, 2000), 4e-4);
    }

    #[test]
    fn decay_ends_at_ten_percent() {
        let s = sched();
        assert!((s.lr(3500, 2000) - 4e-5).abs() < 1e-18);
        assert!((s.lr(10_000, 2000) - 4e-5).abs() < 1e-18);
        assert!((s.lr(3250, 2000) - 0.55 * 4e-4).abs() < 1e-15);
    }

    #[test]
    fn stable_only_never_decays() {
        let s = WsdSchedule::stable_only(10, 1e-3);
        assert_eq!(s.lr(1_000_000, 0), 1e-3);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let s = WsdSchedule::stable_only(0, 2e-3);
        assert_eq!(s.lr(0, 10), 2e-3);
    }

    #[test]
    fn rejects_bad_fraction() {
        let mut s = sched();
        s.decay_fraction = 0.0;
        assert!(s.validate().is_err());
        s.decay_fraction = 1.5;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn piecewise_linear_and_continuous(
            warmup in 1u64..200, stable in 0u64..300, decay in 1u64..300,
            frac in 0.01f64..1.0, peak in 1e-5f64..1e-1,
        ) {
            let s = WsdSchedule { warmup_steps: warmup, peak_lr: peak, decay_fraction: frac, decay_steps: decay };
            let total = s.total_steps(stable);
            let max_jump = peak / warmup.min(decay) as f64 + 1e-15;
            let mut prev = s.lr(0, stable);
            for step in 1..=total + 5 {
                let cur = s.lr(step, stable);
                prop_assert!((cur - prev).abs() <= max_jump * (1.0 + 1e-9));
                prop_assert!(cur >= 0.0 && cur <= peak * (1.0 + 1e-12));
                if step >= warmup && step <= warmup + stable {
                    prop_assert_eq!(cur, peak);
                }
                prev = cur;
            }
        }
    }
}
