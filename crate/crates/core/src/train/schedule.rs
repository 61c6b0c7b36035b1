use serde::{Deserialize, Serialize};

use crate::loss::Stage;

/// Linear warmup from 0 to `peak` over `warmup` steps, then
/// `peak · sqrt(warmup / step)`.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64) -> f64 {
    let w = warmup.max(1) as f64;
    let s = step as f64;
    if s < w {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    }
}

/// Smoothed KL estimate and the one-way switch from stage 1 to stage 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageControl {
    pub decay: f64,
    pub interval: u64,
    /// Threshold; `None` until it is known.
    pub t_sep: Option<f64>,
    pub kl_ema: Option<f64>,
    pub stage: Stage,
    pub switch_step: Option<u64>,
}

impl StageControl {
    pub fn new(decay: f64, interval: u64, t_sep: Option<f64>) -> Self {
        Self {
            decay,
            interval: interval.max(1),
            t_sep,
            kl_ema: None,
            stage: Stage::One,
            switch_step: None,
        }
    }

    /// Folds one KL observation into the average. The first observation
    /// initialises it.
    pub fn observe(&mut self, kl: f64) {
        self.kl_ema = Some(match self.kl_ema {
            None => kl,
            Some(e) => self.decay * e + (1.0 - self.decay) * kl,
        });
    }

    /// Called after update `step`. On check steps in stage 1, switches when
    /// the average is at or below the threshold. Returns true on the switch.
    pub fn maybe_switch(&mut self, step: u64) -> bool {
        if self.stage != Stage::One || !step.is_multiple_of(self.interval) {
            return false;
        }
        match (self.kl_ema, self.t_sep) {
            (Some(e), Some(t)) if e <= t => {
                self.stage = Stage::Two;
                self.switch_step = Some(step);
                true
            }
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(4000, 5e-4, 4000), 5e-4);
        assert!((lr_schedule(16000, 5e-4, 4000) - 2.5e-4).abs() < 1e-18);
        assert!((lr_schedule(2000, 5e-4, 4000) - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(0, 5e-4, 4000), 0.0);
    }

    #[test]
    fn boundary_is_inclusive() {
        let mut c = StageControl::new(0.5, 1, Some(0.25));
        c.observe(0.25);
        assert!(c.maybe_switch(1));
        assert_eq!((c.stage, c.switch_step), (Stage::Two, Some(1)));
        c.observe(100.0);
        assert!(!c.maybe_switch(2));
        assert_eq!(c.stage, Stage::Two);

        let mut c = StageControl::new(0.5, 1, Some(0.25));
        c.observe(0.25 + 1e-12);
        assert!(!c.maybe_switch(1));
    }

    #[test]
    fn only_on_check_steps() {
        let mut c = StageControl::new(0.98, 50, Some(1.0));
        c.observe(0.1);
        assert!(!c.maybe_switch(49));
        assert!(c.maybe_switch(50));
    }

    #[test]
    fn unset_threshold_never_switches() {
        let mut c = StageControl::new(0.98, 1, None);
        c.observe(0.0);
        assert!(!c.maybe_switch(1));
    }
}
