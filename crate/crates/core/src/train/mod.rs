//! Joint training of the two paths of a composite model, with the plain
//! single-model and constant-constraint baselines.

mod log;
mod optim;
mod schedule;
mod trainer;

pub use log::{EvalRecord, Header, LogRecord, LogWriter, RunLog, UpdateRecord};
pub use optim::{adam_update, Adam, Moments};
pub use schedule::{lr_schedule, StageControl};
pub use trainer::{plan_updates, RunOptions, RunOutcome, Trainee, TrainState, Trainer, UpdateOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Which;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One model, cross-entropy (plus balancing) only.
    Single,
    /// Both paths with the KL term for the whole run.
    ConstJT,
    /// KL term until the smoothed KL reaches the threshold, then separate.
    TSJT,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::ConstJT => "constjt",
            Strategy::TSJT => "tsjt",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Strategy::Single),
            "constjt" => Ok(Strategy::ConstJT),
            "tsjt" => Ok(Strategy::TSJT),
            _ => Err(Error::config(format!(
                "unknown strategy {s:?}; expected single, constjt or tsjt"
            ))),
        }
    }
}

mod defaults {
    pub fn decay() -> f64 {
        0.98
    }
    pub fn interval() -> u64 {
        50
    }
    pub fn peak_lr() -> f64 {
        5e-4
    }
    pub fn warmup() -> u64 {
        400
    }
    pub fn epochs() -> usize {
        3
    }
    pub fn tokens_per_update() -> usize {
        4096
    }
    pub fn batch_tokens() -> usize {
        1024
    }
    pub fn betas() -> [f64; 2] {
        [0.9, 0.98]
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn clip() -> Option<f64> {
        Some(1.0)
    }
    pub fn alpha_big() -> f64 {
        5.0
    }
    pub fn alpha_small() -> f64 {
        10.0
    }
    pub fn single_target() -> crate::model::Which {
        crate::model::Which::Big
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub strategy: Strategy,
    /// Stage-switch threshold on the smoothed KL. When absent under tsjt it
    /// is set to half the smoothed KL at the end of the first epoch.
    #[serde(default)]
    pub t_sep: Option<f64>,
    #[serde(default = "defaults::decay")]
    pub kl_ema_decay: f64,
    #[serde(default = "defaults::interval")]
    pub switch_check_interval: u64,
    #[serde(default = "defaults::peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "defaults::warmup")]
    pub warmup_steps: u64,
    #[serde(default = "defaults::epochs")]
    pub max_epochs: usize,
    /// Stop early after this many updates.
    #[serde(default)]
    pub max_updates: Option<u64>,
    /// Target tokens per optimizer update, reached by accumulating
    /// micro-batches.
    #[serde(default = "defaults::tokens_per_update")]
    pub tokens_per_update: usize,
    /// Padded token budget of one micro-batch.
    #[serde(default = "defaults::batch_tokens")]
    pub batch_tokens: usize,
    #[serde(default = "defaults::betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "defaults::eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "defaults::alpha_big")]
    pub alpha_big: f64,
    #[serde(default = "defaults::alpha_small")]
    pub alpha_small: f64,
    /// Which model a single run trains.
    #[serde(default = "defaults::single_target")]
    pub single_target: Which,
    /// Evaluate on the validation split every this many updates, in addition
    /// to every epoch end.
    #[serde(default)]
    pub eval_every: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainerConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            t_sep: None,
            kl_ema_decay: defaults::decay(),
            switch_check_interval: defaults::interval(),
            peak_lr: defaults::peak_lr(),
            warmup_steps: defaults::warmup(),
            max_epochs: defaults::epochs(),
            max_updates: None,
            tokens_per_update: defaults::tokens_per_update(),
            batch_tokens: defaults::batch_tokens(),
            adam_betas: defaults::betas(),
            adam_eps: defaults::eps(),
            clip_norm: defaults::clip(),
            alpha_big: defaults::alpha_big(),
            alpha_small: defaults::alpha_small(),
            single_target: defaults::single_target(),
            eval_every: None,
            seed: 0,
        }
    }

    pub fn alpha(&self, which: Which) -> f64 {
        match which {
            Which::Big => self.alpha_big,
            Which::Small => self.alpha_small,
        }
    }

    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("trainer.{field} {why}")));
        if let Some(t) = self.t_sep {
            if t.is_nan() || t < 0.0 {
                return bad("t_sep", "must be a non-negative number");
            }
        }
        if !(0.0..1.0).contains(&self.kl_ema_decay) {
            return bad("kl_ema_decay", "must lie in [0, 1)");
        }
        if self.switch_check_interval == 0 {
            return bad("switch_check_interval", "must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", "must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps", "must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.max_updates == Some(0) {
            return bad("max_updates", "must be at least 1");
        }
        if self.tokens_per_update == 0 {
            return bad("tokens_per_update", "must be at least 1");
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens", "must be at least 1");
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("adam_betas", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm", "must be positive");
            }
        }
        for (name, a) in [("alpha_big", self.alpha_big), ("alpha_small", self.alpha_small)] {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(name, "must be a non-negative number");
            }
        }
        if self.eval_every == Some(0) {
            return bad("eval_every", "must be at least 1");
        }
        Ok(())
    }
}
