use serde::{Deserialize, Serialize};

use super::schedule::default_schedulers;
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Full passes over the training split.
    pub cycles: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Scheduler registry name: `constant`, `step` or `one_cycle`.
    pub scheduler: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cycles: 12,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            scheduler: "step".into(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.cycles < 1 {
            return bad("cycles must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        default_schedulers().get(&self.scheduler)?;
        Ok(())
    }
}
