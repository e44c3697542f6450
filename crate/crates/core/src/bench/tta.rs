use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::data::ImageSet;
use crate::train::{train_with, RunMetrics, TrainConfig};
use crate::zoo::{Model, ModelConfig};

pub const DEFAULT_TOP5_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeToAccuracy {
    pub threshold: f64,
    /// First 1-based cycle whose top-5 accuracy met the threshold.
    pub cycles: Option<usize>,
    /// Cumulative wall seconds at that cycle.
    pub seconds: Option<f64>,
    pub cycles_run: usize,
    pub metrics: RunMetrics,
}

impl TimeToAccuracy {
    pub fn reached(&self) -> bool {
        self.cycles.is_some()
    }
}

/// Trains a fresh model (seeded by `model_seed`) until its top-5 test
/// accuracy reaches `threshold` or `max_cycles` have run. Not reaching the
/// threshold is a regular outcome.
pub fn time_to_accuracy(
    model_cfg: &ModelConfig,
    model_seed: u64,
    train_set: &ImageSet,
    test_set: &ImageSet,
    train_cfg: &TrainConfig,
    threshold: f64,
    max_cycles: usize,
) -> Result<TimeToAccuracy, BenchError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(BenchError::Precondition(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    if max_cycles < 1 {
        return Err(BenchError::Precondition("max_cycles must be at least 1".into()));
    }
    let mut model = Model::build(model_cfg, model_seed)?;
    // the lr schedule keeps its full horizon; stopping early must not
    // compress it
    let cfg = TrainConfig {
        cycles: train_cfg.cycles.max(max_cycles),
        ..train_cfg.clone()
    };
    let mut hit = None;
    let metrics = train_with(&mut model, train_set, test_set, &cfg, |rec| {
        if rec.top5_accuracy >= threshold {
            hit = Some(rec.cycle);
            ControlFlow::Break(())
        } else if rec.cycle >= max_cycles {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    Ok(TimeToAccuracy {
        threshold,
        cycles: hit,
        seconds: hit.map(|c| metrics.timing.cycle_seconds[c - 1]),
        cycles_run: metrics.cycle_records.len(),
        metrics,
    })
}
