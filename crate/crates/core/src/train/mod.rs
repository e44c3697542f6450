//! SGD training, learning-rate range test, evaluation and run statistics.

mod config;
mod engine;
mod lr_find;
mod metrics;
mod schedule;

pub use config::TrainConfig;
pub use engine::{train, train_with, BatchLoss, CycleRecord, RunMetrics, RunTiming, Sgd};
pub use lr_find::{lr_find, LrCurve, LrFindConfig, LrProbe, ModelProbe, QuadraticProbe, LOSS_SMOOTHING, DIVERGENCE_FACTOR};
pub use metrics::{evaluate, evaluate_logits, rank_of, run_stats, ErrorStats, Evaluation};
pub use schedule::{default_schedulers, Constant, LrSchedule, OneCycle, SchedulePoint, SchedulerRegistry, StepDecay};

use crate::data::DataError;
use crate::tensor::TensorError;
use crate::zoo::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at batch {batch} (lr {lr:e}): {detail}")]
    Divergence { batch: usize, lr: f64, detail: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
