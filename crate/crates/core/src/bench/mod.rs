//! Latency, time-to-accuracy and the cross-model comparison report.

mod baselines;
mod latency;
mod report;
mod tta;

pub use baselines::{paper_baselines, BaselineRow};
pub use latency::{measure_latency, timer_resolution_ns, Infer, LatencyReport, SpinStub, DEFAULT_RUNS, DEFAULT_WARMUP};
pub use report::{emit_comparison, ComparisonReport, ModelRecord, RecordTiming, REPORT_VERSION};
pub use tta::{time_to_accuracy, TimeToAccuracy, DEFAULT_TOP5_THRESHOLD};

use crate::train::TrainError;
use crate::zoo::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
