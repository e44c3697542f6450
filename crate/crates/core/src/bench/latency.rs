use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::layers::Mode;
use crate::tensor::Tensor;
use crate::zoo::{Model, ModelError};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_RUNS: usize = 100;

/// Single-image inference, as timed by [`measure_latency`].
pub trait Infer {
    fn name(&self) -> String;
    fn infer(&self, frame: &Tensor<f32>) -> Result<(), ModelError>;
}

impl Infer for Model<f32> {
    fn name(&self) -> String {
        Model::name(self)
    }

    fn infer(&self, frame: &Tensor<f32>) -> Result<(), ModelError> {
        if self.mode() != Mode::Eval {
            return Err(ModelError::Config("inference requires eval mode".into()));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(frame.shape());
        let batch = frame.clone().reshape(shape)?;
        self.logits(&batch).map(|_| ())
    }
}

/// Busy-waits for a fixed duration per call; the calibrated oracle for the
/// harness itself.
#[derive(Debug, Clone, Copy)]
pub struct SpinStub {
    pub duration: Duration,
}

impl Infer for SpinStub {
    fn name(&self) -> String {
        format!("spin_{}us", self.duration.as_micros())
    }

    fn infer(&self, _: &Tensor<f32>) -> Result<(), ModelError> {
        let start = Instant::now();
        while start.elapsed() < self.duration {
            std::hint::spin_loop();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    /// Execution profile label; only `cpu` is produced.
    pub profile: String,
    pub n_warmup: usize,
    pub n_runs: usize,
    pub samples_ns: Vec<u64>,
    pub mean_ns: f64,
    pub median_ns: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ns: u64,
    pub coefficient_of_variation: f64,
    pub timer_resolution_ns: u64,
    pub warning: Option<String>,
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as u64);
    }
    best.max(1)
}

/// Times `n_runs` single-frame inferences after `n_warmup` untimed ones.
pub fn measure_latency(model: &dyn Infer, frame: &Tensor<f32>, n_warmup: usize, n_runs: usize) -> Result<LatencyReport, BenchError> {
    if n_warmup < 1 || n_runs < 10 {
        return Err(BenchError::Precondition(format!(
            "need n_warmup >= 1 and n_runs >= 10, got {n_warmup} and {n_runs}"
        )));
    }
    for _ in 0..n_warmup {
        model.infer(frame)?;
    }
    let mut samples_ns = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t = Instant::now();
        model.infer(frame)?;
        samples_ns.push((t.elapsed().as_nanos() as u64).max(1));
    }
    let n = n_runs as f64;
    let mean = samples_ns.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = samples_ns.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = samples_ns.clone();
    sorted.sort_unstable();
    let median = if n_runs % 2 == 1 {
        sorted[n_runs / 2] as f64
    } else {
        (sorted[n_runs / 2 - 1] as f64 + sorted[n_runs / 2] as f64) / 2.0
    };
    let p95 = sorted[(0.95 * n).ceil() as usize - 1];
    let resolution = timer_resolution_ns();
    let warning = (resolution as f64 > 0.01 * median).then(|| {
        format!("timer resolution {resolution} ns exceeds 1% of the median run ({median} ns)")
    });
    Ok(LatencyReport {
        model: model.name(),
        profile: "cpu".into(),
        n_warmup,
        n_runs,
        samples_ns,
        mean_ns: mean,
        median_ns: median,
        p95_ns: p95,
        coefficient_of_variation: var.sqrt() / mean,
        timer_resolution_ns: resolution,
        warning,
    })
}
