//! Comparison report across trained models, plus CSV/JSON emission.
//!
//! Everything wall-clock related sits under `timing` keys (and in
//! `bubble.csv`); all other output is a pure function of the records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::baselines::{paper_baselines, BaselineRow};
use super::latency::LatencyReport;
use super::BenchError;
use crate::train::{run_stats, ErrorStats, RunMetrics};
use crate::zoo::Model;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordTiming {
    pub train_seconds: f64,
    pub time_to_threshold_seconds: Option<f64>,
    pub latency: Option<LatencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub family: String,
    /// Blocks per stage.
    pub depth: usize,
    pub weighted_layers: usize,
    pub param_count: usize,
    pub model_size_bytes: usize,
    pub activation_batch: usize,
    pub peak_activation_bytes: usize,
    pub error_stats: ErrorStats,
    pub final_top1_accuracy: f64,
    pub error_curve: Vec<f64>,
    pub loss_curve: Vec<f64>,
    pub top5_curve: Vec<f64>,
    pub threshold: f64,
    pub cycles_to_threshold: Option<usize>,
    pub timing: RecordTiming,
}

impl ModelRecord {
    /// Summarises a finished run of `model`. Activation memory is the
    /// analytic training footprint at the run's batch size.
    pub fn from_run(model: &Model<f32>, metrics: &RunMetrics, threshold: f64) -> Result<Self, BenchError> {
        let errors = metrics.test_errors();
        let error_stats = run_stats(&errors)?;
        let top5_curve: Vec<f64> = metrics.cycle_records.iter().map(|r| r.top5_accuracy).collect();
        let hit = top5_curve.iter().position(|&a| a >= threshold);
        let batch = metrics.config.batch_size;
        let cfg = model.config();
        Ok(Self {
            name: model.name(),
            family: cfg.family.clone(),
            depth: cfg.blocks_per_stage,
            weighted_layers: model.weighted_layer_names().len(),
            param_count: model.param_count(),
            model_size_bytes: model.size_bytes(),
            activation_batch: batch,
            peak_activation_bytes: model.peak_activation_bytes(batch)?,
            error_stats,
            final_top1_accuracy: metrics.cycle_records.last().map_or(0.0, |r| r.top1_accuracy),
            error_curve: errors,
            loss_curve: metrics.cycle_records.iter().map(|r| r.train_loss).collect(),
            top5_curve,
            threshold,
            cycles_to_threshold: hit.map(|i| i + 1),
            timing: RecordTiming {
                train_seconds: metrics.timing.total_seconds,
                time_to_threshold_seconds: hit.and_then(|i| metrics.timing.cycle_seconds.get(i).copied()),
                latency: None,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub version: u32,
    pub dataset: String,
    pub units: BTreeMap<String, String>,
    pub std_error_definition: String,
    pub records: Vec<ModelRecord>,
    /// Published numbers on a different dataset and model scale, for
    /// display next to the measured records only.
    pub paper_baselines: Vec<BaselineRow>,
    pub layout: Vec<String>,
}

const LAYOUT: [&str; 5] = [
    "table.csv: model,dataset,std_error,lowest_error,mean_error per measured model",
    "paper_baselines.csv: published rows in the same columns",
    "cycles.csv: per-cycle train loss, test error, top-1 and top-5 accuracy",
    "bubble.csv: final top-1 accuracy, mean latency and model size (latency is wall-clock)",
    "report.json: this report; wall-clock values live under `timing` keys",
];

impl ComparisonReport {
    pub fn new(dataset: &str, records: Vec<ModelRecord>) -> Self {
        let units = [
            ("latency", "ns"),
            ("time", "s"),
            ("model_size", "bytes"),
            ("activations", "bytes"),
            ("error", "fraction"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            version: REPORT_VERSION,
            dataset: dataset.into(),
            units,
            std_error_definition: "sample standard deviation (n - 1) of the per-cycle test error".into(),
            records,
            paper_baselines: paper_baselines(),
            layout: LAYOUT.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for rec in &mut r.records {
            rec.timing = RecordTiming::default();
        }
        r
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("model,dataset,std_error,lowest_error,mean_error\n");
        for r in &self.records {
            let s = r.error_stats;
            let _ = writeln!(out, "{},{},{},{},{}", r.name, self.dataset, s.std_error, s.lowest_error, s.mean_error);
        }
        out
    }

    pub fn baselines_csv(&self) -> String {
        let mut out = String::from("model,dataset,std_error,lowest_error,mean_error\n");
        for b in &self.paper_baselines {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                b.model, b.dataset, b.std_error, b.lowest_error, b.mean_error
            );
        }
        out
    }

    pub fn cycles_csv(&self) -> String {
        let mut out = String::from("model,cycle,train_loss,test_error_rate,top5_accuracy\n");
        for r in &self.records {
            for (i, ((loss, err), top5)) in r.loss_curve.iter().zip(&r.error_curve).zip(&r.top5_curve).enumerate() {
                let _ = writeln!(out, "{},{},{loss},{err},{top5}", r.name, i + 1);
            }
        }
        out
    }

    pub fn bubble_csv(&self) -> String {
        let mut out = String::from("model,top1_accuracy,mean_latency_ms,model_size_bytes\n");
        for r in &self.records {
            let latency = r
                .timing
                .latency
                .as_ref()
                .map_or(String::new(), |l| (l.mean_ns / 1e6).to_string());
            let _ = writeln!(out, "{},{},{latency},{}", r.name, r.final_top1_accuracy, r.model_size_bytes);
        }
        out
    }
}

/// Writes the report files into `dir` and returns their paths.
pub fn emit_comparison(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    if report.records.is_empty() {
        return Err(BenchError::Precondition("comparison needs at least one model record".into()));
    }
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| BenchError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let files = [
        ("table.csv", report.table_csv()),
        ("paper_baselines.csv", report.baselines_csv()),
        ("cycles.csv", report.cycles_csv()),
        ("bubble.csv", report.bubble_csv()),
        ("report.json", report.to_json()),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
