use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::ImageSet;
use crate::layers::Mode;
use crate::zoo::Model;

const EVAL_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    /// Always `1 - top1_accuracy`.
    pub error_rate: f64,
    pub top1_accuracy: f64,
    pub top5_accuracy: f64,
    /// `confusion[actual][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Position of class `label` when `row` is sorted by descending score, ties
/// broken towards the lower class index. Rank 0 is the argmax.
pub fn rank_of(row: &[f32], label: usize) -> usize {
    let s = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Scores a `[n, k]` logit matrix (row-major) against labels.
pub fn evaluate_logits(logits: &[f32], labels: &[usize], k: usize) -> Result<Evaluation, TrainError> {
    let n = labels.len();
    if n == 0 {
        return Err(TrainError::Evaluation("empty test split".into()));
    }
    if k == 0 || logits.len() != n * k {
        return Err(TrainError::Evaluation(format!(
            "{} logits for {n} samples of {k} classes",
            logits.len()
        )));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut top1, mut top5) = (0usize, 0usize);
    for (row, &y) in logits.chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(TrainError::Evaluation(format!("label {y} out of range for {k} classes")));
        }
        confusion[y][argmax(row)] += 1;
        let r = rank_of(row, y);
        top1 += usize::from(r == 0);
        top5 += usize::from(r < 5);
    }
    let top1_accuracy = top1 as f64 / n as f64;
    Ok(Evaluation {
        count: n,
        error_rate: 1.0 - top1_accuracy,
        top1_accuracy,
        top5_accuracy: top5 as f64 / n as f64,
        confusion,
    })
}

/// Evaluates an eval-mode model on every sample of `set`.
pub fn evaluate(model: &Model<f32>, set: &ImageSet) -> Result<Evaluation, TrainError> {
    if model.mode() != Mode::Eval {
        return Err(TrainError::Evaluation("model must be in eval mode".into()));
    }
    if set.is_empty() {
        return Err(TrainError::Evaluation("empty test split".into()));
    }
    let k = model.config().num_classes;
    let mut logits = Vec::with_capacity(set.len() * k);
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, _) = set.batch(chunk);
        logits.extend_from_slice(model.logits(&x)?.data());
    }
    evaluate_logits(&logits, set.labels(), k)
}

/// Table-style summary of an error series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean_error: f64,
    pub lowest_error: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for one value.
    pub std_error: f64,
}

pub fn run_stats(series: &[f64]) -> Result<ErrorStats, TrainError> {
    if series.is_empty() {
        return Err(TrainError::Stats("empty error series".into()));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::Stats("non-finite value in error series".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let lowest = series.iter().copied().fold(f64::INFINITY, f64::min);
    let highest = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let std = if series.len() < 2 || highest == lowest {
        0.0
    } else {
        (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(ErrorStats {
        mean_error: mean,
        lowest_error: lowest,
        std_error: std,
    })
}
