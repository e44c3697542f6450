use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::evaluate;
use super::schedule::{default_schedulers, SchedulePoint};
use super::{TrainConfig, TrainError};
use crate::autograd::Tape;
use crate::data::ImageSet;
use crate::layers::{self, Mode};
use crate::tensor::TensorError;
use crate::zoo::{Model, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    /// Global 0-based batch index across all cycles.
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// 1-based.
    pub cycle: usize,
    /// Mean batch loss over the cycle.
    pub train_loss: f64,
    pub test_error_rate: f64,
    pub top1_accuracy: f64,
    pub top5_accuracy: f64,
}

/// Wall-clock measurements; the only non-deterministic part of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    /// Cumulative seconds at the end of each cycle (training + evaluation).
    pub cycle_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model: String,
    pub config: TrainConfig,
    pub batch_losses: Vec<BatchLoss>,
    pub cycle_records: Vec<CycleRecord>,
    /// Confusion matrix of the last evaluated cycle.
    pub confusion: Vec<Vec<usize>>,
    pub timing: RunTiming,
}

impl RunMetrics {
    pub fn without_timing(&self) -> Self {
        Self {
            timing: RunTiming::default(),
            ..self.clone()
        }
    }

    pub fn test_errors(&self) -> Vec<f64> {
        self.cycle_records.iter().map(|r| r.test_error_rate).collect()
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on every parameter:
/// `v = mu * v + (g + lambda * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model<f32>, grads: &[Vec<f32>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        }
        let lr = lr as f32;
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in p.tensor.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}

fn diverged(batch: usize, lr: f64) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Tensor(t @ TensorError::NonFinite { .. }) => TrainError::Divergence {
            batch,
            lr,
            detail: t.to_string(),
        },
        other => TrainError::Model(other),
    }
}

/// One forward/backward step in train mode. Returns the batch loss and the
/// parameter gradients; running statistics are applied to `model`.
pub(crate) fn train_step(
    model: &mut Model<f32>,
    set: &ImageSet,
    indices: &[usize],
    batch: usize,
    lr: f64,
) -> Result<(f64, Vec<Vec<f32>>), TrainError> {
    let div = diverged(batch, lr);
    model.set_mode(Mode::Train);
    let (x, y) = set.batch(indices);
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let pass = model.forward(&mut tape, input).map_err(&div)?;
    let (loss, _) = layers::softmax_cross_entropy(&mut tape, pass.logits, &y).map_err(|e| div(e.into()))?;
    tape.backward(loss).map_err(|e| div(e.into()))?;
    let loss_value = tape.value(loss).data()[0] as f64;
    let grads = pass
        .params
        .iter()
        .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();
    model.apply_running_stats(pass.running_stats);
    Ok((loss_value, grads))
}

/// [`train_with`] without early stopping.
pub fn train(model: &mut Model<f32>, train_set: &ImageSet, test_set: &ImageSet, cfg: &TrainConfig) -> Result<RunMetrics, TrainError> {
    train_with(model, train_set, test_set, cfg, |_| ControlFlow::Continue(()))
}

/// Trains `model` in place, evaluating on `test_set` after every cycle.
/// `after_cycle` sees each record and may stop the run early. The model
/// is left in eval mode.
pub fn train_with(
    model: &mut Model<f32>,
    train_set: &ImageSet,
    test_set: &ImageSet,
    cfg: &TrainConfig,
    mut after_cycle: impl FnMut(&CycleRecord) -> ControlFlow<()>,
) -> Result<RunMetrics, TrainError> {
    cfg.validate()?;
    let k = model.config().num_classes;
    if train_set.class_names().len() != k {
        return Err(TrainError::Config(format!(
            "model has {k} classes, data has {}",
            train_set.class_names().len()
        )));
    }
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let schedule = default_schedulers().get(&cfg.scheduler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let steps_per_cycle = train_set.len().div_ceil(cfg.batch_size);
    let start = Instant::now();
    let mut metrics = RunMetrics {
        model: model.name(),
        config: cfg.clone(),
        batch_losses: Vec::with_capacity(cfg.cycles * steps_per_cycle),
        cycle_records: Vec::with_capacity(cfg.cycles),
        confusion: Vec::new(),
        timing: RunTiming::default(),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut global = 0;
    for cycle in 0..cfg.cycles {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = schedule.lr(
                cfg.base_lr,
                SchedulePoint {
                    cycle,
                    cycles: cfg.cycles,
                    step,
                    steps_per_cycle,
                },
            );
            let (loss, grads) = train_step(model, train_set, chunk, global, lr)?;
            sgd.step(model, &grads, lr);
            if model.params().iter().any(|p| !p.tensor.is_finite()) {
                return Err(TrainError::Divergence {
                    batch: global,
                    lr,
                    detail: "non-finite parameter after update".into(),
                });
            }
            metrics.batch_losses.push(BatchLoss { batch: global, loss, lr });
            loss_sum += loss;
            global += 1;
        }
        model.set_mode(Mode::Eval);
        let eval = evaluate(model, test_set)?;
        let record = CycleRecord {
            cycle: cycle + 1,
            train_loss: loss_sum / steps_per_cycle as f64,
            test_error_rate: eval.error_rate,
            top1_accuracy: eval.top1_accuracy,
            top5_accuracy: eval.top5_accuracy,
        };
        metrics.confusion = eval.confusion;
        metrics.timing.cycle_seconds.push(start.elapsed().as_secs_f64());
        let flow = after_cycle(&record);
        metrics.cycle_records.push(record);
        if flow.is_break() {
            break;
        }
    }
    model.set_mode(Mode::Eval);
    metrics.timing.total_seconds = start.elapsed().as_secs_f64();
    Ok(metrics)
}
