//! Learning-rate range test: a geometric lr sweep over consecutive batches
//! with an exponentially smoothed loss curve.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{train_step, Sgd};
use super::{TrainConfig, TrainError};
use crate::data::ImageSet;
use crate::layers::Mode;
use crate::zoo::Model;

pub const LOSS_SMOOTHING: f64 = 0.98;
/// The sweep stops once the smoothed loss exceeds this multiple of the best.
pub const DIVERGENCE_FACTOR: f64 = 4.0;

/// Something that can take one optimisation step at a given lr.
pub trait LrProbe {
    /// Returns the loss measured before the update. A non-finite loss or a
    /// divergence error ends the sweep.
    fn step(&mut self, lr: f64) -> Result<f64, TrainError>;
}

/// `f(w) = curvature * w^2 / 2` under plain gradient descent. Steps are
/// stable exactly when `lr < 2 / curvature`.
#[derive(Debug, Clone)]
pub struct QuadraticProbe {
    pub curvature: f64,
    pub w: f64,
}

impl LrProbe for QuadraticProbe {
    fn step(&mut self, lr: f64) -> Result<f64, TrainError> {
        let loss = 0.5 * self.curvature * self.w * self.w;
        self.w -= lr * self.curvature * self.w;
        Ok(loss)
    }
}

/// Trains a private copy of a model on batches drawn from a seeded
/// permutation, cycling through the data as needed.
pub struct ModelProbe<'a> {
    model: Model<f32>,
    data: &'a ImageSet,
    sgd: Sgd,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch: usize,
}

impl<'a> ModelProbe<'a> {
    pub fn new(model: &Model<f32>, data: &'a ImageSet, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Self {
            model: model.clone(),
            data,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            batch_size: cfg.batch_size.min(data.len()).max(1),
            order,
            cursor: 0,
            rng,
            batch: 0,
        }
    }
}

impl LrProbe for ModelProbe<'_> {
    fn step(&mut self, lr: f64) -> Result<f64, TrainError> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        let (loss, grads) = train_step(&mut self.model, self.data, &idx, self.batch, lr)?;
        self.sgd.step(&mut self.model, &grads, lr);
        self.model.set_mode(Mode::Train);
        self.batch += 1;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrFindConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps: usize,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-5,
            lr_max: 10.0,
            steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrCurve {
    /// `(lr, smoothed loss)` per completed step.
    pub points: Vec<(f64, f64)>,
    /// Lr at the steepest descent of the smoothed loss against `ln lr`.
    pub suggested_lr: f64,
    pub stopped_early: bool,
}

pub fn lr_find(probe: &mut dyn LrProbe, cfg: &LrFindConfig) -> Result<LrCurve, TrainError> {
    let LrFindConfig { lr_min, lr_max, steps } = *cfg;
    if !(lr_min > 0.0 && lr_max.is_finite() && lr_min < lr_max) {
        return Err(TrainError::Config(format!("need 0 < lr_min < lr_max, got {lr_min} and {lr_max}")));
    }
    if (lr_max / lr_min).ln() < 1e-6 {
        return Err(TrainError::Config(format!("degenerate sweep from {lr_min} to {lr_max}")));
    }
    if steps < 10 {
        return Err(TrainError::Config(format!("need at least 10 steps, got {steps}")));
    }
    let ratio = (lr_max / lr_min).powf(1.0 / (steps - 1) as f64);
    let mut points = Vec::with_capacity(steps);
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut stopped_early = false;
    for i in 0..steps {
        let lr = lr_min * ratio.powi(i as i32);
        let loss = match probe.step(lr) {
            Ok(l) => l,
            Err(TrainError::Divergence { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            if i == 0 {
                return Err(TrainError::Config(format!("loss is non-finite at lr_min {lr_min}; lower it")));
            }
            stopped_early = true;
            break;
        }
        avg = LOSS_SMOOTHING * avg + (1.0 - LOSS_SMOOTHING) * loss;
        let smoothed = avg / (1.0 - LOSS_SMOOTHING.powi(i as i32 + 1));
        points.push((lr, smoothed));
        if smoothed > DIVERGENCE_FACTOR * best {
            stopped_early = true;
            break;
        }
        best = best.min(smoothed);
    }
    if points.len() < 3 {
        return Err(TrainError::Config(format!(
            "sweep stopped after {} steps, too few to suggest an lr",
            points.len()
        )));
    }
    let slope = |i: usize| {
        let (l0, s0) = points[i - 1];
        let (l1, s1) = points[i + 1];
        (s1 - s0) / (l1.ln() - l0.ln())
    };
    let steepest = (1..points.len() - 1)
        .min_by(|&a, &b| slope(a).total_cmp(&slope(b)))
        .expect("at least one interior point");
    Ok(LrCurve {
        suggested_lr: points[steepest].0,
        points,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_suggestion_is_below_stability_limit() {
        for curvature in [0.5, 1.0, 4.0] {
            let mut probe = QuadraticProbe { curvature, w: 1.0 };
            let cfg = LrFindConfig {
                lr_min: 1e-4,
                lr_max: 100.0,
                steps: 200,
            };
            let curve = lr_find(&mut probe, &cfg).unwrap();
            assert!(curve.stopped_early, "sweep must blow up past 2/c");
            let limit = 2.0 / curvature;
            assert!(curve.suggested_lr > cfg.lr_min && curve.suggested_lr < limit, "{}", curve.suggested_lr);
            let last = curve.points.last().unwrap();
            assert!(last.0 > limit);
            let min = curve.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            assert!(curve.points[0].1 > min);
        }
    }

    #[test]
    fn degenerate_and_short_sweeps_rejected() {
        let mut probe = QuadraticProbe { curvature: 1.0, w: 1.0 };
        let max = 1.0;
        let degenerate = LrFindConfig {
            lr_min: max * (1.0 - 1e-12),
            lr_max: max,
            steps: 50,
        };
        assert!(lr_find(&mut probe, &degenerate).is_err());
        let short = LrFindConfig { steps: 9, ..Default::default() };
        assert!(lr_find(&mut probe, &short).is_err());
    }

    #[test]
    fn non_finite_first_loss_is_config_error() {
        struct Nan;
        impl LrProbe for Nan {
            fn step(&mut self, _: f64) -> Result<f64, TrainError> {
                Ok(f64::NAN)
            }
        }
        let err = lr_find(&mut Nan, &LrFindConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)), "{err}");
    }
}
