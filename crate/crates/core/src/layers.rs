//! Network layer primitives built on the autograd tape.
//!
//! Parameter structs hold tape [`Var`]s, so gradients for a layer are read
//! back with [`Tape::grad`] after `backward`. Running batch-norm statistics
//! are plain vectors owned by [`BatchNormState`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::{Element, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Fan-in scaled normal initialisation, `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal<T: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Var,
    /// `[out_ch]`
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    /// Registers freshly initialised square-kernel parameters on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Element, R: Rng>(
        tape: &mut Tape<T>,
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = tape.param(kaiming_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let bias = tape.param(Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }
}

pub fn conv2d<T: Element>(tape: &mut Tape<T>, x: Var, p: &Conv2dParams) -> Result<Var, TensorError> {
    tape.conv2d(x, p.weight, Some(p.bias), p.stride, p.padding)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Element> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: Mode,
}

impl<T: Element> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn init(tape: &mut Tape<T>, channels: usize, mode: Mode) -> Self {
        Self {
            gamma: tape.param(Tensor::full(&[channels], T::one())),
            beta: tape.param(Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            eps: T::from_f64_lossy(BN_EPS),
            mode,
        }
    }
}

/// Train mode normalises with batch statistics and folds them into the
/// running estimates (`run <- (1 - momentum) * run + momentum * batch`,
/// using the unbiased batch variance); eval mode uses the running estimates
/// only.
pub fn batch_norm<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    s: &mut BatchNormState<T>,
) -> Result<Var, TensorError> {
    match s.mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm_train(x, s.gamma, s.beta, s.eps)?;
            let keep = T::one() - s.momentum;
            let m = T::from_usize(stats.count).unwrap();
            let unbias = m / (m - T::one());
            for c in 0..stats.mean.len() {
                s.running_mean[c] = keep * s.running_mean[c] + s.momentum * stats.mean[c];
                s.running_var[c] = keep * s.running_var[c] + s.momentum * stats.var[c] * unbias;
            }
            Ok(y)
        }
        Mode::Eval => tape.batch_norm_eval(x, s.gamma, s.beta, &s.running_mean, &s.running_var, s.eps),
    }
}

pub fn relu<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
    tape.relu(x)
}

/// 2x2 window, stride 2.
pub fn max_pool2<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
    tape.max_pool2(x)
}

pub fn global_avg_pool<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
    tape.global_avg_pool(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Var,
    /// `[out]`
    pub bias: Var,
}

impl LinearParams {
    pub fn init<T: Element, R: Rng>(tape: &mut Tape<T>, rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: tape.param(kaiming_normal(&[outputs, inputs], inputs, rng)),
            bias: tape.param(Tensor::zeros(&[outputs])),
        }
    }
}

pub fn linear<T: Element>(tape: &mut Tape<T>, x: Var, p: &LinearParams) -> Result<Var, TensorError> {
    tape.linear(x, p.weight, Some(p.bias))
}

/// Mean cross-entropy of `softmax(logits)` against `labels`; also returns
/// the probabilities.
pub fn softmax_cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
) -> Result<(Var, Tensor<T>), TensorError> {
    tape.softmax_cross_entropy(logits, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut<T: Element> {
    Identity,
    /// 1x1 convolution plus batch norm, used when stride or width changes.
    Projection {
        conv: Conv2dParams,
        bn: BatchNormState<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockParams<T: Element> {
    pub conv1: Conv2dParams,
    pub bn1: BatchNormState<T>,
    pub conv2: Conv2dParams,
    pub bn2: BatchNormState<T>,
    pub shortcut: Shortcut<T>,
}

impl<T: Element> ResidualBlockParams<T> {
    /// Post-activation basic block; a projection shortcut is added when
    /// `stride != 1` or `in_ch != out_ch`.
    pub fn init<R: Rng>(
        tape: &mut Tape<T>,
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        mode: Mode,
    ) -> Self {
        let conv1 = Conv2dParams::init(tape, rng, in_ch, out_ch, 3, stride, 1);
        let bn1 = BatchNormState::init(tape, out_ch, mode);
        let conv2 = Conv2dParams::init(tape, rng, out_ch, out_ch, 3, 1, 1);
        let bn2 = BatchNormState::init(tape, out_ch, mode);
        let shortcut = if stride != 1 || in_ch != out_ch {
            Shortcut::Projection {
                conv: Conv2dParams::init(tape, rng, in_ch, out_ch, 1, stride, 0),
                bn: BatchNormState::init(tape, out_ch, mode),
            }
        } else {
            Shortcut::Identity
        };
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`
pub fn residual_block_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &mut ResidualBlockParams<T>,
) -> Result<Var, TensorError> {
    let h = conv2d(tape, x, &p.conv1)?;
    let h = batch_norm(tape, h, &mut p.bn1)?;
    let h = relu(tape, h)?;
    let h = conv2d(tape, h, &p.conv2)?;
    let branch = batch_norm(tape, h, &mut p.bn2)?;
    let skip = match &mut p.shortcut {
        Shortcut::Identity => x,
        Shortcut::Projection { conv, bn } => {
            let s = conv2d(tape, x, conv)?;
            batch_norm(tape, s, bn)?
        }
    };
    if tape.shape(branch) != tape.shape(skip) {
        return Err(TensorError::Geometry {
            op: "residual_block",
            detail: format!(
                "branch {:?} vs shortcut {:?}",
                tape.shape(branch),
                tape.shape(skip)
            ),
        });
    }
    let sum = tape.add(branch, skip)?;
    relu(tape, sum)
}
