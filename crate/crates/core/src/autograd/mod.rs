//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every forward op appends one node to the [`Tape`]; node ids are handed out
//! as [`Var`]s and are always larger than the ids of their inputs, so a
//! single reverse sweep over the node list visits each op exactly once in
//! reverse topological order.
//!
//! Conventions:
//! * storage is row-major, shapes are explicit, there is no implicit
//!   broadcasting except the per-channel bias add inside `conv2d`/`linear`;
//! * the subgradient of `relu` and `max_pool2` at a tie/zero is 0 (ties send
//!   the whole gradient to the lowest flat index);
//! * gradients are accumulated across consumers, never overwritten.

pub mod kernels;

use crate::tensor::{matmul_dims, Element, Tensor, TensorError};
use kernels::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Flatten(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics were used (train mode), so the normalisation
        /// itself depends on `x`.
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Element> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of tensors and the ops that produced them.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn finite<T: Element>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a == b {
        Ok(())
    } else {
        Err(TensorError::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// `[n, c, h*w]` view of a 2-D or 4-D activation.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(TensorError::Shape(format!(
            "{op} expects [n, c] or [n, c, h, w], got {shape:?}"
        ))),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Gradient of the last backward pass, if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Drops all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, mut tensor: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        tensor.node_id = Some(id);
        self.nodes.push(Node { tensor, op });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    /// Records an input tensor; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a trainable tensor.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let t = finite("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = finite("add", Tensor::new(self.shape(a).to_vec(), data)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = finite("mul", Tensor::new(self.shape(a).to_vec(), data)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let data = self.data(x).iter().map(|&v| v * s).collect();
        let t = finite("scale", Tensor::new(self.shape(x).to_vec(), data)?)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale(x, s), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: T = self.data(x).iter().copied().sum();
        let t = finite("sum", Tensor::scalar(s))?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sum(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let zero = T::zero();
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > zero { v } else { zero })
            .collect();
        let t = finite("relu", Tensor::new(self.shape(x).to_vec(), data)?)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let t = Tensor::new(vec![n, rest.max(1)], self.data(x).to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Flatten(x), rg))
    }

    /// Zero-padded cross-correlation, `x: [n, c, h, w]`, `w: [oc, c, kh, kw]`,
    /// optional `b: [oc]` broadcast over the spatial axes.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            same_shape("conv2d bias", self.shape(b), &[geom.out_ch])?;
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
        );
        let t = finite("conv2d", Tensor::new(geom.output_shape(), out)?)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batch normalisation with statistics of the batch itself. Returns the
    /// statistics so the caller can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let (n, c, hw) = channel_layout("batch_norm", self.shape(x))?;
        same_shape("batch_norm gamma", self.shape(gamma), &[c])?;
        same_shape("batch_norm beta", self.shape(beta), &[c])?;
        let m = n * hw;
        if m < 2 {
            return Err(TensorError::Statistics(m));
        }
        let xs = self.data(x);
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                s += xs[base..base + hw].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut v = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for &val in &xs[base..base + hw] {
                    let d = val - mu;
                    v += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = v / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std, n, c, hw);
        let t = finite("batch_norm", Tensor::new(self.shape(x).to_vec(), out)?)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_out = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((var_out, BatchStats { mean, var, count: m }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var, TensorError> {
        let (n, c, hw) = channel_layout("batch_norm", self.shape(x))?;
        same_shape("batch_norm gamma", self.shape(gamma), &[c])?;
        same_shape("batch_norm beta", self.shape(beta), &[c])?;
        same_shape("batch_norm running_mean", &[mean.len()], &[c])?;
        same_shape("batch_norm running_var", &[var.len()], &[c])?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, mean, &inv_std, n, c, hw);
        let t = finite("batch_norm", Tensor::new(self.shape(x).to_vec(), out)?)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        hw: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let h = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        (xhat, out)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(TensorError::Shape(format!(
                "max_pool2 expects [n, c, h, w], got {shape:?}"
            )));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::Geometry {
                op: "max_pool2",
                detail: format!("input {h}x{w} too small for a 2x2 window"),
            });
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let t = finite("max_pool2", Tensor::new(vec![n, c, oh, ow], out)?)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(TensorError::Shape(format!(
                "global_avg_pool expects [n, c, h, w], got {shape:?}"
            )));
        };
        let hw = h * w;
        let denom = T::from_usize(hw).unwrap();
        let out = self
            .data(x)
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let t = finite("global_avg_pool", Tensor::new(vec![n, c], out)?)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Affine layer `x . w^T + b`, `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::Dimension {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            same_shape("linear bias", self.shape(b), &[m])?;
        }
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(self.data(b));
            }
        }
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.data(x),
            (k as isize, 1),
            self.data(w),
            (1, k as isize),
            T::one(),
            &mut out,
            (m as isize, 1),
        );
        let t = finite("linear", Tensor::new(vec![n, m], out)?)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Shape("concat of zero tensors".into()));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() != 4 {
            return Err(TensorError::Shape(format!(
                "concat expects [n, c, h, w], got {s0:?}"
            )));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            channels += s[1];
        }
        let (n, hw) = (s0[0], s0[2] * s0[3]);
        let mut out = Vec::with_capacity(n * channels * hw);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let t = Tensor::new(vec![n, channels, s0[2], s0[3]], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean softmax cross-entropy over the batch. Returns the scalar loss
    /// node and the row-wise softmax probabilities.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<(Var, Tensor<T>), TensorError> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape[..] else {
            return Err(TensorError::Shape(format!(
                "softmax_cross_entropy expects [n, k] logits, got {shape:?}"
            )));
        };
        if labels.len() != n {
            return Err(TensorError::Dimension {
                op: "softmax_cross_entropy",
                lhs: shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Label {
                label: bad,
                classes: k,
            });
        }
        let (probs, loss) = softmax_xent_values(self.data(logits), labels, k);
        let probs_t = finite("softmax", Tensor::new(shape, probs.clone())?)?;
        let t = finite("softmax_cross_entropy", Tensor::scalar(loss))?;
        let rg = self.rg(logits);
        let var = self.push(
            t,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        );
        Ok((var, probs_t))
    }

    /// Populates `grad` on every node that requires one with
    /// `d loss / d node`. Nodes that do not reach `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::State(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            self.nodes[i].tensor.grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![T::zero(); node.tensor.len()]);
            }
        }
        Ok(())
    }

    /// Zero-initialised gradient buffer of `v`, or `None` when `v` does not
    /// require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].tensor.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.shape(*a), self.shape(*b)).unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dOut . B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        self.data(*b),
                        (1, n as isize),
                        T::one(),
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += A^T . dOut
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.data(*a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        gb,
                        (n as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for j in 0..s.len() {
                        s[j] += g[j] * bv[j];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for j in 0..s.len() {
                        s[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *k);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for j in 0..s.len() {
                        if xs[j] > T::zero() {
                            s[j] += g[j];
                        }
                    }
                }
            }
            Op::Flatten(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.data(*x);
                let ws = self.data(*w);
                let mut gx = grads[x.0].take();
                if gx.is_none() && self.rg(*x) {
                    gx = Some(vec![T::zero(); xs.len()]);
                }
                let mut gw = grads[w.0].take();
                if gw.is_none() && self.rg(*w) {
                    gw = Some(vec![T::zero(); ws.len()]);
                }
                let mut gb = b.and_then(|b| {
                    grads[b.0]
                        .take()
                        .or_else(|| self.rg(b).then(|| vec![T::zero(); geom.out_ch]))
                });
                kernels::conv2d_backward(
                    geom,
                    xs,
                    ws,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                grads[x.0] = gx;
                grads[w.0] = gw;
                if let Some(b) = b {
                    grads[b.0] = gb;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, hw) = channel_layout("batch_norm", self.shape(*x)).unwrap();
                let gam = self.data(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    s.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                }
                if let Some(s) = self.slot(grads, *beta) {
                    s.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if let Some(s) = self.slot(grads, *x) {
                    let m = T::from_usize(n * hw).unwrap();
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                let mean_g = sum_g[ch] / m;
                                let mean_gx = sum_gx[ch] / m;
                                for j in base..base + hw {
                                    s[j] += k * (g[j] - mean_g - xhat[j] * mean_gx);
                                }
                            } else {
                                for j in base..base + hw {
                                    s[j] += k * g[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&src, &v) in argmax.iter().zip(g) {
                        s[src] += v;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let hw = shape[2] * shape[3];
                let denom = T::from_usize(hw).unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    for (plane, &v) in s.chunks_exact_mut(hw).zip(g) {
                        let d = v / denom;
                        plane.iter_mut().for_each(|p| *p += d);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                if let Some(s) = self.slot(grads, *x) {
                    // dX += dOut . W
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g,
                        (m as isize, 1),
                        self.data(*w),
                        (k as isize, 1),
                        T::one(),
                        s,
                        (k as isize, 1),
                    );
                }
                if let Some(s) = self.slot(grads, *w) {
                    // dW += dOut^T . X
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (1, m as isize),
                        self.data(*x),
                        (k as isize, 1),
                        T::one(),
                        s,
                        (k as isize, 1),
                    );
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(grads, *b) {
                        for row in g.chunks_exact(m) {
                            s.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let shape = self.nodes[i].tensor.shape();
                let (n, total, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(s) = self.slot(grads, p) {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * hw..(b * total + offset + c) * hw];
                            let dst = &mut s[b * c * hw..(b + 1) * c * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / T::from_usize(n).unwrap();
                if let Some(s) = self.slot(grads, *logits) {
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            s[row * k + j] += (probs[row * k + j] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax (max-subtracted) and mean negative log-likelihood.
pub fn softmax_xent_values<T: Element>(logits: &[T], labels: &[usize], k: usize) -> (Vec<T>, T) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        let z = &logits[row * k..(row + 1) * k];
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (j, &v) in z.iter().enumerate() {
            let e = (v - max).exp();
            probs[row * k + j] = e;
            denom += e;
        }
        for p in &mut probs[row * k..(row + 1) * k] {
            *p = *p / denom;
        }
        loss += denom.ln() - (z[label] - max);
    }
    (probs, loss / T::from_usize(labels.len().max(1)).unwrap())
}
