use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{LayerGraph, LayerKind, ParamInit, ParamSpec};
use super::registry::{default_registry, ArchitectureRegistry};
use super::{ModelConfig, ModelError};
use crate::autograd::{Tape, Var};
use crate::layers::{self, kaiming_normal, BatchNormState, Conv2dParams, LinearParams, Mode};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Output of one forward pass through a [`Model`] on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass<T: Element> {
    /// `[batch, num_classes]`
    pub logits: Var,
    /// Tape handles of the model parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Output handle of every graph node.
    pub nodes: Vec<Var>,
    /// Updated running statistics per batch-norm node (train mode only):
    /// `(buffer index of running_mean, mean, var)`.
    pub running_stats: Vec<(usize, Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradNorm {
    pub layer: String,
    pub norm: f64,
}

/// A built network: config, wiring and parameter values.
#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    graph: LayerGraph,
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
    /// Index of the first parameter / buffer owned by each graph node.
    node_params: Vec<Option<usize>>,
    node_buffers: Vec<Option<usize>>,
    class_names: Vec<String>,
    mode: Mode,
}

/// `f32` model from the default registry.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model<f32>, ModelError> {
    Model::build(config, seed)
}

fn index_by_node(specs: &[ParamSpec], nodes: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; nodes];
    for (i, s) in specs.iter().enumerate() {
        out[s.node].get_or_insert(i);
    }
    out
}

fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i:02}")).collect()
}

impl<T: Element> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build_with(default_registry(), config, seed)
    }

    /// Deterministic in `(config, seed)`: parameters are drawn in
    /// [`LayerGraph::param_specs`] order from one seeded stream.
    pub fn build_with(registry: &ArchitectureRegistry, config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let graph = registry.build_graph(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = |spec: &ParamSpec, rng: &mut ChaCha8Rng| -> NamedTensor<T> {
            let tensor = match spec.init {
                ParamInit::Kaiming { fan_in } => kaiming_normal(&spec.shape, fan_in, rng),
                ParamInit::Zeros => Tensor::zeros(&spec.shape),
                ParamInit::Ones => Tensor::full(&spec.shape, T::one()),
            };
            NamedTensor {
                name: spec.name.clone(),
                tensor,
            }
        };
        let param_specs = graph.param_specs();
        let buffer_specs = graph.buffer_specs();
        let params = param_specs.iter().map(|s| init(s, &mut rng)).collect();
        let buffers = buffer_specs.iter().map(|s| init(s, &mut rng)).collect();
        Self::assemble(config.clone(), graph, params, buffers, default_class_names(config.num_classes))
    }

    pub(crate) fn assemble(
        config: ModelConfig,
        graph: LayerGraph,
        params: Vec<NamedTensor<T>>,
        buffers: Vec<NamedTensor<T>>,
        class_names: Vec<String>,
    ) -> Result<Self, ModelError> {
        let param_specs = graph.param_specs();
        let buffer_specs = graph.buffer_specs();
        for (specs, values, what) in [(&param_specs, &params, "parameter"), (&buffer_specs, &buffers, "buffer")] {
            if specs.len() != values.len() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {} {what}s, found {}",
                    specs.len(),
                    values.len()
                )));
            }
            for (s, v) in specs.iter().zip(values.iter()) {
                if s.name != v.name || s.shape != v.tensor.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "{what} mismatch: expected {} {:?}, found {} {:?}",
                        s.name,
                        s.shape,
                        v.name,
                        v.tensor.shape()
                    )));
                }
            }
        }
        if class_names.len() != config.num_classes {
            return Err(ModelError::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.num_classes
            )));
        }
        let n = graph.nodes().len();
        Ok(Self {
            node_params: index_by_node(&param_specs, n),
            node_buffers: index_by_node(&buffer_specs, n),
            config,
            graph,
            params,
            buffers,
            class_names,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn name(&self) -> String {
        format!("{}-n{}", self.config.family, self.config.blocks_per_stage)
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<(), ModelError> {
        if names.len() != self.config.num_classes {
            return Err(ModelError::Config(format!(
                "{} class names for {} classes",
                names.len(),
                self.config.num_classes
            )));
        }
        self.class_names = names;
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameter count times element width.
    pub fn size_bytes(&self) -> usize {
        self.param_count() * T::BYTES
    }

    /// Analytic bytes of activations retained for backward in one training
    /// step on a batch of `batch` images.
    pub fn peak_activation_bytes(&self, batch: usize) -> Result<usize, ModelError> {
        self.graph.retained_activation_bytes(batch, T::BYTES)
    }

    /// Conv and linear layer names, input to output.
    pub fn weighted_layer_names(&self) -> Vec<String> {
        self.graph
            .weighted_layers()
            .into_iter()
            .map(|i| self.graph.nodes()[i].name.clone())
            .collect()
    }

    /// Hash of every parameter and buffer bit pattern.
    pub fn param_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params.iter().chain(&self.buffers) {
            p.name.hash(&mut h);
            for v in p.tensor.data() {
                v.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Records the network on `tape` in the model's current mode.
    /// `input` must be `[batch, c, h, w]` matching the configured input size.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<ForwardPass<T>, ModelError> {
        let expected = self.graph.input_shape();
        let shape = tape.shape(input);
        if shape.len() != expected.len() + 1 || &shape[1..] != expected {
            return Err(ModelError::Graph {
                layer: "input".into(),
                detail: format!("expects [batch, {expected:?}], got {shape:?}"),
            });
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.tensor.clone())).collect();
        let mut outs: Vec<Var> = Vec::with_capacity(self.graph.nodes().len());
        let mut running_stats = Vec::new();
        for (i, node) in self.graph.nodes().iter().enumerate() {
            let arg = |k: usize| outs[node.inputs[k]];
            let p0 = self.node_params[i];
            let out = match &node.kind {
                LayerKind::Input { .. } => input,
                LayerKind::Conv { stride, padding, .. } => {
                    let p = p0.expect("conv owns params");
                    let conv = Conv2dParams {
                        weight: params[p],
                        bias: params[p + 1],
                        stride: *stride,
                        padding: *padding,
                    };
                    layers::conv2d(tape, arg(0), &conv)?
                }
                LayerKind::BatchNorm { .. } => {
                    let p = p0.expect("batch norm owns params");
                    let b = self.node_buffers[i].expect("batch norm owns buffers");
                    let mut state = BatchNormState {
                        gamma: params[p],
                        beta: params[p + 1],
                        running_mean: self.buffers[b].tensor.data().to_vec(),
                        running_var: self.buffers[b + 1].tensor.data().to_vec(),
                        momentum: T::from_f64_lossy(layers::BN_MOMENTUM),
                        eps: T::from_f64_lossy(layers::BN_EPS),
                        mode: self.mode,
                    };
                    let y = layers::batch_norm(tape, arg(0), &mut state)?;
                    if self.mode == Mode::Train {
                        running_stats.push((b, state.running_mean, state.running_var));
                    }
                    y
                }
                LayerKind::Relu => layers::relu(tape, arg(0))?,
                LayerKind::Add => tape.add(arg(0), arg(1))?,
                LayerKind::Concat => {
                    let parts: Vec<Var> = node.inputs.iter().map(|&j| outs[j]).collect();
                    tape.concat_channels(&parts)?
                }
                LayerKind::MaxPool2 => layers::max_pool2(tape, arg(0))?,
                LayerKind::GlobalAvgPool => layers::global_avg_pool(tape, arg(0))?,
                LayerKind::Flatten => tape.flatten(arg(0))?,
                LayerKind::Linear { .. } => {
                    let p = p0.expect("linear owns params");
                    let lin = LinearParams {
                        weight: params[p],
                        bias: params[p + 1],
                    };
                    layers::linear(tape, arg(0), &lin)?
                }
            };
            outs.push(out);
        }
        Ok(ForwardPass {
            logits: *outs.last().expect("graph has nodes"),
            params,
            nodes: outs,
            running_stats,
        })
    }

    /// Stores the running statistics produced by a train-mode pass.
    pub fn apply_running_stats(&mut self, stats: Vec<(usize, Vec<T>, Vec<T>)>) {
        for (b, mean, var) in stats {
            self.buffers[b].tensor.data_mut().copy_from_slice(&mean);
            self.buffers[b + 1].tensor.data_mut().copy_from_slice(&var);
        }
    }

    /// Forward pass without keeping the tape; returns `[batch, classes]`
    /// logits. Uses the current mode but never touches running statistics.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.forward(&mut tape, x)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Per-layer L2 norm of the loss gradient (weight and bias together)
    /// for every conv/linear layer after one forward+backward on `batch`.
    /// Parameters and running statistics are left untouched.
    pub fn gradient_flow_probe(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<Vec<LayerGradNorm>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.forward(&mut tape, x)?;
        let (loss, _) = layers::softmax_cross_entropy(&mut tape, pass.logits, labels)?;
        tape.backward(loss)?;
        let mut out = Vec::new();
        for i in self.graph.weighted_layers() {
            let p = self.node_params[i].expect("weighted layer owns params");
            let sq: f64 = [params_grad(&tape, pass.params[p]), params_grad(&tape, pass.params[p + 1])]
                .into_iter()
                .flatten()
                .map(|g| g.to_f64_lossy().powi(2))
                .sum();
            out.push(LayerGradNorm {
                layer: self.graph.nodes()[i].name.clone(),
                norm: sq.sqrt(),
            });
        }
        Ok(out)
    }

    /// Parameter values as another element type (e.g. `f64` for gradient
    /// checks).
    pub fn cast<U: Element>(&self) -> Model<U> {
        let conv = |v: &[NamedTensor<T>]| {
            v.iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect()
        };
        Model {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            node_params: self.node_params.clone(),
            node_buffers: self.node_buffers.clone(),
            class_names: self.class_names.clone(),
            mode: self.mode,
        }
    }
}

fn params_grad<T: Element>(tape: &Tape<T>, v: Var) -> Vec<T> {
    tape.grad(v).map(<[T]>::to_vec).unwrap_or_default()
}
