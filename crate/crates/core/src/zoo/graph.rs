//! Declarative layer graphs. Architectures describe their wiring once; the
//! same graph is then executed for any element type and walked analytically
//! for parameter and activation accounting.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    /// Per-sample input shape (without the batch axis).
    Input { shape: Vec<usize> },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm { channels: usize },
    Relu,
    Add,
    Concat,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    Linear { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

/// A DAG of layers in topological order. Node 0 is the input; the last node
/// is the output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerGraph {
    nodes: Vec<LayerNode>,
}

/// Shape and ownership of one named parameter or buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub node: usize,
    pub init: ParamInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

impl LayerGraph {
    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn input_shape(&self) -> &[usize] {
        match &self.nodes[0].kind {
            LayerKind::Input { shape } => shape,
            _ => unreachable!("builder always starts with an input node"),
        }
    }

    /// Names of all nodes, in order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Indices of conv and linear nodes, input to output.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind.is_weighted())
            .collect()
    }

    /// Trainable parameters in a fixed order: per node, weight then bias
    /// (conv, linear) or gamma then beta (batch norm).
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let mut push = |suffix: &str, shape: Vec<usize>, init| {
                specs.push(ParamSpec {
                    name: format!("{}.{suffix}", node.name),
                    shape,
                    node: i,
                    init,
                })
            };
            match node.kind {
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let fan_in = in_ch * kernel * kernel;
                    push("weight", vec![out_ch, in_ch, kernel, kernel], ParamInit::Kaiming { fan_in });
                    push("bias", vec![out_ch], ParamInit::Zeros);
                }
                LayerKind::Linear { inputs, outputs } => {
                    push("weight", vec![outputs, inputs], ParamInit::Kaiming { fan_in: inputs });
                    push("bias", vec![outputs], ParamInit::Zeros);
                }
                LayerKind::BatchNorm { channels } => {
                    push("gamma", vec![channels], ParamInit::Ones);
                    push("beta", vec![channels], ParamInit::Zeros);
                }
                _ => {}
            }
        }
        specs
    }

    /// Non-trainable running statistics, per batch-norm node mean then var.
    pub fn buffer_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let LayerKind::BatchNorm { channels } = node.kind {
                specs.push(ParamSpec {
                    name: format!("{}.running_mean", node.name),
                    shape: vec![channels],
                    node: i,
                    init: ParamInit::Zeros,
                });
                specs.push(ParamSpec {
                    name: format!("{}.running_var", node.name),
                    shape: vec![channels],
                    node: i,
                    init: ParamInit::Ones,
                });
            }
        }
        specs
    }

    /// Per-sample output shape of every node.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            let bad = |detail: String| ModelError::Graph {
                layer: node.name.clone(),
                detail,
            };
            let shape = match &node.kind {
                LayerKind::Input { shape } => shape.clone(),
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    let s = ins[0];
                    if s.len() != 3 || s[0] != *in_ch {
                        return Err(bad(format!("expects [{in_ch}, h, w], got {s:?}")));
                    }
                    let (h, w) = (s[1] + 2 * padding, s[2] + 2 * padding);
                    if h < *kernel || w < *kernel {
                        return Err(bad(format!("kernel {kernel} exceeds padded input {h}x{w}")));
                    }
                    vec![*out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerKind::BatchNorm { channels } => {
                    if ins[0].first() != Some(channels) {
                        return Err(bad(format!("expects {channels} channels, got {:?}", ins[0])));
                    }
                    ins[0].clone()
                }
                LayerKind::Relu => ins[0].clone(),
                LayerKind::Add => {
                    if ins[0] != ins[1] {
                        return Err(bad(format!("branch {:?} vs shortcut {:?}", ins[0], ins[1])));
                    }
                    ins[0].clone()
                }
                LayerKind::Concat => {
                    let first = ins[0];
                    let mut c = 0;
                    for s in &ins {
                        if s.len() != 3 || s[1..] != first[1..] {
                            return Err(bad(format!("cannot concat {first:?} with {s:?}")));
                        }
                        c += s[0];
                    }
                    vec![c, first[1], first[2]]
                }
                LayerKind::MaxPool2 => {
                    let s = ins[0];
                    vec![s[0], s[1] / 2, s[2] / 2]
                }
                LayerKind::GlobalAvgPool => vec![ins[0][0]],
                LayerKind::Flatten => vec![ins[0].iter().product()],
                LayerKind::Linear { inputs, outputs } => {
                    if ins[0] != &vec![*inputs] {
                        return Err(bad(format!("expects [{inputs}], got {:?}", ins[0])));
                    }
                    vec![*outputs]
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Bytes of activations a training step must keep alive for backward,
    /// for a batch of `batch` samples with `elem_bytes`-wide elements.
    ///
    /// Each node output is counted once, however many ops retain it:
    /// conv, batch norm, relu, max-pool and linear retain their input; add,
    /// concat, flatten and global pooling need only shapes.
    pub fn retained_activation_bytes(&self, batch: usize, elem_bytes: usize) -> Result<usize, ModelError> {
        let shapes = self.infer_shapes()?;
        let mut retained = vec![false; self.nodes.len()];
        for node in &self.nodes {
            match node.kind {
                LayerKind::Conv { .. }
                | LayerKind::BatchNorm { .. }
                | LayerKind::Relu
                | LayerKind::MaxPool2
                | LayerKind::Linear { .. } => retained[node.inputs[0]] = true,
                _ => {}
            }
        }
        Ok(retained
            .iter()
            .zip(&shapes)
            .filter(|(r, _)| **r)
            .map(|(_, s)| s.iter().product::<usize>() * batch * elem_bytes)
            .sum())
    }
}

/// Incremental construction of a [`LayerGraph`]; every method returns the
/// index of the node it appended.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            nodes: vec![LayerNode {
                name: "input".into(),
                kind: LayerKind::Input {
                    shape: input_shape.to_vec(),
                },
                inputs: vec![],
            }],
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.nodes.push(LayerNode {
            name: name.into(),
            kind,
            inputs,
        });
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: usize, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> usize {
        self.push(
            name,
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding: kernel / 2,
            },
            vec![x],
        )
    }

    pub fn bn(&mut self, name: &str, x: usize, channels: usize) -> usize {
        self.push(name, LayerKind::BatchNorm { channels }, vec![x])
    }

    pub fn relu(&mut self, name: &str, x: usize) -> usize {
        self.push(name, LayerKind::Relu, vec![x])
    }

    /// conv -> batch norm -> relu named `{prefix}.conv{idx}`,
    /// `{prefix}.bn{idx}` and `{prefix}.relu{idx}`.
    pub fn conv_bn_relu(&mut self, prefix: &str, idx: &str, x: usize, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> usize {
        let c = self.conv(&format!("{prefix}.conv{idx}"), x, in_ch, out_ch, kernel, stride);
        let b = self.bn(&format!("{prefix}.bn{idx}"), c, out_ch);
        self.relu(&format!("{prefix}.relu{idx}"), b)
    }

    pub fn finish(self) -> Result<LayerGraph, ModelError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&j| j >= i) {
                return Err(ModelError::Graph {
                    layer: n.name.clone(),
                    detail: "inputs must precede the node".into(),
                });
            }
        }
        let mut names: Vec<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(ModelError::Graph {
                layer: w[0].to_string(),
                detail: "duplicate layer name".into(),
            });
        }
        let graph = LayerGraph { nodes: self.nodes };
        graph.infer_shapes()?;
        Ok(graph)
    }
}
