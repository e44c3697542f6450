//! Architecture presets and model introspection.
//!
//! Each family is an [`Architecture`] registered by name in an
//! [`ArchitectureRegistry`]; [`ModelConfig::family`] selects one at runtime.

mod checkpoint;
mod families;
mod graph;
mod model;
mod registry;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use families::{DenseConcat, Plain, Residual};
pub use graph::{GraphBuilder, LayerGraph, LayerKind, LayerNode, ParamInit, ParamSpec};
pub use model::{build_model, ForwardPass, LayerGradNorm, Model, NamedTensor};
pub use registry::{default_registry, Architecture, ArchitectureRegistry};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unsupported model family `{name}` (known: {known})")]
    UnknownFamily { name: String, known: String },
    #[error("layer `{layer}`: {detail}")]
    Graph { layer: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const DEFAULT_STAGE_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Registry name of the architecture, e.g. `residual`.
    pub family: String,
    /// Blocks per stage (`n` in the `6n + 2` depth formula).
    pub blocks_per_stage: usize,
    pub stage_widths: Vec<usize>,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_size: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: "residual".into(),
            blocks_per_stage: 1,
            stage_widths: DEFAULT_STAGE_WIDTHS.to_vec(),
            num_classes: 20,
            input_size: [3, 64, 64],
        }
    }
}

impl ModelConfig {
    pub fn new(family: &str, blocks_per_stage: usize, num_classes: usize) -> Self {
        Self {
            family: family.into(),
            blocks_per_stage,
            num_classes,
            ..Self::default()
        }
    }

    pub fn with_input_size(mut self, input_size: [usize; 3]) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.blocks_per_stage == 0 {
            return Err(ModelError::Config("blocks_per_stage must be >= 1".into()));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(ModelError::Config(format!(
                "stage widths must be non-empty and positive, got {:?}",
                self.stage_widths
            )));
        }
        if self.num_classes == 0 {
            return Err(ModelError::Config("num_classes must be >= 1".into()));
        }
        if self.input_size.contains(&0) {
            return Err(ModelError::Config(format!(
                "input size must be positive, got {:?}",
                self.input_size
            )));
        }
        Ok(())
    }
}
