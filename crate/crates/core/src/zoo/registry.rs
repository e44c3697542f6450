use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use super::families::{DenseConcat, Plain, Residual};
use super::{LayerGraph, ModelConfig, ModelError};

/// A buildable network family.
pub trait Architecture: Send + Sync {
    /// Registry key, also stored in checkpoints.
    fn name(&self) -> &str;

    fn description(&self) -> &str {
        ""
    }

    /// Wires the layer graph for `config`. Implementations may assume
    /// `config.validate()` has passed.
    fn build(&self, config: &ModelConfig) -> Result<LayerGraph, ModelError>;
}

#[derive(Clone, Default)]
pub struct ArchitectureRegistry {
    entries: BTreeMap<String, Arc<dyn Architecture>>,
}

impl std::fmt::Debug for ArchitectureRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl ArchitectureRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding `residual`, `plain` and `dense_concat`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Residual));
        r.register(Arc::new(Plain));
        r.register(Arc::new(DenseConcat));
        r
    }

    /// Adds or replaces the architecture under its own name.
    pub fn register(&mut self, arch: Arc<dyn Architecture>) {
        self.entries.insert(arch.name().to_string(), arch);
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn Architecture>, ModelError> {
        self.entries.get(name).ok_or_else(|| ModelError::UnknownFamily {
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn build_graph(&self, config: &ModelConfig) -> Result<LayerGraph, ModelError> {
        config.validate()?;
        self.get(&config.family)?.build(config)
    }
}

pub fn default_registry() -> &'static ArchitectureRegistry {
    static REGISTRY: OnceLock<ArchitectureRegistry> = OnceLock::new();
    REGISTRY.get_or_init(ArchitectureRegistry::with_builtins)
}
