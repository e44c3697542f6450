//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FLCKPT"  u16 version  u32 header_len  header (UTF-8 JSON)
//! then, for every entry listed in the header in order, its raw elements
//! ```
//!
//! The header carries the model config, class names, element type and the
//! name and shape of every parameter and buffer. Writing is deterministic,
//! so save -> load -> save reproduces the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, NamedTensor};
use super::registry::{default_registry, ArchitectureRegistry};
use super::{ModelConfig, ModelError};
use crate::layers::Mode;
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 6] = b"FLCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    class_names: Vec<String>,
    dtype: String,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
}

fn entries<T: Element>(v: &[NamedTensor<T>]) -> Vec<Entry> {
    v.iter()
        .map(|p| Entry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
        })
        .collect()
}

pub fn write_checkpoint<T: Element>(model: &Model<T>) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        class_names: model.class_names().to_vec(),
        dtype: T::DTYPE.to_string(),
        params: entries(model.params()),
        buffers: entries(model.buffers()),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + (model.param_count() * T::BYTES));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params().iter().chain(model.buffers()) {
        out.extend_from_slice(&T::to_le_bytes_vec(p.tensor.data()));
    }
    out
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// Decodes a checkpoint; the wiring is rebuilt from `registry` by family
/// name. Loaded models start in eval mode.
pub fn read_checkpoint<T: Element>(bytes: &[u8], registry: &ArchitectureRegistry) -> Result<Model<T>, ModelError> {
    if bytes.len() < 12 || &bytes[..6] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(bad(format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
    }
    let mut offset = 12 + header_len;
    let mut take = |list: Vec<Entry>| -> Result<Vec<NamedTensor<T>>, ModelError> {
        list.into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = offset + n * T::BYTES;
                let raw = bytes
                    .get(offset..end)
                    .ok_or_else(|| bad(format!("truncated data for {}", e.name)))?;
                offset = end;
                Ok(NamedTensor {
                    tensor: Tensor::new(e.shape, T::from_le_bytes_slice(raw))?,
                    name: e.name,
                })
            })
            .collect()
    };
    let params = take(header.params)?;
    let buffers = take(header.buffers)?;
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    let graph = registry.build_graph(&header.config)?;
    let mut model = Model::assemble(header.config, graph, params, buffers, header.class_names)?;
    model.set_mode(Mode::Eval);
    Ok(model)
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, write_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&bytes, default_registry())
}
