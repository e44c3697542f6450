use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub source: DataSource,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("unsupported version {}", self.version)));
        }
        let k = self.class_names.len();
        let mut counts = vec![0usize; k];
        let mut paths = HashSet::new();
        for s in &self.samples {
            if s.label >= k {
                return Err(DataError::Manifest(format!(
                    "sample {} has label {} but only {k} classes exist",
                    s.path, s.label
                )));
            }
            if !paths.insert(s.path.as_str()) {
                return Err(DataError::Manifest(format!("duplicate sample path {}", s.path)));
            }
            counts[s.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(DataError::Manifest(format!(
                "class {} has no samples",
                self.class_names[c]
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let m: Self = serde_json::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Loads `dir/manifest.json`.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
