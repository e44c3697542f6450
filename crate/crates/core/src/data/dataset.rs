use std::path::Path;

use super::image::{decode_and_preprocess, INPUT_SIZE};
use super::{DataError, DatasetManifest};
use crate::tensor::Tensor;

const SAMPLE_LEN: usize = 3 * INPUT_SIZE * INPUT_SIZE;

/// Preprocessed images held in memory, `[3, 64, 64]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    data: Vec<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl ImageSet {
    /// Decodes every sample of `manifest`, paths relative to `root`.
    pub fn load(root: &Path, manifest: &DatasetManifest) -> Result<Self, DataError> {
        manifest.validate()?;
        let mut data = Vec::with_capacity(manifest.samples.len() * SAMPLE_LEN);
        for s in &manifest.samples {
            data.extend_from_slice(decode_and_preprocess(&root.join(&s.path))?.data());
        }
        Ok(Self {
            data,
            labels: manifest.labels(),
            class_names: manifest.class_names.clone(),
        })
    }

    /// Loads `dir/manifest.json` and its images.
    pub fn load_dir(dir: &Path) -> Result<Self, DataError> {
        Self::load(dir, &DatasetManifest::load(dir)?)
    }

    pub fn from_tensors(images: &[Tensor<f32>], labels: Vec<usize>, class_names: Vec<String>) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::Argument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Argument(format!("label {l} out of range")));
        }
        let mut data = Vec::with_capacity(images.len() * SAMPLE_LEN);
        for t in images {
            if t.shape() != [3, INPUT_SIZE, INPUT_SIZE] {
                return Err(DataError::Argument(format!("image shape {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        Ok(Self {
            data,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::new(
            vec![3, INPUT_SIZE, INPUT_SIZE],
            self.data[i * SAMPLE_LEN..(i + 1) * SAMPLE_LEN].to_vec(),
        )
        .expect("fixed sample shape")
    }

    /// Stacks the given samples into `[b, 3, 64, 64]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * SAMPLE_LEN);
        for &i in indices {
            data.extend_from_slice(&self.data[i * SAMPLE_LEN..(i + 1) * SAMPLE_LEN]);
        }
        let x = Tensor::new(vec![indices.len(), 3, INPUT_SIZE, INPUT_SIZE], data).expect("fixed sample shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (x, labels) = self.batch(indices);
        Self {
            data: x.data().to_vec(),
            labels,
            class_names: self.class_names.clone(),
        }
    }
}
