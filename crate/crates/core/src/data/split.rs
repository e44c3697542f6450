use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub folds: Option<usize>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            folds: None,
            seed: 0,
        }
    }
}

/// One cross-validation round: sorted sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Sample indices of every class, each list shuffled by one seeded stream
/// consumed in class order.
fn shuffled_by_class(m: &DatasetManifest, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); m.num_classes()];
    for (i, s) in m.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    by_class
}

/// Stratified train/test split: per class `floor(train_fraction * count)`
/// samples go to train, the rest to test. Both lists are sorted.
pub fn split_dataset(m: &DatasetManifest, s: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
        return Err(DataError::Argument(format!(
            "train_fraction must lie in (0, 1), got {}",
            s.train_fraction
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, idx) in shuffled_by_class(m, s.seed).into_iter().enumerate() {
        let name = &m.class_names[c];
        if idx.len() < 2 {
            return Err(DataError::Split(format!(
                "class {name} has {} sample(s), need at least 2",
                idx.len()
            )));
        }
        let n_train = (s.train_fraction * idx.len() as f64).floor() as usize;
        if n_train == 0 {
            return Err(DataError::Split(format!(
                "fraction {} leaves class {name} without training samples",
                s.train_fraction
            )));
        }
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified k-fold: within each shuffled class the j-th sample lands in
/// validation fold `j % k`.
pub fn kfold(m: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Fold>, DataError> {
    if k < 2 {
        return Err(DataError::Argument(format!("k must be at least 2, got {k}")));
    }
    let mut assignment = vec![0usize; m.samples.len()];
    for (c, idx) in shuffled_by_class(m, seed).into_iter().enumerate() {
        if idx.len() < k {
            return Err(DataError::Fold(format!(
                "class {} has {} samples, fewer than k = {k}",
                m.class_names[c],
                idx.len()
            )));
        }
        for (j, &i) in idx.iter().enumerate() {
            assignment[i] = j % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (validation, train) = (0..m.samples.len()).partition(|&i| assignment[i] == f);
            Fold { train, validation }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataSource, Sample};

    pub(crate) fn toy(per_class: &[usize]) -> DatasetManifest {
        let mut samples = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    path: format!("c{c}/{i}.ppm"),
                    label: c,
                });
            }
        }
        DatasetManifest {
            version: 1,
            class_names: (0..per_class.len()).map(|c| format!("c{c}")).collect(),
            samples,
            source: DataSource::External,
            seed: 0,
        }
    }

    #[test]
    fn seventy_thirty_per_class() {
        let m = toy(&[100; 20]);
        let (train, test) = split_dataset(&m, &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (1400, 600));
        for c in 0..20 {
            assert_eq!(train.iter().filter(|&&i| m.samples[i].label == c).count(), 70);
        }
    }

    #[test]
    fn boundary_one_each() {
        let m = toy(&[2, 2, 2]);
        let s = SplitSpec {
            train_fraction: 0.5,
            ..Default::default()
        };
        let (train, test) = split_dataset(&m, &s).unwrap();
        assert_eq!((train.len(), test.len()), (3, 3));
    }

    #[test]
    fn singleton_class_rejected() {
        let m = toy(&[3, 1]);
        let err = split_dataset(&m, &SplitSpec::default()).unwrap_err();
        assert!(matches!(err, DataError::Split(_)), "{err}");
        assert!(matches!(kfold(&toy(&[5, 4]), 5, 0), Err(DataError::Fold(_))));
    }

    #[test]
    fn five_fold_sizes() {
        let m = toy(&[100; 4]);
        let folds = kfold(&m, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            for c in 0..4 {
                assert_eq!(f.validation.iter().filter(|&&i| m.samples[i].label == c).count(), 20);
            }
            assert_eq!(f.train.len() + f.validation.len(), 400);
        }
        assert_eq!(folds, kfold(&m, 5, 3).unwrap());
        assert_ne!(folds, kfold(&m, 5, 4).unwrap());
    }
}
