//! Federated datasets: device shards, sample weights, train/test splits and
//! the generators that populate them.

mod io;
mod mnist;
mod synthetic;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use mnist::{
    encode_idx_images, encode_idx_labels, load_mnist_dir, parse_idx_images, parse_idx_labels, partition_mnist,
    IdxImages, MnistPartitionSpec, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES,
};
pub use synthetic::{
    generate_synthetic, generating_models, power_law_count, regenerate_labels, sample_counts,
    SyntheticSpec,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, ModelError};
use crate::rng::{self, Purpose};

/// Train fraction used throughout the experiments.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("malformed IDX data: {0}")]
    Idx(String),
    #[error("class inventory exhausted: {0}")]
    Shortfall(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One simulated device and its local samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceShard {
    pub device_id: u32,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub train_index: Vec<u32>,
    pub test_index: Vec<u32>,
}

impl DeviceShard {
    /// A shard whose rows are all training rows.
    pub fn unsplit(device_id: u32, cols: usize, features: Vec<f64>, labels: Vec<u32>) -> Self {
        let train_index = (0..labels.len() as u32).collect();
        DeviceShard {
            device_id,
            cols,
            features,
            labels,
            train_index,
            test_index: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// `n_k`, the number of training samples.
    pub fn n_train(&self) -> usize {
        self.train_index.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.cols..(r + 1) * self.cols]
    }

    pub fn batch<'a>(&'a self, rows: &'a [u32]) -> std::result::Result<Batch<'a>, ModelError> {
        Batch::new(&self.features, &self.labels, self.cols, rows)
    }

    pub fn train_batch(&self) -> std::result::Result<Batch<'_>, ModelError> {
        self.batch(&self.train_index)
    }

    pub fn test_batch(&self) -> Option<Batch<'_>> {
        self.batch(&self.test_index).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub fraction: f64,
    pub seed: u64,
}

/// Where a dataset came from; enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub rng_scheme: String,
    #[serde(default)]
    pub split: Option<SplitInfo>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub shards: Vec<DeviceShard>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl FederatedDataset {
    pub fn num_devices(&self) -> usize {
        self.shards.len()
    }

    pub fn total_train(&self) -> usize {
        self.shards.iter().map(DeviceShard::n_train).sum()
    }

    pub fn total_rows(&self) -> usize {
        self.shards.iter().map(DeviceShard::rows).sum()
    }

    /// `p_k = n_k / n` over training samples.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.total_train() as f64;
        self.shards.iter().map(|s| s.n_train() as f64 / n).collect()
    }

    /// Structural checks shared by every constructor and the loader.
    pub fn validate(&self) -> Result<()> {
        if self.shards.is_empty() {
            return Err(DataError::Corrupt("dataset has no shards".into()));
        }
        for s in &self.shards {
            let id = s.device_id;
            if s.cols != self.input_dim {
                return Err(DataError::Corrupt(format!(
                    "device {id}: {} columns, expected {}",
                    s.cols, self.input_dim
                )));
            }
            if s.features.len() != s.rows() * s.cols {
                return Err(DataError::Corrupt(format!("device {id}: feature length mismatch")));
            }
            if s.n_train() == 0 {
                return Err(DataError::Corrupt(format!("device {id}: no training samples")));
            }
            if let Some(y) = s.labels.iter().find(|&&y| y as usize >= self.num_classes) {
                return Err(DataError::Corrupt(format!(
                    "device {id}: label {y} outside [0, {})",
                    self.num_classes
                )));
            }
            let mut seen = vec![false; s.rows()];
            for &r in s.train_index.iter().chain(&s.test_index) {
                let slot = seen.get_mut(r as usize).ok_or_else(|| {
                    DataError::Corrupt(format!("device {id}: index {r} out of range"))
                })?;
                if *slot {
                    return Err(DataError::Corrupt(format!("device {id}: index {r} used twice")));
                }
                *slot = true;
            }
            if seen.iter().any(|v| !v) {
                return Err(DataError::Corrupt(format!("device {id}: rows not covered by split")));
            }
        }
        Ok(())
    }
}

/// Number of training rows for a shard of `rows` rows.
pub fn train_count(rows: usize, fraction: f64) -> usize {
    ((fraction * rows as f64).round() as usize).clamp(1, rows)
}

/// Per-shard random train/test split. Shards with fewer than two rows are
/// kept entirely for training and a warning is recorded in the provenance.
pub fn split_train_test(dataset: &FederatedDataset, fraction: f64, seed: u64) -> Result<FederatedDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidSpec(format!(
            "train fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut out = dataset.clone();
    out.provenance.split = Some(SplitInfo { fraction, seed });
    for shard in &mut out.shards {
        let rows = shard.rows();
        if rows < 2 {
            let msg = format!(
                "device {} has {rows} sample(s); assigned entirely to train",
                shard.device_id
            );
            log::warn!("{msg}");
            out.provenance.warnings.push(msg);
            shard.train_index = (0..rows as u32).collect();
            shard.test_index.clear();
            continue;
        }
        let mut order: Vec<u32> = (0..rows as u32).collect();
        let mut rng = rng::stream(seed, Purpose::TrainTestSplit, 0, shard.device_id as u64);
        order.shuffle(&mut rng);
        let n_train = train_count(rows, fraction);
        let (train, test) = order.split_at(n_train);
        shard.train_index = train.to_vec();
        shard.train_index.sort_unstable();
        shard.test_index = test.to_vec();
        shard.test_index.sort_unstable();
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rows: &[usize]) -> FederatedDataset {
        let shards = rows
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let features = (0..n * 2).map(|i| i as f64).collect();
                let labels = (0..n as u32).map(|i| i % 3).collect();
                DeviceShard::unsplit(k as u32, 2, features, labels)
            })
            .collect();
        FederatedDataset {
            shards,
            input_dim: 2,
            num_classes: 3,
            provenance: Provenance {
                generator: "toy".into(),
                params: serde_json::Value::Null,
                seed: 0,
                rng_scheme: rng::RNG_SCHEME.into(),
                split: None,
                warnings: vec![],
            },
        }
    }

    #[test]
    fn ten_rows_split_eight_two() {
        let ds = split_train_test(&toy(&[10]), 0.8, 1).unwrap();
        assert_eq!(ds.shards[0].train_index.len(), 8);
        assert_eq!(ds.shards[0].test_index.len(), 2);
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_train_test(&toy(&[10, 37, 5]), 0.8, 9).unwrap();
        let b = split_train_test(&toy(&[10, 37, 5]), 0.8, 9).unwrap();
        assert_eq!(a, b);
        let c = split_train_test(&toy(&[10, 37, 5]), 0.8, 10).unwrap();
        assert_ne!(a.shards[1].train_index, c.shards[1].train_index);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let ds = split_train_test(&toy(&[100]), 0.8, 3).unwrap();
        let s = &ds.shards[0];
        let mut all: Vec<u32> = s.train_index.iter().chain(&s.test_index).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<u32>>());
        assert_eq!(s.train_index.len(), 80);
    }

    #[test]
    fn single_row_shard_goes_to_train_with_warning() {
        let ds = split_train_test(&toy(&[1, 4]), 0.8, 3).unwrap();
        assert_eq!(ds.shards[0].train_index, vec![0]);
        assert!(ds.shards[0].test_index.is_empty());
        assert_eq!(ds.provenance.warnings.len(), 1);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_train_test(&toy(&[4]), 1.0, 0).is_err());
        assert!(split_train_test(&toy(&[4]), 0.0, 0).is_err());
        assert!(split_train_test(&toy(&[4]), f64::NAN, 0).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        let ds = toy(&[3, 17, 101, 2, 9]);
        let w = ds.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[1], 17.0 / 132.0);
    }

    #[test]
    fn validate_catches_overlap() {
        let mut ds = toy(&[4]);
        ds.shards[0].test_index = vec![0];
        assert!(ds.validate().is_err());
    }
}
