//! IDX parsing and the two-digits-per-device MNIST partition.
//!
//! Each device is handed a fixed set of digit classes (round-robin over all
//! class combinations, shuffled by seed) and a power-law weight. Every class's
//! inventory is then shared among the devices holding it: one sample per
//! holder up front, the remainder in proportion to the holders' weights,
//! rounded down. The rounding leftovers are not assigned.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DeviceShard, FederatedDataset, Provenance, Result};
use crate::rng::{self, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const GENERATOR_NAME: &str = "mnist";
const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn header(bytes: &[u8], words: usize, magic: u32) -> Result<Vec<usize>> {
    if bytes.len() < 4 * words {
        return Err(DataError::Idx(format!(
            "header needs {} bytes, file has {}",
            4 * words,
            bytes.len()
        )));
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(DataError::Idx(format!(
            "magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    Ok((1..words)
        .map(|i| BigEndian::read_u32(&bytes[4 * i..4 * i + 4]) as usize)
        .collect())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let dims = header(bytes, 4, IDX_IMAGES_MAGIC)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| DataError::Idx("image dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(DataError::Idx(format!(
            "{count} images of {rows}x{cols} need {len} bytes, found {}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..len].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = header(bytes, 2, IDX_LABELS_MAGIC)?;
    let count = dims[0];
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::Idx(format!(
            "{count} labels need {count} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..4], IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut out[4..8], images.count as u32);
    BigEndian::write_u32(&mut out[8..12], images.rows as u32);
    BigEndian::write_u32(&mut out[12..16], images.cols as u32);
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..4], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut out[4..8], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}

/// Standard file names of the MNIST distribution, training split first.
pub const MNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// Reads every uncompressed image/label pair of [`MNIST_FILES`] found in
/// `dir` and concatenates them.
pub fn load_mnist_dir(dir: &Path) -> Result<(IdxImages, Vec<u8>)> {
    let mut images: Option<IdxImages> = None;
    let mut labels = Vec::new();
    for (img_name, lbl_name) in MNIST_FILES {
        let img_path = dir.join(img_name);
        if !img_path.exists() {
            continue;
        }
        let part = parse_idx_images(&fs::read(&img_path)?)?;
        let part_labels = parse_idx_labels(&fs::read(dir.join(lbl_name))?)?;
        match images.as_mut() {
            None => images = Some(part),
            Some(all) => {
                if (all.rows, all.cols) != (part.rows, part.cols) {
                    return Err(DataError::Idx(format!("{img_name}: image size differs")));
                }
                all.count += part.count;
                all.pixels.extend_from_slice(&part.pixels);
            }
        }
        labels.extend(part_labels);
    }
    let images = images.ok_or_else(|| {
        DataError::Idx(format!("no MNIST image files in {}", dir.display()))
    })?;
    Ok((images, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistPartitionSpec {
    pub num_devices: usize,
    pub classes_per_device: usize,
    pub power_law_exponent: f64,
    pub min_samples: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl MnistPartitionSpec {
    /// 1000 devices, two digits each.
    pub fn standard(seed: u64) -> Self {
        MnistPartitionSpec {
            num_devices: 1000,
            classes_per_device: 2,
            power_law_exponent: 1.5,
            min_samples: 10,
            max_samples: 1000,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_devices < 1 || self.classes_per_device < 1 {
            return Err(DataError::InvalidSpec(
                "num_devices and classes_per_device must be positive".into(),
            ));
        }
        if !(self.power_law_exponent > 0.0 && self.power_law_exponent.is_finite()) {
            return Err(DataError::InvalidSpec("power_law_exponent must be positive".into()));
        }
        if self.min_samples < 1 || self.max_samples < self.min_samples {
            return Err(DataError::InvalidSpec(
                "need 1 <= min_samples <= max_samples".into(),
            ));
        }
        Ok(())
    }
}

/// All `k`-subsets of `items`, lexicographic.
fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, k, 0, &mut Vec::with_capacity(k), &mut out);
    out
}

pub fn partition_mnist(images: &IdxImages, labels: &[u8], spec: &MnistPartitionSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    if images.count != labels.len() {
        return Err(DataError::Idx(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= MNIST_CLASSES) {
        return Err(DataError::Idx(format!("label {y} is not a digit")));
    }

    let mut inventory: Vec<Vec<u32>> = vec![Vec::new(); MNIST_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        inventory[y as usize].push(i as u32);
    }
    for (c, pool) in inventory.iter_mut().enumerate() {
        pool.shuffle(&mut rng::stream(spec.seed, Purpose::Partition, 0, c as u64));
    }
    let present: Vec<usize> = (0..MNIST_CLASSES).filter(|&c| !inventory[c].is_empty()).collect();
    if spec.classes_per_device > present.len() {
        return Err(DataError::Shortfall(format!(
            "{} classes per device requested but only {} classes present",
            spec.classes_per_device,
            present.len()
        )));
    }

    let mut combos = combinations(&present, spec.classes_per_device);
    combos.shuffle(&mut rng::stream(spec.seed, Purpose::Partition, 1, 0));
    let device_classes: Vec<&[usize]> = (0..spec.num_devices)
        .map(|k| combos[k % combos.len()].as_slice())
        .collect();

    let mut weight_rng = rng::stream(spec.seed, Purpose::Partition, 2, 0);
    let weights: Vec<f64> = (0..spec.num_devices)
        .map(|_| {
            let u = 1.0 - weight_rng.random::<f64>();
            (spec.min_samples as f64 * u.powf(-1.0 / spec.power_law_exponent))
                .clamp(spec.min_samples as f64, spec.max_samples as f64)
        })
        .collect();

    // holders[c] = devices that own class c, in device order
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); MNIST_CLASSES];
    for (k, classes) in device_classes.iter().enumerate() {
        for &c in *classes {
            holders[c].push(k);
        }
    }
    let shortfalls: Vec<String> = (0..MNIST_CLASSES)
        .filter(|&c| holders[c].len() > inventory[c].len())
        .map(|c| {
            format!(
                "class {c}: {} devices need at least one sample each, only {} available",
                holders[c].len(),
                inventory[c].len()
            )
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(DataError::Shortfall(shortfalls.join("; ")));
    }

    let mut assigned: Vec<Vec<u32>> = vec![Vec::new(); spec.num_devices];
    for c in 0..MNIST_CLASSES {
        let owners = &holders[c];
        if owners.is_empty() {
            continue;
        }
        // One sample each, then the rest by largest remainder so nothing is lost.
        let remainder = inventory[c].len() - owners.len();
        let total_weight: f64 = owners.iter().map(|&k| weights[k]).sum();
        let quotas: Vec<f64> = owners
            .iter()
            .map(|&k| remainder as f64 * weights[k] / total_weight)
            .collect();
        let mut takes: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..owners.len()).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
        let placed: usize = takes.iter().sum();
        for &i in order.iter().take(inventory[c].len() - placed) {
            takes[i] += 1;
        }
        let mut cursor = 0;
        for (&k, take) in owners.iter().zip(takes) {
            assigned[k].extend_from_slice(&inventory[c][cursor..cursor + take]);
            cursor += take;
        }
    }

    let dim = images.pixels_per_image();
    let shards = assigned
        .into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let mut features = Vec::with_capacity(idx.len() * dim);
            for &i in &idx {
                features.extend(images.image(i as usize).iter().map(|&p| p as f64 / 255.0));
            }
            let labels = idx.iter().map(|&i| labels[i as usize] as u32).collect();
            DeviceShard::unsplit(k as u32, dim, features, labels)
        })
        .collect();

    let ds = FederatedDataset {
        shards,
        input_dim: dim,
        num_classes: MNIST_CLASSES,
        provenance: Provenance {
            generator: GENERATOR_NAME.into(),
            params: serde_json::to_value(spec).expect("spec serializes"),
            seed: spec.seed,
            rng_scheme: rng::RNG_SCHEME.into(),
            split: None,
            warnings: Vec::new(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: u8) -> (IdxImages, Vec<u8>) {
        let images = IdxImages {
            count: n,
            rows: 2,
            cols: 2,
            pixels: (0..n * 4).map(|i| (i % 256) as u8).collect(),
        };
        let labels = (0..n).map(|i| (i % classes as usize) as u8).collect();
        (images, labels)
    }

    #[test]
    fn idx_round_trip_and_bad_magic() {
        let (images, labels) = toy(12, 4);
        let enc = encode_idx_images(&images);
        assert_eq!(parse_idx_images(&enc).unwrap(), images);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
        assert!(parse_idx_labels(&enc).is_err());
        assert!(parse_idx_images(&enc[..enc.len() - 1]).is_err());
        assert!(parse_idx_images(&enc[..10]).is_err());
    }

    #[test]
    fn single_device_gets_everything() {
        let (images, labels) = toy(50, 10);
        let spec = MnistPartitionSpec {
            num_devices: 1,
            classes_per_device: 10,
            ..MnistPartitionSpec::standard(1)
        };
        let ds = partition_mnist(&images, &labels, &spec).unwrap();
        assert_eq!(ds.num_devices(), 1);
        assert_eq!(ds.shards[0].rows(), 50);
    }

    #[test]
    fn pixels_are_scaled_to_unit_interval() {
        let (images, labels) = toy(20, 2);
        let spec = MnistPartitionSpec {
            num_devices: 2,
            classes_per_device: 1,
            ..MnistPartitionSpec::standard(3)
        };
        let ds = partition_mnist(&images, &labels, &spec).unwrap();
        for s in &ds.shards {
            assert!(s.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn shortfall_is_reported() {
        let (images, labels) = toy(6, 3);
        let spec = MnistPartitionSpec {
            num_devices: 10,
            classes_per_device: 2,
            ..MnistPartitionSpec::standard(0)
        };
        match partition_mnist(&images, &labels, &spec) {
            Err(DataError::Shortfall(msg)) => assert!(msg.contains("class")),
            other => panic!("expected shortfall, got {other:?}"),
        }
        let spec = MnistPartitionSpec {
            num_devices: 1,
            classes_per_device: 4,
            ..MnistPartitionSpec::standard(0)
        };
        assert!(matches!(
            partition_mnist(&images, &labels, &spec),
            Err(DataError::Shortfall(_))
        ));
    }

    #[test]
    fn combinations_count() {
        let items: Vec<usize> = (0..10).collect();
        assert_eq!(combinations(&items, 2).len(), 45);
        assert_eq!(combinations(&items, 10).len(), 1);
    }
}
