//! Binary dataset files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FSIM"  u16 version
//! u32 header_len, header_len bytes of UTF-8 JSON
//!     {"input_dim": .., "num_classes": .., "provenance": {..}}
//! u32 shard_count
//! per shard:
//!     u32 device_id, u32 rows, u32 cols
//!     rows*cols f64 features (row-major)
//!     rows u32 labels
//!     u32 train_count, train_count u32 sorted train indices
//! ```
//!
//! Test indices are the complement of the train indices.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{DataError, DeviceShard, FederatedDataset, Provenance, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FSIM";
pub const DATASET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    input_dim: usize,
    num_classes: usize,
    provenance: Provenance,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DataError::Corrupt(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_dataset(dataset: &FederatedDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let header = serde_json::to_vec(&Header {
        input_dim: dataset.input_dim,
        num_classes: dataset.num_classes,
        provenance: dataset.provenance.clone(),
    })
    .map_err(|e| DataError::Corrupt(format!("provenance does not serialize: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, dataset.shards.len())?;
    for s in &dataset.shards {
        put_u32(&mut out, s.device_id as usize)?;
        put_u32(&mut out, s.rows())?;
        put_u32(&mut out, s.cols)?;
        let start = out.len();
        out.resize(start + 8 * s.features.len(), 0);
        LittleEndian::write_f64_into(&s.features, &mut out[start..]);
        for &y in &s.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        let mut train = s.train_index.clone();
        train.sort_unstable();
        put_u32(&mut out, train.len())?;
        for r in train {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(DataError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(LittleEndian::read_u32(self.take(4, what)?) as usize)
    }

    fn array_len(&self, count: usize, width: usize, what: &'static str) -> Result<usize> {
        count
            .checked_mul(width)
            .ok_or_else(|| DataError::Corrupt(format!("{what} length overflows")))
    }
}

pub fn read_dataset(bytes: &[u8]) -> Result<FederatedDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = LittleEndian::read_u16(r.take(2, "version")?);
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let header_len = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| DataError::Corrupt(format!("header JSON: {e}")))?;
    let shard_count = r.u32("shard count")?;

    let mut shards = Vec::new();
    for _ in 0..shard_count {
        let device_id = r.u32("device id")? as u32;
        let rows = r.u32("row count")?;
        let cols = r.u32("column count")?;
        let cells = r.array_len(rows, cols, "features")?;
        let raw = r.take(r.array_len(cells, 8, "features")?, "features")?;
        let mut features = vec![0.0; cells];
        LittleEndian::read_f64_into(raw, &mut features);
        let raw = r.take(r.array_len(rows, 4, "labels")?, "labels")?;
        let labels: Vec<u32> = raw.chunks_exact(4).map(LittleEndian::read_u32).collect();
        let train_count = r.u32("train count")?;
        if train_count > rows {
            return Err(DataError::Corrupt(format!(
                "device {device_id}: train count {train_count} exceeds {rows} rows"
            )));
        }
        let raw = r.take(4 * train_count, "train indices")?;
        let train_index: Vec<u32> = raw.chunks_exact(4).map(LittleEndian::read_u32).collect();
        if train_index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Corrupt(format!(
                "device {device_id}: train indices not strictly increasing"
            )));
        }
        if train_index.last().is_some_and(|&i| i as usize >= rows) {
            return Err(DataError::Corrupt(format!(
                "device {device_id}: train index out of range"
            )));
        }
        let mut in_train = vec![false; rows];
        for &i in &train_index {
            in_train[i as usize] = true;
        }
        let test_index = (0..rows as u32).filter(|&i| !in_train[i as usize]).collect();
        shards.push(DeviceShard {
            device_id,
            cols,
            features,
            labels,
            train_index,
            test_index,
        });
    }
    if r.pos != bytes.len() {
        return Err(DataError::Corrupt(format!(
            "{} trailing bytes after last shard",
            bytes.len() - r.pos
        )));
    }
    let ds = FederatedDataset {
        shards,
        input_dim: header.input_dim,
        num_classes: header.num_classes,
        provenance: header.provenance,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(dataset: &FederatedDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_dataset(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<FederatedDataset> {
    read_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_train_test, SyntheticSpec};

    fn sample() -> FederatedDataset {
        let mut spec = SyntheticSpec::heterogeneous(0.5, 0.5, 4);
        spec.num_devices = 5;
        split_train_test(&generate_synthetic(&spec).unwrap(), 0.8, 4).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let ds = sample();
        let bytes = write_dataset(&ds).unwrap();
        assert_eq!(read_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fsim");
        let ds = sample();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = write_dataset(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_dataset(&bytes), Err(DataError::BadMagic)));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = write_dataset(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_dataset(&bytes), Err(DataError::UnsupportedVersion(9))));
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = write_dataset(&sample()).unwrap();
        // Cuts at a spread of offsets including inside the header and each shard.
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            let err = read_dataset(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, DataError::Truncated { .. } | DataError::BadMagic | DataError::Corrupt(_)),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn huge_length_field_does_not_allocate() {
        let mut bytes = write_dataset(&sample()).unwrap();
        let header_len = LittleEndian::read_u32(&bytes[6..10]) as usize;
        let rows_at = 10 + header_len + 4 + 4;
        LittleEndian::write_u32(&mut bytes[rows_at..rows_at + 4], u32::MAX);
        assert!(read_dataset(&bytes).is_err());
    }
}
