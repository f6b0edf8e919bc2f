//! Synthetic(α, β) federated classification data.
//!
//! Device `k` draws a model shift `u_k ~ N(0, α)` and a data shift
//! `m_k ~ N(0, β)`, then `W_k, b_k ~ N(u_k, 1)` entrywise, a feature mean
//! `v_k ~ N(m_k, 1)` entrywise, and rows `x ~ N(v_k, Σ)` with
//! `Σ = diag(j^-1.2)`. Labels are `argmax(W_k x + b_k)`. In the IID variant a
//! single `(W, b) ~ N(0, 1)` is shared and `v = 0` everywhere.
//!
//! The second argument of every `N(·, ·)` above is used as a standard
//! deviation.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, DeviceShard, FederatedDataset, Provenance, Result};
use crate::model::{ModelSpec, ParamVector};
use crate::rng::{self, Purpose, StreamRng};

pub const GENERATOR_NAME: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub alpha: f64,
    pub beta: f64,
    pub iid: bool,
    pub num_devices: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub power_law_exponent: f64,
    pub min_samples: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Synthetic(α, β) with the default 30 devices.
    pub fn heterogeneous(alpha: f64, beta: f64, seed: u64) -> Self {
        SyntheticSpec {
            alpha,
            beta,
            iid: false,
            num_devices: 30,
            input_dim: 60,
            num_classes: 10,
            power_law_exponent: 1.5,
            min_samples: 10,
            max_samples: 1000,
            seed,
        }
    }

    pub fn iid(seed: u64) -> Self {
        SyntheticSpec {
            iid: true,
            ..Self::heterogeneous(0.0, 0.0, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be a finite value >= 0, got {}", self.beta));
        }
        if self.num_devices < 1 {
            return bad("num_devices must be at least 1".into());
        }
        if self.input_dim < 1 || self.num_classes < 1 {
            return bad("input_dim and num_classes must be positive".into());
        }
        if !(self.power_law_exponent > 0.0 && self.power_law_exponent.is_finite()) {
            return bad(format!(
                "power_law_exponent must be positive, got {}",
                self.power_law_exponent
            ));
        }
        if self.min_samples < 1 || self.max_samples < self.min_samples {
            return bad(format!(
                "need 1 <= min_samples <= max_samples, got {}..{}",
                self.min_samples, self.max_samples
            ));
        }
        Ok(())
    }

    fn model_spec(&self) -> ModelSpec {
        ModelSpec::logistic(self.input_dim, self.num_classes)
    }
}

/// Pareto draw `round(min · u^(-1/exponent))` clamped to `[min, max]`, `u ∈ (0, 1]`.
pub fn power_law_count(u: f64, min: usize, max: usize, exponent: f64) -> usize {
    let raw = (min as f64 * u.powf(-1.0 / exponent)).round();
    if raw.is_finite() && raw < max as f64 {
        (raw as usize).max(min)
    } else {
        max
    }
}

/// Total rows per device (train and test together).
pub fn sample_counts(spec: &SyntheticSpec) -> Vec<usize> {
    let mut rng = rng::stream(spec.seed, Purpose::SampleCounts, 0, 0);
    (0..spec.num_devices)
        .map(|_| {
            let u = 1.0 - rng.random::<f64>();
            power_law_count(u, spec.min_samples, spec.max_samples, spec.power_law_exponent)
        })
        .collect()
}

fn normal_vec(rng: &mut StreamRng, len: usize, mean: f64) -> Vec<f64> {
    (0..len)
        .map(|_| mean + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn draw_model(rng: &mut StreamRng, spec: &SyntheticSpec, mean: f64) -> ParamVector {
    let c = spec.num_classes;
    let d = spec.input_dim;
    ParamVector::from_vec(normal_vec(rng, c * d + c, mean))
}

fn shared_model(spec: &SyntheticSpec) -> ParamVector {
    let mut rng = rng::stream(spec.seed, Purpose::SharedModel, 0, 0);
    draw_model(&mut rng, spec, 0.0)
}

/// Per-device stream; model parameters are always its first draws.
fn device_stream(spec: &SyntheticSpec, device: usize) -> StreamRng {
    rng::stream(spec.seed, Purpose::DeviceData, 0, device as u64)
}

/// Draws `(W_k, b_k)` from the head of a device stream (heterogeneous case).
fn device_model(rng: &mut StreamRng, spec: &SyntheticSpec) -> ParamVector {
    let u_k = Normal::new(0.0, spec.alpha).expect("alpha validated").sample(rng);
    draw_model(rng, spec, u_k)
}

/// The generating `(W_k, b_k)` of every device, packed as logistic parameters.
pub fn generating_models(spec: &SyntheticSpec) -> Result<Vec<ParamVector>> {
    spec.validate()?;
    if spec.iid {
        return Ok(vec![shared_model(spec); spec.num_devices]);
    }
    Ok((0..spec.num_devices)
        .map(|k| device_model(&mut device_stream(spec, k), spec))
        .collect())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    let counts = sample_counts(spec);
    let d = spec.input_dim;
    let model_spec = spec.model_spec();
    let stds: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-1.2).sqrt()).collect();
    let shared = spec.iid.then(|| shared_model(spec));

    let shards = counts
        .iter()
        .enumerate()
        .map(|(k, &rows)| {
            let mut rng = device_stream(spec, k);
            let (model, mean) = match &shared {
                Some(m) => (m.clone(), vec![0.0; d]),
                None => {
                    let model = device_model(&mut rng, spec);
                    let m_k = Normal::new(0.0, spec.beta).expect("beta validated").sample(&mut rng);
                    (model, normal_vec(&mut rng, d, m_k))
                }
            };
            let mut features = Vec::with_capacity(rows * d);
            let mut labels = Vec::with_capacity(rows);
            for _ in 0..rows {
                let start = features.len();
                for j in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(mean[j] + stds[j] * z);
                }
                labels.push(model_spec.predict(&model, &features[start..]) as u32);
            }
            DeviceShard::unsplit(k as u32, d, features, labels)
        })
        .collect();

    let ds = FederatedDataset {
        shards,
        input_dim: d,
        num_classes: spec.num_classes,
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

/// Recompute every shard's labels from the generating models recorded in the
/// dataset's provenance.
pub fn regenerate_labels(dataset: &FederatedDataset) -> Result<Vec<Vec<u32>>> {
    if dataset.provenance.generator != GENERATOR_NAME {
        return Err(DataError::InvalidSpec(format!(
            "labels can only be regenerated for synthetic data, not {}",
            dataset.provenance.generator
        )));
    }
    let spec: SyntheticSpec = serde_json::from_value(dataset.provenance.params.clone())
        .map_err(|e| DataError::Corrupt(format!("synthetic provenance: {e}")))?;
    let models = generating_models(&spec)?;
    let model_spec = spec.model_spec();
    Ok(dataset
        .shards
        .iter()
        .map(|s| {
            let w = &models[s.device_id as usize];
            (0..s.rows()).map(|r| model_spec.predict(w, s.row(r)) as u32).collect()
        })
        .collect())
}
