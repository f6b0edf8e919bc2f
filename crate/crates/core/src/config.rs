//! Experiment configuration: one JSON document, validated up front.
//!
//! ```json
//! {
//!   "dataset": "synthetic_1_1",
//!   "model": "logistic",
//!   "algorithm": "fedprox",
//!   "federation": { "mu": 1, "straggler_fraction": 0.9 },
//!   "telemetry": { "every": 1 },
//!   "runs": [0, 1, 2]
//! }
//! ```
//!
//! `dataset` is either a shorthand string (`synthetic_iid`, `synthetic_A_B`)
//! or an object with a `generator` (`synthetic`, `synthetic_iid`, `mnist`) or
//! a `path` to a saved dataset file. Unknown keys anywhere are an error.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::data::{
    self, load_dataset, load_mnist_dir, partition_mnist, split_train_test, DataError,
    FederatedDataset, MnistPartitionSpec, SyntheticSpec,
};
use crate::federation::{Algorithm, FederationConfig, SamplingScheme, MU_PATIENCE, MU_STEP};
use crate::metrics::DEFAULT_EPSILON;
use crate::model::{ModelKind, ModelSpec, DEFAULT_HIDDEN_DIM};

pub const SYNTHETIC_LEARNING_RATE: f64 = 0.01;
pub const MNIST_LEARNING_RATE: f64 = 0.03;
pub const DEFAULT_CLIENTS_PER_ROUND: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 10;
pub const DEFAULT_LOCAL_EPOCHS: usize = 20;
pub const DEFAULT_ROUNDS: usize = 200;
const MNIST_TELEMETRY_EVERY: usize = 5;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn field_error(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        path: if path.is_empty() { "<root>".into() } else { path.into() },
        message: message.into(),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Typed access to one JSON object that remembers which keys were read.
struct Fields<'a> {
    path: String,
    map: &'a Map<String, Value>,
    read: Vec<&'static str>,
}

impl<'a> Fields<'a> {
    fn new(path: String, value: &'a Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| field_error(&path, "expected an object"))?;
        Ok(Fields { path, map, read: Vec::new() })
    }

    fn path_of(&self, key: &str) -> String {
        join(&self.path, key)
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Value> {
        self.read.push(key);
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn f64(&mut self, key: &'static str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| field_error(&self.path_of(key), "expected a number")),
        }
    }

    fn u64(&mut self, key: &'static str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| field_error(&self.path_of(key), "expected a non-negative integer"))
            })
            .transpose()
    }

    fn usize(&mut self, key: &'static str, default: usize) -> Result<usize> {
        Ok(self.u64(key)?.map_or(default, |v| v as usize))
    }

    fn bool(&mut self, key: &'static str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_bool()
                .ok_or_else(|| field_error(&self.path_of(key), "expected true or false")),
        }
    }

    fn str(&mut self, key: &'static str) -> Result<Option<&'a str>> {
        self.get(key)
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| field_error(&self.path_of(key), "expected a string"))
            })
            .transpose()
    }

    fn finish(self) -> Result<()> {
        let mut unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !self.read.contains(&k.as_str()))
            .collect();
        unknown.sort();
        match unknown.first() {
            Some(k) => Err(field_error(&self.path_of(k), "unknown field")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// `spec.seed` is replaced by the run seed unless `fixed_seed` is set.
    Synthetic {
        spec: SyntheticSpec,
        fixed_seed: bool,
        train_fraction: f64,
    },
    Mnist {
        dir: PathBuf,
        partition: MnistPartitionSpec,
        fixed_seed: bool,
        train_fraction: f64,
    },
    File { path: PathBuf },
}

impl DatasetConfig {
    fn is_mnist(&self) -> bool {
        matches!(self, DatasetConfig::Mnist { .. })
    }

    fn is_iid(&self) -> bool {
        matches!(self, DatasetConfig::Synthetic { spec, .. } if spec.iid)
    }

    /// Dataset for one run; generator seeds follow the run seed unless fixed.
    pub fn build(&self, run_seed: u64) -> std::result::Result<FederatedDataset, DataError> {
        match self {
            DatasetConfig::Synthetic { spec, fixed_seed, train_fraction } => {
                let mut spec = spec.clone();
                if !fixed_seed {
                    spec.seed = run_seed;
                }
                split_train_test(&data::generate_synthetic(&spec)?, *train_fraction, spec.seed)
            }
            DatasetConfig::Mnist { dir, partition, fixed_seed, train_fraction } => {
                let mut partition = partition.clone();
                if !fixed_seed {
                    partition.seed = run_seed;
                }
                let (images, labels) = load_mnist_dir(dir)?;
                split_train_test(&partition_mnist(&images, &labels, &partition)?, *train_fraction, partition.seed)
            }
            DatasetConfig::File { path } => load_dataset(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryConfig {
    pub every: usize,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelKind,
    /// `master_seed` is set per run from `runs`.
    pub federation: FederationConfig,
    pub telemetry: TelemetryConfig,
    pub runs: Vec<u64>,
}

impl ExperimentConfig {
    pub fn model_spec(&self, dataset: &FederatedDataset) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            input_dim: dataset.input_dim,
            num_classes: dataset.num_classes,
        }
    }

    pub fn federation_for(&self, run_seed: u64) -> FederationConfig {
        FederationConfig {
            master_seed: run_seed,
            ..self.federation.clone()
        }
    }
}

fn synthetic_shorthand(name: &str) -> Option<SyntheticSpec> {
    if name == "synthetic_iid" {
        return Some(SyntheticSpec::iid(0));
    }
    let rest = name.strip_prefix("synthetic_")?;
    let (a, b) = rest.split_once('_')?;
    Some(SyntheticSpec::heterogeneous(a.parse().ok()?, b.parse().ok()?, 0))
}

fn parse_split(f: &mut Fields<'_>) -> Result<f64> {
    let fraction = f.f64("train_fraction", data::DEFAULT_TRAIN_FRACTION)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(field_error(&f.path_of("train_fraction"), format!("must be in (0, 1), got {fraction}")));
    }
    Ok(fraction)
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

fn parse_dataset(value: Option<&Value>, base: Option<&Path>) -> Result<DatasetConfig> {
    let path = "dataset";
    let value = value.ok_or_else(|| field_error(path, "required"))?;
    if let Some(name) = value.as_str() {
        let spec = synthetic_shorthand(name).ok_or_else(|| {
            field_error(path, format!("unknown dataset {name:?}; use synthetic_iid, synthetic_A_B or an object"))
        })?;
        return Ok(DatasetConfig::Synthetic {
            spec,
            fixed_seed: false,
            train_fraction: data::DEFAULT_TRAIN_FRACTION,
        });
    }
    let mut f = Fields::new(path.into(), value)?;
    if let Some(file) = f.str("path")? {
        f.finish()?;
        return Ok(DatasetConfig::File { path: resolve(base, file) });
    }
    let generator = f
        .str("generator")?
        .ok_or_else(|| field_error(&f.path_of("generator"), "required unless `path` is given"))?;
    let config = match generator {
        "synthetic" | "synthetic_iid" => {
            let iid = generator == "synthetic_iid";
            let d = SyntheticSpec::heterogeneous(0.0, 0.0, 0);
            let (alpha, beta) = if iid {
                (0.0, 0.0)
            } else {
                (f.f64("alpha", 0.0)?, f.f64("beta", 0.0)?)
            };
            let seed = f.u64("seed")?;
            let spec = SyntheticSpec {
                alpha,
                beta,
                iid,
                num_devices: f.usize("num_devices", d.num_devices)?,
                input_dim: f.usize("input_dim", d.input_dim)?,
                num_classes: f.usize("num_classes", d.num_classes)?,
                power_law_exponent: f.f64("power_law_exponent", d.power_law_exponent)?,
                min_samples: f.usize("min_samples", d.min_samples)?,
                max_samples: f.usize("max_samples", d.max_samples)?,
                seed: seed.unwrap_or(0),
            };
            spec.validate().map_err(|e| field_error(path, e.to_string()))?;
            DatasetConfig::Synthetic {
                spec,
                fixed_seed: seed.is_some(),
                train_fraction: parse_split(&mut f)?,
            }
        }
        "mnist" => {
            let d = MnistPartitionSpec::standard(0);
            let dir = f
                .str("dir")?
                .ok_or_else(|| field_error(&f.path_of("dir"), "required for mnist"))?;
            let seed = f.u64("seed")?;
            DatasetConfig::Mnist {
                dir: resolve(base, dir),
                partition: MnistPartitionSpec {
                    num_devices: f.usize("num_devices", d.num_devices)?,
                    classes_per_device: f.usize("classes_per_device", d.classes_per_device)?,
                    power_law_exponent: f.f64("power_law_exponent", d.power_law_exponent)?,
                    min_samples: f.usize("min_samples", d.min_samples)?,
                    max_samples: f.usize("max_samples", d.max_samples)?,
                    seed: seed.unwrap_or(0),
                },
                fixed_seed: seed.is_some(),
                train_fraction: parse_split(&mut f)?,
            }
        }
        other => {
            return Err(field_error(
                &f.path_of("generator"),
                format!("unknown generator {other:?}; expected synthetic, synthetic_iid or mnist"),
            ))
        }
    };
    f.finish()?;
    Ok(config)
}

fn parse_model(value: Option<&Value>) -> Result<ModelKind> {
    let path = "model";
    let (kind, mut fields) = match value {
        None => return Ok(ModelKind::Logistic),
        Some(Value::String(s)) => (s.as_str(), None),
        Some(v) => {
            let mut f = Fields::new(path.into(), v)?;
            let kind = f
                .str("kind")?
                .ok_or_else(|| field_error(&f.path_of("kind"), "required"))?;
            (kind, Some(f))
        }
    };
    let model = match kind {
        "logistic" => ModelKind::Logistic,
        "mlp" => {
            let hidden_dim = match fields.as_mut() {
                Some(f) => f.usize("hidden_dim", DEFAULT_HIDDEN_DIM)?,
                None => DEFAULT_HIDDEN_DIM,
            };
            if hidden_dim < 1 {
                return Err(field_error("model.hidden_dim", "must be at least 1"));
            }
            ModelKind::Mlp { hidden_dim }
        }
        other => return Err(field_error(path, format!("unknown model {other:?}; expected logistic or mlp"))),
    };
    if let Some(f) = fields {
        f.finish()?;
    }
    Ok(model)
}

fn parse_algorithm(value: Option<&Value>) -> Result<Algorithm> {
    let value = value.ok_or_else(|| field_error("algorithm", "required"))?;
    match value.as_str() {
        Some("fedavg") => Ok(Algorithm::FedAvg),
        Some("fedprox") => Ok(Algorithm::FedProx),
        Some("feddane") => Ok(Algorithm::FedDane),
        _ => Err(field_error("algorithm", format!("expected fedavg, fedprox or feddane, got {value}"))),
    }
}

fn parse_federation(value: Option<&Value>, algorithm: Algorithm, dataset: &DatasetConfig) -> Result<FederationConfig> {
    let empty = Value::Object(Map::new());
    let mut f = Fields::new("federation".into(), value.unwrap_or(&empty))?;
    let adaptive_mu = f.bool("adaptive_mu", false)?;
    // Adaptive runs start adversarially: μ₀ = 1 on IID data, 0 otherwise.
    let mu_default = if adaptive_mu && dataset.is_iid() { 1.0 } else { 0.0 };
    let lr_default = if dataset.is_mnist() { MNIST_LEARNING_RATE } else { SYNTHETIC_LEARNING_RATE };
    let scheme = match f.str("sampling_scheme")? {
        None | Some("uniform_sample_weighted_avg") => SamplingScheme::UniformSampleWeightedAvg,
        Some("weighted_sample_simple_avg") => SamplingScheme::WeightedSampleSimpleAvg,
        Some(other) => {
            return Err(field_error(
                &f.path_of("sampling_scheme"),
                format!("expected weighted_sample_simple_avg or uniform_sample_weighted_avg, got {other:?}"),
            ))
        }
    };
    let cfg = FederationConfig {
        algorithm,
        clients_per_round: f.usize("clients_per_round", DEFAULT_CLIENTS_PER_ROUND)?,
        rounds: f.usize("rounds", DEFAULT_ROUNDS)?,
        local_epochs: f.usize("local_epochs", DEFAULT_LOCAL_EPOCHS)?,
        mu: f.f64("mu", mu_default)?,
        learning_rate: f.f64("learning_rate", lr_default)?,
        batch_size: f.usize("batch_size", DEFAULT_BATCH_SIZE)?,
        straggler_fraction: f.f64("straggler_fraction", 0.0)?,
        sampling_scheme: scheme,
        adaptive_mu,
        mu_step: f.f64("mu_step", MU_STEP)?,
        mu_patience: f.usize("mu_patience", MU_PATIENCE)?,
        feddane_full_participation: f.bool("feddane_full_participation", false)?,
        telemetry_every: 1,
        epsilon: f.f64("epsilon", DEFAULT_EPSILON)?,
        master_seed: 0,
    };
    // Field-level checks that do not depend on the device count.
    let checks: [(&str, bool, String); 8] = [
        ("clients_per_round", cfg.clients_per_round >= 1, "must be at least 1".into()),
        ("local_epochs", cfg.local_epochs >= 1, "must be at least 1".into()),
        ("batch_size", cfg.batch_size >= 1, "must be at least 1".into()),
        (
            "learning_rate",
            cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite(),
            format!("must be positive, got {}", cfg.learning_rate),
        ),
        (
            "straggler_fraction",
            (0.0..1.0).contains(&cfg.straggler_fraction),
            format!("must be in [0, 1), got {}", cfg.straggler_fraction),
        ),
        (
            "mu",
            cfg.mu >= 0.0 && cfg.mu.is_finite() && !(algorithm == Algorithm::FedAvg && cfg.mu != 0.0),
            if algorithm == Algorithm::FedAvg {
                format!("fedavg requires mu = 0, got {}", cfg.mu)
            } else {
                format!("must be >= 0, got {}", cfg.mu)
            },
        ),
        (
            "adaptive_mu",
            !(algorithm == Algorithm::FedAvg && adaptive_mu),
            "fedavg cannot adapt mu".into(),
        ),
        ("epsilon", cfg.epsilon > 0.0, format!("must be positive, got {}", cfg.epsilon)),
    ];
    for (key, ok, message) in checks {
        if !ok {
            return Err(field_error(&f.path_of(key), message));
        }
    }
    if !(cfg.mu_step >= 0.0 && cfg.mu_step.is_finite()) {
        return Err(field_error(&f.path_of("mu_step"), "must be >= 0"));
    }
    if cfg.mu_patience < 1 {
        return Err(field_error(&f.path_of("mu_patience"), "must be at least 1"));
    }
    f.finish()?;
    Ok(cfg)
}

fn parse_telemetry(value: Option<&Value>, dataset: &DatasetConfig, base: Option<&Path>) -> Result<TelemetryConfig> {
    let empty = Value::Object(Map::new());
    let mut f = Fields::new("telemetry".into(), value.unwrap_or(&empty))?;
    let default_every = if dataset.is_mnist() { MNIST_TELEMETRY_EVERY } else { 1 };
    let every = f.usize("every", default_every)?;
    if every < 1 {
        return Err(field_error(&f.path_of("every"), "must be at least 1"));
    }
    let out_dir = f.str("out_dir")?.map(|p| resolve(base, p));
    f.finish()?;
    Ok(TelemetryConfig { every, out_dir })
}

fn parse_runs(value: Option<&Value>) -> Result<Vec<u64>> {
    let Some(value) = value else {
        return Ok(vec![0]);
    };
    let list = value
        .as_array()
        .ok_or_else(|| field_error("runs", "expected a list of seeds"))?;
    if list.is_empty() {
        return Err(field_error("runs", "needs at least one seed"));
    }
    list.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_u64()
                .ok_or_else(|| field_error(&format!("runs[{i}]"), "expected a non-negative integer"))
        })
        .collect()
}

/// Parses and validates a config document. Relative paths inside it are
/// resolved against `base` when given.
pub fn parse_config_with_base(text: &str, base: Option<&Path>) -> Result<ExperimentConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
    let mut f = Fields::new(String::new(), &root)?;
    let dataset = parse_dataset(f.get("dataset"), base)?;
    let model = parse_model(f.get("model"))?;
    let algorithm = parse_algorithm(f.get("algorithm"))?;
    let mut federation = parse_federation(f.get("federation"), algorithm, &dataset)?;
    let telemetry = parse_telemetry(f.get("telemetry"), &dataset, base)?;
    federation.telemetry_every = telemetry.every;
    let runs = parse_runs(f.get("runs"))?;
    f.finish()?;

    let devices = match &dataset {
        DatasetConfig::Synthetic { spec, .. } => Some(spec.num_devices),
        DatasetConfig::Mnist { partition, .. } => Some(partition.num_devices),
        DatasetConfig::File { .. } => None,
    };
    if let Some(n) = devices {
        if federation.clients_per_round > n {
            return Err(field_error(
                "federation.clients_per_round",
                format!("{} exceeds the {n} devices of the dataset", federation.clients_per_round),
            ));
        }
    }
    Ok(ExperimentConfig {
        dataset,
        model,
        federation,
        telemetry,
        runs,
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with_base(text, None)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_with_base(&text, path.parent())
}
