//! Training rounds: device sampling, straggler epochs, local solves,
//! aggregation and the adaptive-μ controller, for FedAvg, FedProx and FedDane.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FederatedDataset;
use crate::metrics::{self, ConvergenceStatus, DissimilarityReading, MetricsError};
use crate::model::{ModelError, ModelSpec, ParamVector};
use crate::rng::{self, Purpose, StreamRng};
use crate::solver::{self, SolverConfig, SolverError, SolverReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("no updates to aggregate")]
    EmptyAggregate,
    #[error("global parameters became non-finite in round {0}")]
    NonFiniteModel(usize),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedDane,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedDane => "feddane",
        }
    }
}

/// How devices are drawn and how their updates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    /// Draw with probability `p_k`, with replacement; plain mean of updates.
    WeightedSampleSimpleAvg,
    /// Draw uniformly without replacement; mean weighted by `n_k`.
    UniformSampleWeightedAvg,
}

pub const MU_STEP: f64 = 0.1;
pub const MU_PATIENCE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub mu: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub straggler_fraction: f64,
    pub sampling_scheme: SamplingScheme,
    pub adaptive_mu: bool,
    pub mu_step: f64,
    pub mu_patience: usize,
    /// FedDane only: estimate the averaged gradient from every device rather
    /// than the sampled ones.
    pub feddane_full_participation: bool,
    /// Compute loss, accuracy and dissimilarity every this many rounds
    /// (forced to 1 while adaptive μ is on).
    pub telemetry_every: usize,
    pub epsilon: f64,
    pub master_seed: u64,
}

impl FederationConfig {
    pub fn new(algorithm: Algorithm, master_seed: u64) -> Self {
        FederationConfig {
            algorithm,
            clients_per_round: 10,
            rounds: 200,
            local_epochs: 20,
            mu: 0.0,
            learning_rate: 0.01,
            batch_size: 10,
            straggler_fraction: 0.0,
            sampling_scheme: SamplingScheme::UniformSampleWeightedAvg,
            adaptive_mu: false,
            mu_step: MU_STEP,
            mu_patience: MU_PATIENCE,
            feddane_full_participation: false,
            telemetry_every: 1,
            epsilon: metrics::DEFAULT_EPSILON,
            master_seed,
        }
    }

    pub fn validate(&self, num_devices: usize) -> Result<()> {
        let bad = |m: String| Err(FederationError::InvalidConfig(m));
        if self.clients_per_round < 1 || self.clients_per_round > num_devices {
            return bad(format!(
                "clients_per_round must be in 1..={num_devices}, got {}",
                self.clients_per_round
            ));
        }
        if !(0.0..1.0).contains(&self.straggler_fraction) {
            return bad(format!(
                "straggler_fraction must be in [0, 1), got {}",
                self.straggler_fraction
            ));
        }
        if self.algorithm == Algorithm::FedAvg && self.mu != 0.0 {
            return bad(format!("fedavg requires mu = 0, got {}", self.mu));
        }
        if self.algorithm == Algorithm::FedAvg && self.adaptive_mu {
            return bad("fedavg cannot use adaptive mu".into());
        }
        if self.telemetry_every < 1 {
            return bad("telemetry_every must be at least 1".into());
        }
        if !(self.mu_step >= 0.0 && self.mu_step.is_finite()) || self.mu_patience < 1 {
            return bad("adaptive mu needs mu_step >= 0 and mu_patience >= 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        self.solver_config(self.local_epochs, self.mu).validate()?;
        Ok(())
    }

    fn solver_config(&self, epochs: usize, mu: f64) -> SolverConfig {
        SolverConfig::new(epochs, self.learning_rate, self.batch_size, mu)
    }

    fn telemetry_due(&self, t: usize) -> bool {
        self.adaptive_mu || t.is_multiple_of(self.telemetry_every) || t + 1 == self.rounds
    }
}

/// Raises μ when the loss goes up and lowers it after `patience` consecutive
/// decreases. An unchanged loss breaks a decrease streak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuController {
    pub mu: f64,
    pub step: f64,
    pub patience: usize,
    pub streak: usize,
}

impl MuController {
    pub fn new(mu: f64) -> Self {
        Self::with_params(mu, MU_STEP, MU_PATIENCE)
    }

    pub fn with_params(mu: f64, step: f64, patience: usize) -> Self {
        MuController {
            mu,
            step,
            patience,
            streak: 0,
        }
    }

    pub fn update(&mut self, loss: f64, previous: f64) -> f64 {
        if loss > previous || (loss.is_nan() && !previous.is_nan()) {
            self.mu += self.step;
            self.streak = 0;
        } else if loss < previous {
            self.streak += 1;
            if self.streak >= self.patience {
                self.mu = (self.mu - self.step).max(0.0);
                self.streak = 0;
            }
        } else {
            self.streak = 0;
        }
        self.mu
    }
}

pub fn sample_devices(
    scheme: SamplingScheme,
    weights: &[f64],
    k: usize,
    rng: &mut StreamRng,
) -> Result<Vec<u32>> {
    let n = weights.len();
    if k < 1 || k > n {
        return Err(FederationError::InvalidConfig(format!(
            "cannot select {k} of {n} devices"
        )));
    }
    Ok(match scheme {
        SamplingScheme::WeightedSampleSimpleAvg => {
            let dist = WeightedIndex::new(weights)
                .map_err(|e| FederationError::InvalidConfig(format!("device weights: {e}")))?;
            (0..k).map(|_| dist.sample(rng) as u32).collect()
        }
        SamplingScheme::UniformSampleWeightedAvg => {
            index::sample(rng, n, k).into_iter().map(|i| i as u32).collect()
        }
    })
}

/// Number of stragglers among `k` selected devices.
pub fn straggler_count(k: usize, fraction: f64) -> usize {
    ((fraction * k as f64).round() as usize).min(k)
}

/// Epochs for each of `k` selection slots: `round(fraction·k)` random slots
/// get `Uniform{1..E}`, the rest get `E`. Returns `(epochs, is_straggler)`.
pub fn assign_stragglers(
    k: usize,
    fraction: f64,
    max_epochs: usize,
    rng: &mut StreamRng,
) -> (Vec<usize>, Vec<bool>) {
    let mut epochs = vec![max_epochs; k];
    let mut flags = vec![false; k];
    let mut slots = index::sample(rng, k, straggler_count(k, fraction)).into_vec();
    slots.sort_unstable();
    for slot in slots {
        flags[slot] = true;
        epochs[slot] = rng.random_range(1..=max_epochs.max(1));
    }
    (epochs, flags)
}

#[derive(Debug, Clone, Copy)]
pub struct Update<'a> {
    pub device_id: u32,
    pub params: &'a [f64],
    pub samples: usize,
}

pub fn aggregate(updates: &[Update<'_>], scheme: SamplingScheme) -> Result<ParamVector> {
    let first = updates.first().ok_or(FederationError::EmptyAggregate)?;
    let mut out = ParamVector::zeros(first.params.len());
    let mut total = 0.0;
    for u in updates {
        if u.params.len() != out.len() {
            return Err(ModelError::DimensionMismatch {
                what: "update",
                expected: out.len(),
                got: u.params.len(),
            }
            .into());
        }
        let c = match scheme {
            SamplingScheme::WeightedSampleSimpleAvg => 1.0,
            SamplingScheme::UniformSampleWeightedAvg => u.samples as f64,
        };
        out.axpy(c, u.params);
        total += c;
    }
    out.scale(1.0 / total);
    Ok(out)
}

/// Per-slot outcome of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceOutcome {
    pub device_id: u32,
    pub epochs: usize,
    pub straggler: bool,
    /// `None` when the local solve diverged.
    pub gamma: Option<f64>,
    pub dropped: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub algorithm: Algorithm,
    /// μ used by the local solves of this round.
    pub mu: f64,
    pub selected: Vec<u32>,
    pub devices: Vec<DeviceOutcome>,
    /// FedAvg stragglers whose updates were discarded.
    pub dropped: Vec<u32>,
    /// Every update was dropped or diverged, so the model was left unchanged.
    pub aborted: bool,
    /// Mean attained γ over solves that did not diverge.
    pub mean_gamma: Option<f64>,
    /// Telemetry at the post-round model; absent on rounds skipped by the cadence.
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub dissimilarity: Option<DissimilarityReading>,
    pub status: ConvergenceStatus,
}

/// Mutable state carried between rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub w: ParamVector,
    pub mu: f64,
    pub controller: Option<MuController>,
    pub loss_history: Vec<f64>,
}

impl FederationState {
    pub fn new(cfg: &FederationConfig, w0: ParamVector) -> Self {
        FederationState {
            w: w0,
            mu: cfg.mu,
            controller: cfg
                .adaptive_mu
                .then(|| MuController::with_params(cfg.mu, cfg.mu_step, cfg.mu_patience)),
            loss_history: Vec::new(),
        }
    }
}

/// FedDane corrections `∇F_k(w^t) − ḡ` for the given devices, where `ḡ` is
/// the `n_k`-weighted mean gradient over `pool`.
fn feddane_corrections(
    dataset: &FederatedDataset,
    spec: &ModelSpec,
    w: &[f64],
    devices: &[u32],
    pool: &[u32],
) -> Result<Vec<ParamVector>> {
    let gradient = |d: u32| -> Result<ParamVector> {
        let shard = &dataset.shards[d as usize];
        Ok(crate::model::local_gradient(spec, w, &shard.train_batch()?)?)
    };
    let pool_grads: Vec<ParamVector> = pool.par_iter().map(|&d| gradient(d)).collect::<Result<_>>()?;
    let mass: f64 = pool.iter().map(|&d| dataset.shards[d as usize].n_train() as f64).sum();
    // ḡ = g₀ + Σ p_i (g_i − g₀), exact when all g_i agree.
    let mut mean = pool_grads[0].clone();
    for (&d, g) in pool.iter().zip(&pool_grads) {
        let p = dataset.shards[d as usize].n_train() as f64 / mass;
        mean.axpy(p, &g.sub(&pool_grads[0]));
    }
    devices
        .iter()
        .map(|&d| {
            let g = match pool.iter().position(|&p| p == d) {
                Some(i) => pool_grads[i].clone(),
                None => gradient(d)?,
            };
            Ok(g.sub(&mean))
        })
        .collect()
}

fn unique_in_order<T: PartialEq + Copy>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// One round from `state.w`; updates `state` in place.
pub fn run_round(
    state: &mut FederationState,
    cfg: &FederationConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    t: usize,
) -> Result<RoundRecord> {
    let seed = cfg.master_seed;
    let round = t as u64;
    let k = cfg.clients_per_round;
    let selected = sample_devices(
        cfg.sampling_scheme,
        &dataset.weights(),
        k,
        &mut rng::stream(seed, Purpose::Selection, round, 0),
    )?;
    let (epochs, stragglers) = assign_stragglers(
        k,
        cfg.straggler_fraction,
        cfg.local_epochs,
        &mut rng::stream(seed, Purpose::Stragglers, round, 0),
    );
    let mu = if cfg.algorithm == Algorithm::FedAvg { 0.0 } else { state.mu };

    // A device drawn twice with the same epoch budget is solved once.
    let jobs = unique_in_order(selected.iter().copied().zip(epochs.iter().copied()));
    let corrections = if cfg.algorithm == Algorithm::FedDane {
        let devices = unique_in_order(selected.iter().copied());
        let pool: Vec<u32> = if cfg.feddane_full_participation {
            (0..dataset.num_devices() as u32).collect()
        } else {
            devices.clone()
        };
        let c = feddane_corrections(dataset, spec, &state.w, &devices, &pool)?;
        Some((devices, c))
    } else {
        None
    };

    let anchor = &state.w;
    let solved: Vec<(ParamVector, SolverReport)> = jobs
        .par_iter()
        .map(|&(device, e)| {
            let shard = &dataset.shards[device as usize];
            let mut stream = rng::stream(seed, Purpose::Minibatch, round, device as u64);
            let correction = corrections.as_ref().map(|(devices, c)| {
                let i = devices.iter().position(|&d| d == device).expect("selected device");
                &c[i][..]
            });
            solver::solve_local_corrected(spec, shard, anchor, &cfg.solver_config(e, mu), correction, &mut stream)
        })
        .collect::<std::result::Result<_, SolverError>>()?;

    let mut devices = Vec::with_capacity(k);
    let mut updates = Vec::with_capacity(k);
    for slot in 0..k {
        let device = selected[slot];
        let job = jobs.iter().position(|&j| j == (device, epochs[slot])).expect("job exists");
        let (w_k, report) = &solved[job];
        let dropped = cfg.algorithm == Algorithm::FedAvg && stragglers[slot];
        if !dropped && !report.diverged {
            updates.push(Update {
                device_id: device,
                params: &w_k[..],
                samples: dataset.shards[device as usize].n_train(),
            });
        }
        devices.push(DeviceOutcome {
            device_id: device,
            epochs: epochs[slot],
            straggler: stragglers[slot],
            gamma: (!report.diverged).then_some(report.attained_gamma),
            dropped,
            diverged: report.diverged,
        });
    }

    let aborted = updates.is_empty();
    if aborted {
        log::warn!("round {t}: no usable updates, keeping the current model");
    } else {
        let next = aggregate(&updates, cfg.sampling_scheme)?;
        if !next.is_finite() {
            return Err(FederationError::NonFiniteModel(t));
        }
        state.w = next;
    }

    let gammas: Vec<f64> = devices.iter().filter_map(|d| d.gamma).collect();
    let mut record = RoundRecord {
        round: t,
        algorithm: cfg.algorithm,
        mu,
        selected,
        dropped: devices.iter().filter(|d| d.dropped).map(|d| d.device_id).collect(),
        devices,
        aborted,
        mean_gamma: (!gammas.is_empty()).then(|| gammas.iter().sum::<f64>() / gammas.len() as f64),
        train_loss: None,
        test_accuracy: None,
        dissimilarity: None,
        status: ConvergenceStatus::Running,
    };

    if cfg.telemetry_due(t) {
        let snap = metrics::snapshot(dataset, spec, &state.w, cfg.epsilon)?;
        record.train_loss = Some(snap.loss);
        record.test_accuracy = metrics::test_accuracy(dataset, spec, &state.w)?;
        record.dissimilarity = Some(snap.dissimilarity);
        if let (Some(ctl), Some(&previous)) = (state.controller.as_mut(), state.loss_history.last()) {
            state.mu = ctl.update(snap.loss, previous);
        }
        state.loss_history.push(snap.loss);
    }
    record.status = metrics::detect_convergence(&state.loss_history);
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
    /// `f(w⁰)`, recorded before the first round.
    pub initial_loss: f64,
}

/// `cfg.rounds` rounds from `w⁰` (zeros for logistic regression).
pub fn run_experiment(
    cfg: &FederationConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
) -> Result<ExperimentOutcome> {
    run_experiment_from(cfg, spec, dataset, spec.initial_params(cfg.master_seed))
}

pub fn run_experiment_from(
    cfg: &FederationConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    w0: ParamVector,
) -> Result<ExperimentOutcome> {
    cfg.validate(dataset.num_devices())?;
    spec.validate()?;
    if w0.len() != spec.num_params() {
        return Err(ModelError::DimensionMismatch {
            what: "initial parameters",
            expected: spec.num_params(),
            got: w0.len(),
        }
        .into());
    }
    let mut state = FederationState::new(cfg, w0);
    let initial_loss = metrics::global_loss(dataset, spec, &state.w)?;
    state.loss_history.push(initial_loss);
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let record = run_round(&mut state, cfg, spec, dataset, t)?;
        log::debug!(
            "round {t}: loss {:?} mu {} status {}",
            record.train_loss,
            record.mu,
            record.status.as_str()
        );
        records.push(record);
    }
    Ok(ExperimentOutcome {
        records,
        final_params: state.w,
        initial_loss,
    })
}
