//! Diagnostics: the global objective, B-local dissimilarity and gradient
//! variance, smoothness estimates, the sufficient-decrease constant ρ and the
//! convergence/divergence detector.
//!
//! All gradients here are full-batch over each device's training rows, and
//! per-device terms are reduced in device order so results do not depend on
//! thread scheduling.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FederatedDataset;
use crate::model::{self, ModelError, ModelSpec, ParamVector};
use crate::rng::{self, Purpose};

/// Default ε for the Assumption-1 boundary flag.
pub const DEFAULT_EPSILON: f64 = 1e-10;
/// `|E‖∇F_k‖² − ‖∇f‖²|` below this triggers the `B = 1` convention.
pub const EXCEPTION_TOLERANCE: f64 = 1e-12;
pub const CONVERGED_DELTA: f64 = 1e-4;
pub const DIVERGED_RISE: f64 = 1.0;
pub const DIVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("mu_bar = mu - L_minus must be positive, got {0}")]
    MuBarNotPositive(f64),
    #[error("rho must be positive for an iteration estimate, got {0}")]
    RhoNotPositive(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Loss and full training gradient of every device at one point.
#[derive(Debug, Clone)]
pub struct DeviceTerms {
    pub losses: Vec<f64>,
    pub gradients: Vec<ParamVector>,
}

pub fn device_terms(dataset: &FederatedDataset, spec: &ModelSpec, w: &[f64]) -> Result<DeviceTerms> {
    let terms: Vec<(f64, ParamVector)> = dataset
        .shards
        .par_iter()
        .map(|s| {
            let (loss, g) = spec.loss_and_gradient(w, &s.train_batch()?, true)?;
            Ok((loss, g.expect("gradient requested")))
        })
        .collect::<std::result::Result<_, ModelError>>()?;
    let (losses, gradients) = terms.into_iter().unzip();
    Ok(DeviceTerms { losses, gradients })
}

fn weighted_sum(weights: &[f64], values: impl Iterator<Item = f64>) -> f64 {
    weights.iter().zip(values).map(|(p, v)| p * v).sum()
}

/// `f(w) = Σ_k p_k F_k(w)`.
pub fn global_loss(dataset: &FederatedDataset, spec: &ModelSpec, w: &[f64]) -> Result<f64> {
    let losses: Vec<f64> = dataset
        .shards
        .par_iter()
        .map(|s| model::local_loss(spec, w, &s.train_batch()?))
        .collect::<std::result::Result<_, ModelError>>()?;
    Ok(weighted_sum(&dataset.weights(), losses.into_iter()))
}

/// Fraction of all devices' test rows classified correctly; `None` without test rows.
pub fn test_accuracy(dataset: &FederatedDataset, spec: &ModelSpec, w: &[f64]) -> Result<Option<f64>> {
    let counts: Vec<(usize, usize)> = dataset
        .shards
        .par_iter()
        .map(|s| match s.test_batch() {
            Some(b) => {
                let acc = model::accuracy(spec, w, &b)?;
                Ok(((acc * b.len() as f64).round() as usize, b.len()))
            }
            None => Ok((0, 0)),
        })
        .collect::<std::result::Result<_, ModelError>>()?;
    let (correct, total) = counts
        .into_iter()
        .fold((0, 0), |(c, t), (ci, ti)| (c + ci, t + ti));
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityReading {
    /// `B(w)`, or exactly 1 when the exception applies. Infinite when
    /// `∇f(w) = 0` but local gradients disagree.
    pub b: f64,
    /// `σ̂² = E_k‖∇F_k(w) − ∇f(w)‖²`
    pub grad_variance: f64,
    pub global_grad_norm_sq: f64,
    /// `E_k‖∇F_k(w)‖²`
    pub mean_local_grad_norm_sq: f64,
    pub exception_triggered: bool,
    /// `‖∇f(w)‖² ≤ ε`, i.e. outside the region where bounded dissimilarity is assumed.
    pub below_epsilon: bool,
}

/// Dissimilarity statistics from per-device gradients and masses `p_k`.
pub fn dissimilarity_from_gradients(
    gradients: &[ParamVector],
    weights: &[f64],
    epsilon: f64,
) -> DissimilarityReading {
    let dim = gradients.first().map_or(0, |g| g.len());
    let mut global = ParamVector::zeros(dim);
    for (g, &p) in gradients.iter().zip(weights) {
        global.axpy(p, g);
    }
    let global_sq = global.norm_sq();
    let mean_local_sq = weighted_sum(weights, gradients.iter().map(|g| g.norm_sq()));
    let variance = weighted_sum(
        weights,
        gradients.iter().map(|g| g.sub(&global).norm_sq()),
    );
    let exception = (mean_local_sq - global_sq).abs() < EXCEPTION_TOLERANCE;
    let b = if exception {
        1.0
    } else {
        (mean_local_sq / global_sq).sqrt()
    };
    DissimilarityReading {
        b,
        grad_variance: variance,
        global_grad_norm_sq: global_sq,
        mean_local_grad_norm_sq: mean_local_sq,
        exception_triggered: exception,
        below_epsilon: global_sq <= epsilon,
    }
}

pub fn dissimilarity(
    dataset: &FederatedDataset,
    spec: &ModelSpec,
    w: &[f64],
    epsilon: f64,
) -> Result<DissimilarityReading> {
    let terms = device_terms(dataset, spec, w)?;
    Ok(dissimilarity_from_gradients(&terms.gradients, &dataset.weights(), epsilon))
}

/// Loss, full gradient and dissimilarity in one pass over the devices.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub loss: f64,
    pub gradient: ParamVector,
    pub dissimilarity: DissimilarityReading,
}

pub fn snapshot(dataset: &FederatedDataset, spec: &ModelSpec, w: &[f64], epsilon: f64) -> Result<Snapshot> {
    let terms = device_terms(dataset, spec, w)?;
    let weights = dataset.weights();
    let loss = weighted_sum(&weights, terms.losses.iter().copied());
    let mut gradient = ParamVector::zeros(w.len());
    for (g, &p) in terms.gradients.iter().zip(&weights) {
        gradient.axpy(p, g);
    }
    Ok(Snapshot {
        loss,
        gradient,
        dissimilarity: dissimilarity_from_gradients(&terms.gradients, &weights, epsilon),
    })
}

/// `√(1 + σ²/ε)`, the bound on `B_ε` under bounded gradient variance.
pub fn bounded_variance_bound(sigma_sq: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(MetricsError::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(sigma_sq >= 0.0) {
        return Err(MetricsError::InvalidInput(format!("sigma^2 must be >= 0, got {sigma_sq}")));
    }
    Ok((1.0 + sigma_sq / epsilon).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub l: f64,
    pub l_minus: f64,
}

/// Largest `‖∇f(u) − ∇f(v)‖ / ‖u − v‖` over consecutive pairs of `points`.
pub fn lipschitz_from_pairs<G>(mut grad: G, points: &[ParamVector]) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<ParamVector>,
{
    let mut best: Option<f64> = None;
    for pair in points.chunks_exact(2) {
        let dist = pair[0].distance(&pair[1]);
        if !(dist > 0.0) {
            continue;
        }
        let diff = grad(&pair[0])?.distance(&grad(&pair[1])?);
        let ratio = diff / dist;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.ok_or_else(|| MetricsError::InvalidInput("no non-degenerate sample pairs".into()))
}

/// Power iteration on `shift·I + sign·H`, with Hessian-vector products from
/// central gradient differences. Returns the Rayleigh quotient.
fn shifted_power_iteration<G>(
    mut grad: G,
    at: &[f64],
    shift: f64,
    sign: f64,
    iterations: usize,
    seed: u64,
) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<ParamVector>,
{
    const H: f64 = 1e-4;
    let mut rng = rng::stream(seed, Purpose::Smoothness, 1, 0);
    let mut v = ParamVector::from_vec(at.iter().map(|_| rng.sample(StandardNormal)).collect());
    let norm = v.norm();
    v.scale(1.0 / norm);
    let mut quotient = 0.0;
    for _ in 0..iterations {
        let mut up = ParamVector::from_vec(at.to_vec());
        up.axpy(H, &v);
        let mut down = ParamVector::from_vec(at.to_vec());
        down.axpy(-H, &v);
        let mut u = grad(&up)?.sub(&grad(&down)?);
        u.scale(sign / (2.0 * H));
        u.axpy(shift, &v);
        quotient = v.dot(&u);
        let norm = u.norm();
        if !(norm > 0.0) {
            break;
        }
        u.scale(1.0 / norm);
        v = u;
    }
    Ok(quotient)
}

/// Magnitude of the dominant Hessian eigenvalue at `at`; a lower bound on
/// the local smoothness constant.
pub fn max_curvature<G>(grad: G, at: &[f64], iterations: usize, seed: u64) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<ParamVector>,
{
    shifted_power_iteration(grad, at, 0.0, 1.0, iterations, seed).map(f64::abs)
}

/// Most negative Hessian eigenvalue at `at`, by power iteration on
/// `shift·I − H`. `shift` must be at least the largest curvature.
pub fn min_curvature<G>(grad: G, at: &[f64], shift: f64, iterations: usize, seed: u64) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<ParamVector>,
{
    shifted_power_iteration(grad, at, shift, -1.0, iterations, seed).map(|top| shift - top)
}

/// Points drawn uniformly from the ball of `radius` around `center`.
pub fn ball_samples(center: &[f64], count: usize, radius: f64, seed: u64) -> Vec<ParamVector> {
    let mut rng = rng::stream(seed, Purpose::Smoothness, 0, 0);
    let d = center.len() as f64;
    (0..count)
        .map(|_| {
            let dir: Vec<f64> = center.iter().map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = radius * rng.random::<f64>().powf(1.0 / d);
            let mut p = ParamVector::from_vec(center.to_vec());
            p.axpy(r / norm, &dir);
            p
        })
        .collect()
}

/// Pairs and radius used by [`estimate_smoothness_around`].
pub const SMOOTHNESS_PAIRS: usize = 50;
pub const SMOOTHNESS_RADIUS: f64 = 1.0;
const POWER_ITERATIONS: usize = 100;

/// Empirical `(L, L₋)` of the global objective. `L` is the larger of the
/// secant ratio over consecutive pairs of `w_samples` and the dominant
/// Hessian eigenvalue at the first sample; both are lower bounds, and random
/// secants alone miss the top eigendirection in high dimension. `L₋` is 0 for
/// convex models and otherwise estimated at the first sample.
pub fn estimate_smoothness(
    dataset: &FederatedDataset,
    spec: &ModelSpec,
    w_samples: &[ParamVector],
) -> Result<SmoothnessEstimate> {
    if w_samples.len() < 2 {
        return Err(MetricsError::InvalidInput("need at least two sample points".into()));
    }
    let grad = |w: &[f64]| -> Result<ParamVector> { Ok(snapshot(dataset, spec, w, 0.0)?.gradient) };
    let secant = lipschitz_from_pairs(grad, w_samples)?;
    let l = secant.max(max_curvature(grad, &w_samples[0], POWER_ITERATIONS, 0)?);
    let l_minus = if spec.is_convex() {
        0.0
    } else {
        (-min_curvature(grad, &w_samples[0], l, POWER_ITERATIONS, 0)?).max(0.0)
    };
    Ok(SmoothnessEstimate { l, l_minus })
}

/// [`estimate_smoothness`] on the standard 50 random pairs in the unit ball
/// around `center` (the center itself is the first point).
pub fn estimate_smoothness_around(
    dataset: &FederatedDataset,
    spec: &ModelSpec,
    center: &[f64],
    seed: u64,
) -> Result<SmoothnessEstimate> {
    let mut points = vec![ParamVector::from_vec(center.to_vec())];
    points.extend(ball_samples(center, 2 * SMOOTHNESS_PAIRS - 1, SMOOTHNESS_RADIUS, seed));
    estimate_smoothness(dataset, spec, &points)
}

/// Inputs to the sufficient-decrease constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_minus", default)]
    pub l_minus: f64,
    pub mu: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub delta: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl TheoryParams {
    pub fn mu_bar(&self) -> f64 {
        self.mu - self.l_minus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoReport {
    pub rho: f64,
    pub mu_bar: f64,
    pub positive: bool,
    /// `γB < 1`
    pub gamma_b_below_one: bool,
    /// `B/√K < 1`
    pub b_over_sqrt_k_below_one: bool,
}

/// Sufficient-decrease constant
///
/// ```text
/// ρ = 1/μ − γB/μ − B(1+γ)√2/(μ̄√K) − LB(1+γ)/(μ̄μ)
///     − L(1+γ)²B²/(2μ̄²) − LB²(1+γ)²(2√(2K)+2)/(μ̄²K)
/// ```
pub fn rho_bound(p: &TheoryParams) -> Result<RhoReport> {
    let mu_bar = p.mu_bar();
    if !(mu_bar > 0.0) {
        return Err(MetricsError::MuBarNotPositive(mu_bar));
    }
    if !(p.mu > 0.0) {
        return Err(MetricsError::InvalidInput(format!("mu must be positive, got {}", p.mu)));
    }
    if p.k < 1 {
        return Err(MetricsError::InvalidInput("K must be at least 1".into()));
    }
    let TheoryParams { l, mu, gamma, b, .. } = *p;
    let k = p.k as f64;
    let g1 = 1.0 + gamma;
    let rho = 1.0 / mu
        - gamma * b / mu
        - b * g1 * 2f64.sqrt() / (mu_bar * k.sqrt())
        - l * b * g1 / (mu_bar * mu)
        - l * g1 * g1 * b * b / (2.0 * mu_bar * mu_bar)
        - l * b * b * g1 * g1 / (mu_bar * mu_bar * k) * (2.0 * (2.0 * k).sqrt() + 2.0);
    Ok(RhoReport {
        rho,
        mu_bar,
        positive: rho > 0.0,
        gamma_b_below_one: gamma * b < 1.0,
        b_over_sqrt_k_below_one: b / k.sqrt() < 1.0,
    })
}

/// `Δ / (ρ ε)`: order-of-magnitude round count to reach `E‖∇f‖² ≤ ε`.
pub fn iteration_estimate(p: &TheoryParams) -> Result<f64> {
    let rho = rho_bound(p)?.rho;
    if !(rho > 0.0) {
        return Err(MetricsError::RhoNotPositive(rho));
    }
    if !(p.epsilon > 0.0) {
        return Err(MetricsError::InvalidInput(format!("epsilon must be positive, got {}", p.epsilon)));
    }
    Ok(p.delta / (rho * p.epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Running,
    Converged,
    Diverged,
}

impl ConvergenceStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConvergenceStatus::Running => "running",
            ConvergenceStatus::Converged => "converged",
            ConvergenceStatus::Diverged => "diverged",
        }
    }
}

/// Diverged when `f_t − f_{t−10} > 1` (or the loss is no longer finite),
/// converged when `|f_t − f_{t−1}| < 1e-4`, otherwise running.
pub fn detect_convergence(history: &[f64]) -> ConvergenceStatus {
    let Some(&last) = history.last() else {
        return ConvergenceStatus::Running;
    };
    if !last.is_finite() {
        return ConvergenceStatus::Diverged;
    }
    let n = history.len();
    if n > DIVERGENCE_WINDOW && last - history[n - 1 - DIVERGENCE_WINDOW] > DIVERGED_RISE {
        return ConvergenceStatus::Diverged;
    }
    if n >= 2 && (last - history[n - 2]).abs() < CONVERGED_DELTA {
        return ConvergenceStatus::Converged;
    }
    ConvergenceStatus::Running
}
