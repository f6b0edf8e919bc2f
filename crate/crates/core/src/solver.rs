//! Inexact local solves of the proximal subproblem
//! `h_k(w; w_t) = F_k(w) + (μ/2)‖w − w_t‖²` by mini-batch SGD, and the
//! γ-inexactness of the result.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DeviceShard;
use crate::model::{ModelError, ModelSpec, ParamVector};
use crate::rng::StreamRng;

/// Below this anchor gradient norm the subproblem is treated as already solved.
pub const STATIONARY_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("device {0} has no training samples")]
    EmptyShard(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mu: f64,
    /// Stop after this many SGD steps regardless of epochs (test hook).
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl SolverConfig {
    pub fn new(epochs: usize, learning_rate: f64, batch_size: usize, mu: f64) -> Self {
        SolverConfig {
            epochs,
            learning_rate,
            batch_size,
            mu,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(SolverError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SolverError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(SolverError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(SolverError::InvalidConfig(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub epochs_run: usize,
    pub steps_run: usize,
    pub final_local_loss: f64,
    /// `‖∇h_k(w_out)‖ / ‖∇h_k(w_anchor)‖`; infinite when the solve diverged.
    pub attained_gamma: f64,
    pub initial_grad_norm: f64,
    pub final_grad_norm: f64,
    pub diverged: bool,
}

/// γ for an arbitrary gradient oracle `∇F`, with optional linear correction
/// `c` (the subproblem gradient is `∇F(w) − c + μ(w − anchor)`).
pub fn inexactness<G>(
    mut grad: G,
    candidate: &[f64],
    anchor: &[f64],
    mu: f64,
    correction: Option<&[f64]>,
) -> Result<f64>
where
    G: FnMut(&[f64]) -> std::result::Result<ParamVector, ModelError>,
{
    let (num, den) = gradient_norms(&mut grad, candidate, anchor, mu, correction)?;
    Ok(ratio(num, den))
}

fn ratio(num: f64, den: f64) -> f64 {
    if den < STATIONARY_NORM {
        log::debug!("anchor is stationary for its subproblem (‖∇h‖ = {den:e}); γ := 0");
        0.0
    } else {
        num / den
    }
}

fn subproblem_gradient<G>(
    grad: &mut G,
    w: &[f64],
    anchor: &[f64],
    mu: f64,
    correction: Option<&[f64]>,
) -> Result<ParamVector>
where
    G: FnMut(&[f64]) -> std::result::Result<ParamVector, ModelError>,
{
    if !w.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("candidate parameters").into());
    }
    let mut g = grad(w)?;
    if let Some(c) = correction {
        for (gi, ci) in g.iter_mut().zip(c) {
            *gi -= ci;
        }
    }
    for ((gi, wi), ai) in g.iter_mut().zip(w).zip(anchor) {
        *gi += mu * (wi - ai);
    }
    Ok(g)
}

fn gradient_norms<G>(
    grad: &mut G,
    candidate: &[f64],
    anchor: &[f64],
    mu: f64,
    correction: Option<&[f64]>,
) -> Result<(f64, f64)>
where
    G: FnMut(&[f64]) -> std::result::Result<ParamVector, ModelError>,
{
    let num = subproblem_gradient(grad, candidate, anchor, mu, correction)?.norm();
    let den = subproblem_gradient(grad, anchor, anchor, mu, correction)?.norm();
    Ok((num, den))
}

fn shard_gradient<'a>(
    spec: &'a ModelSpec,
    shard: &'a DeviceShard,
) -> impl FnMut(&[f64]) -> std::result::Result<ParamVector, ModelError> + 'a {
    move |w| crate::model::local_gradient(spec, w, &shard.train_batch()?)
}

/// `∇F_k(w) + μ(w − anchor)` over the full local training set.
pub fn proximal_gradient(
    spec: &ModelSpec,
    w: &[f64],
    anchor: &[f64],
    mu: f64,
    shard: &DeviceShard,
) -> Result<ParamVector> {
    subproblem_gradient(&mut shard_gradient(spec, shard), w, anchor, mu, None)
}

/// γ-inexactness of `candidate` for device `shard`'s subproblem anchored at `anchor`.
pub fn measure_inexactness(
    spec: &ModelSpec,
    shard: &DeviceShard,
    candidate: &[f64],
    anchor: &[f64],
    mu: f64,
) -> Result<f64> {
    measure_corrected(spec, shard, candidate, anchor, mu, None)
}

fn measure_corrected(
    spec: &ModelSpec,
    shard: &DeviceShard,
    candidate: &[f64],
    anchor: &[f64],
    mu: f64,
    correction: Option<&[f64]>,
) -> Result<f64> {
    inexactness(shard_gradient(spec, shard), candidate, anchor, mu, correction)
}

pub fn solve_local(
    spec: &ModelSpec,
    shard: &DeviceShard,
    anchor: &ParamVector,
    cfg: &SolverConfig,
    rng: &mut StreamRng,
) -> Result<(ParamVector, SolverReport)> {
    solve_local_corrected(spec, shard, anchor, cfg, None, rng)
}

/// [`solve_local`] on `h_k(w) − ⟨c, w − anchor⟩` (the gradient-corrected
/// subproblem used by FedDane). `None` is the plain proximal subproblem.
pub fn solve_local_corrected(
    spec: &ModelSpec,
    shard: &DeviceShard,
    anchor: &ParamVector,
    cfg: &SolverConfig,
    correction: Option<&[f64]>,
    rng: &mut StreamRng,
) -> Result<(ParamVector, SolverReport)> {
    cfg.validate()?;
    if shard.n_train() == 0 {
        return Err(SolverError::EmptyShard(shard.device_id));
    }
    let mu = cfg.mu;
    let lr = cfg.learning_rate;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut w = anchor.clone();
    let mut order = shard.train_index.clone();
    let mut steps = 0;
    let mut epochs_run = 0;

    let diverged = |epochs_run, steps_run| SolverReport {
        epochs_run,
        steps_run,
        final_local_loss: f64::NAN,
        attained_gamma: f64::INFINITY,
        initial_grad_norm: f64::NAN,
        final_grad_norm: f64::NAN,
        diverged: true,
    };

    'epochs: for _ in 0..cfg.epochs {
        if steps >= max_steps {
            break;
        }
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= max_steps {
                break 'epochs;
            }
            let batch = shard.batch(chunk)?;
            let g = match spec.loss_and_gradient(&w, &batch, true) {
                Ok((_, g)) => g.expect("gradient requested"),
                Err(ModelError::NonFinite(_)) => {
                    log::warn!("device {}: local solve diverged at step {steps}", shard.device_id);
                    return Ok((anchor.clone(), diverged(epochs_run, steps)));
                }
                Err(e) => return Err(e.into()),
            };
            match correction {
                Some(c) => {
                    for i in 0..w.len() {
                        let d = g[i] - c[i] + mu * (w[i] - anchor[i]);
                        w[i] -= lr * d;
                    }
                }
                None => {
                    for i in 0..w.len() {
                        let d = g[i] + mu * (w[i] - anchor[i]);
                        w[i] -= lr * d;
                    }
                }
            }
            steps += 1;
            if !w.is_finite() {
                log::warn!("device {}: local solve diverged at step {steps}", shard.device_id);
                return Ok((anchor.clone(), diverged(epochs_run, steps)));
            }
        }
        epochs_run += 1;
    }

    let mut grad = shard_gradient(spec, shard);
    let (final_norm, initial_norm) = match gradient_norms(&mut grad, &w, anchor, mu, correction) {
        Ok(v) => v,
        Err(SolverError::Model(ModelError::NonFinite(_))) => {
            return Ok((anchor.clone(), diverged(epochs_run, steps)))
        }
        Err(e) => return Err(e),
    };
    let final_local_loss = crate::model::local_loss(spec, &w, &shard.train_batch()?)?;
    let report = SolverReport {
        epochs_run,
        steps_run: steps,
        final_local_loss,
        attained_gamma: ratio(final_norm, initial_norm),
        initial_grad_norm: initial_norm,
        final_grad_norm: final_norm,
        diverged: false,
    };
    Ok((w, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{central_difference, local_gradient, local_loss};
    use crate::rng::{self, Purpose};

    fn shard() -> (ModelSpec, DeviceShard) {
        let mut spec = SyntheticSpec::heterogeneous(1.0, 1.0, 21);
        spec.num_devices = 3;
        let ds = generate_synthetic(&spec).unwrap();
        (ModelSpec::logistic(60, 10), ds.shards[0].clone())
    }

    fn rng_for(seed: u64) -> StreamRng {
        rng::stream(seed, Purpose::Minibatch, 0, 0)
    }

    /// Diagonal quadratic `F(w) = ½ Σ a_i w_i² − b_i w_i`.
    fn quad_grad(a: &'static [f64], b: &'static [f64]) -> impl FnMut(&[f64]) -> std::result::Result<ParamVector, ModelError> {
        move |w| Ok(ParamVector::from_vec(w.iter().enumerate().map(|(i, wi)| a[i] * wi - b[i]).collect()))
    }

    #[test]
    fn proximal_part_vanishes_at_anchor_and_for_zero_mu() {
        let (spec, shard) = shard();
        let w = ParamVector::from_vec((0..610).map(|i| (i as f64 * 0.01).cos() * 0.1).collect());
        let plain = local_gradient(&spec, &w, &shard.train_batch().unwrap()).unwrap();
        assert_eq!(proximal_gradient(&spec, &w, &w, 3.0, &shard).unwrap(), plain);
        let anchor = ParamVector::zeros(610);
        assert_eq!(proximal_gradient(&spec, &w, &anchor, 0.0, &shard).unwrap(), plain);
    }

    #[test]
    fn proximal_gradient_matches_finite_differences() {
        let (spec, shard) = shard();
        let w = ParamVector::from_vec((0..610).map(|i| (i as f64 * 0.37).sin() * 0.05).collect());
        let anchor = ParamVector::from_vec((0..610).map(|i| (i as f64 * 0.11).cos() * 0.05).collect());
        let mu = 0.7;
        let batch = shard.train_batch().unwrap();
        let h = |p: &[f64]| {
            local_loss(&spec, p, &batch).unwrap()
                + 0.5 * mu * p.iter().zip(anchor.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let fd = ParamVector::from_vec(central_difference(h, &w, 1e-5));
        let g = proximal_gradient(&spec, &w, &anchor, mu, &shard).unwrap();
        assert!(g.distance(&fd) / (1.0 + g.norm()) < 1e-5);
    }

    #[test]
    fn gamma_is_one_at_anchor() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        assert_eq!(measure_inexactness(&spec, &shard, &anchor, &anchor, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn gamma_zero_at_quadratic_minimizer() {
        static A: [f64; 3] = [1.0, 4.0, 0.5];
        static B: [f64; 3] = [2.0, -1.0, 3.0];
        let anchor = [0.3, 0.2, -0.4];
        let mu = 0.8;
        // argmin = (b + μ anchor) / (a + μ)
        let star: Vec<f64> = (0..3).map(|i| (B[i] + mu * anchor[i]) / (A[i] + mu)).collect();
        let g = inexactness(quad_grad(&A, &B), &star, &anchor, mu, None).unwrap();
        assert!(g.abs() < 1e-10);
    }

    #[test]
    fn gamma_between_anchor_and_minimizer_is_fractional() {
        static A: [f64; 1] = [2.0];
        static B: [f64; 1] = [4.0];
        let anchor = [0.0];
        let mu = 1.0;
        // minimizer 4/3; halfway point has |∇h| = 3 · (2/3) = 2, anchor |∇h| = 4
        let g = inexactness(quad_grad(&A, &B), &[2.0 / 3.0], &anchor, mu, None).unwrap();
        assert!((g - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stationary_anchor_reports_zero() {
        static A: [f64; 1] = [1.0];
        static B: [f64; 1] = [0.0];
        let g = inexactness(quad_grad(&A, &B), &[0.5], &[0.0], 1.0, None).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn non_finite_candidate_is_rejected() {
        let (spec, shard) = shard();
        let mut w = ParamVector::zeros(610);
        w[3] = f64::NAN;
        assert!(measure_inexactness(&spec, &shard, &w, &ParamVector::zeros(610), 1.0).is_err());
    }

    #[test]
    fn zero_steps_returns_anchor_with_unit_gamma() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        let cfg = SolverConfig {
            max_steps: Some(0),
            ..SolverConfig::new(5, 0.01, 10, 1.0)
        };
        let (w, rep) = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(0)).unwrap();
        assert_eq!(w, anchor);
        assert_eq!(rep.attained_gamma, 1.0);
        assert_eq!(rep.steps_run, 0);
    }

    #[test]
    fn near_exact_solve_with_large_mu() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        // Full-batch steps on a strongly convex subproblem.
        let cfg = SolverConfig::new(200, 0.01, shard.n_train(), 10.0);
        let mut prev = f64::INFINITY;
        for epochs in [1, 5, 20, 200] {
            let cfg = SolverConfig { epochs, ..cfg.clone() };
            let (_, rep) = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(1)).unwrap();
            assert!(rep.attained_gamma <= prev);
            prev = rep.attained_gamma;
        }
        assert!(prev < 0.01, "gamma {prev}");
    }

    #[test]
    fn report_gamma_matches_recomputation() {
        let (spec, shard) = shard();
        let anchor = ParamVector::from_vec(vec![0.01; 610]);
        let cfg = SolverConfig::new(3, 0.01, 10, 0.5);
        let (w, rep) = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(2)).unwrap();
        assert_eq!(rep.attained_gamma, measure_inexactness(&spec, &shard, &w, &anchor, 0.5).unwrap());
    }

    #[test]
    fn deterministic_given_stream() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        let cfg = SolverConfig::new(4, 0.01, 10, 0.1);
        let a = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(3)).unwrap();
        let b = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_correction_matches_plain_solve() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        let cfg = SolverConfig::new(2, 0.01, 10, 0.3);
        let zeros = vec![0.0; 610];
        let a = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(4)).unwrap();
        let b = solve_local_corrected(&spec, &shard, &anchor, &cfg, Some(&zeros), &mut rng_for(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        let cfg = SolverConfig::new(50, 1e308, 10, 0.0);
        let (w, rep) = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(5)).unwrap();
        assert!(rep.diverged);
        assert_eq!(w, anchor);
    }

    #[test]
    fn rejects_invalid_config() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        for cfg in [
            SolverConfig::new(0, 0.01, 10, 0.0),
            SolverConfig::new(1, 0.0, 10, 0.0),
            SolverConfig::new(1, 0.01, 0, 0.0),
            SolverConfig::new(1, 0.01, 10, -1.0),
        ] {
            assert!(solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(0)).is_err());
        }
    }

    #[test]
    fn drift_shrinks_as_mu_grows() {
        let (spec, shard) = shard();
        let anchor = ParamVector::zeros(610);
        let mut prev = f64::INFINITY;
        for mu in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let mean: f64 = (0..20)
                .map(|s| {
                    let cfg = SolverConfig::new(5, 0.01, 10, mu);
                    let (w, _) = solve_local(&spec, &shard, &anchor, &cfg, &mut rng_for(100 + s)).unwrap();
                    w.distance(&anchor)
                })
                .sum::<f64>()
                / 20.0;
            assert!(mean <= prev, "mu {mu}: {mean} > {prev}");
            prev = mean;
        }
    }
}
