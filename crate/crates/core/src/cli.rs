//! Command-line driver: `generate`, `run`, `sweep`, `metrics` and `theory`.
//!
//! `run` writes `results.csv` (one row per telemetry round), `rounds.jsonl`
//! (every [`RoundRecord`]), `summary.json` and one checkpoint per run seed.
//! Floats are written in shortest round-trip form, so identical inputs give
//! byte-identical files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{load_config, ConfigError, DatasetConfig, ExperimentConfig};
use crate::data::{load_dataset, save_dataset, DataError};
use crate::federation::{run_experiment, FederationConfig, FederationError, RoundRecord};
use crate::metrics::{self, ConvergenceStatus, MetricsError, TheoryParams};
use crate::model::{ModelError, ModelSpec, ParamVector};
use crate::rng;

/// Bumped whenever a column or JSON field changes meaning.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

pub const RESULT_COLUMNS: [&str; 12] = [
    "run_seed",
    "round",
    "algorithm",
    "mu",
    "straggler_fraction",
    "train_loss",
    "test_accuracy",
    "B",
    "grad_variance",
    "mean_gamma",
    "dropped_count",
    "status",
];

/// μ candidates of the `sweep` subcommand.
pub const SWEEP_MUS: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated optimization simulator")]
pub struct Cli {
    /// Worker threads for per-device work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured dataset once per run seed and save it.
    Generate(CommonArgs),
    /// Run one experiment config.
    Run(RunArgs),
    /// Run the config for every μ in {0.001, 0.01, 0.1, 1} (and optional straggler fractions).
    Sweep(SweepArgs),
    /// Recompute loss, accuracy and dissimilarity for a saved dataset and checkpoint.
    Metrics(MetricsArgs),
    /// Evaluate ρ and the iteration estimate for a theory parameter file.
    Theory(TheoryArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: telemetry.out_dir, then the current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces the config's run seeds with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub telemetry_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Straggler fractions to cross with μ (default: the config's value).
    #[arg(long, value_delimiter = ',')]
    pub stragglers: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_EPSILON)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// JSON file with L, L_minus, mu, gamma, B, K, epsilon and delta.
    #[arg(long)]
    pub config: PathBuf,
}

/// Final parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub run_seed: u64,
    pub rounds: usize,
    pub params: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_seed: u64,
    pub algorithm: String,
    pub mu: f64,
    pub straggler_fraction: f64,
    pub rounds: usize,
    pub initial_loss: f64,
    pub final_train_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_mu: Option<f64>,
    pub status: ConvergenceStatus,
    pub aborted_rounds: usize,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    schema_version: u32,
    rng_scheme: &'static str,
    config: &'a ExperimentConfig,
    runs: &'a [RunSummary],
}

fn float(x: f64) -> String {
    // Display for f64 is the shortest string that parses back to the same value.
    format!("{x}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

pub fn results_header() -> String {
    RESULT_COLUMNS.join(",")
}

/// One CSV line for a telemetry round, without the trailing newline.
pub fn result_row(run_seed: u64, cfg: &FederationConfig, r: &RoundRecord) -> String {
    let d = r.dissimilarity.as_ref();
    let mut line = String::new();
    write!(
        line,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        run_seed,
        r.round,
        r.algorithm.as_str(),
        float(r.mu),
        float(cfg.straggler_fraction),
        opt_float(r.train_loss),
        opt_float(r.test_accuracy),
        opt_float(d.map(|d| d.b)),
        opt_float(d.map(|d| d.grad_variance)),
        opt_float(r.mean_gamma),
        r.dropped.len(),
        r.status.as_str(),
    )
    .expect("writing to a String");
    line
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn out_dir(args: &CommonArgs, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.telemetry.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn load(args: &CommonArgs, telemetry_every: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.runs = vec![seed];
    }
    if let Some(every) = telemetry_every {
        if every < 1 {
            return Err(CliError::Usage("--telemetry-every must be at least 1".into()));
        }
        cfg.telemetry.every = every;
        cfg.federation.telemetry_every = every;
    }
    Ok(cfg)
}

/// Outputs of one experiment (all run seeds).
pub struct RunOutput {
    pub csv: String,
    pub jsonl: String,
    pub summaries: Vec<RunSummary>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Runs every seed of `cfg` and renders its outputs in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut csv = results_header();
    csv.push('\n');
    let mut jsonl = String::new();
    let mut summaries = Vec::new();
    let mut checkpoints = Vec::new();
    for &seed in &cfg.runs {
        let dataset = cfg.dataset.build(seed)?;
        let spec = cfg.model_spec(&dataset);
        let fed = cfg.federation_for(seed);
        log::info!(
            "run seed {seed}: {} on {} devices, {} rounds",
            fed.algorithm.as_str(),
            dataset.num_devices(),
            fed.rounds
        );
        let outcome = run_experiment(&fed, &spec, &dataset)?;
        for r in &outcome.records {
            if r.train_loss.is_some() {
                csv.push_str(&result_row(seed, &fed, r));
                csv.push('\n');
            }
            jsonl.push_str(&serde_json::to_string(&(seed, r)).expect("record serializes"));
            jsonl.push('\n');
        }
        let last_measured = outcome.records.iter().rev().find(|r| r.train_loss.is_some());
        summaries.push(RunSummary {
            run_seed: seed,
            algorithm: fed.algorithm.as_str().into(),
            mu: fed.mu,
            straggler_fraction: fed.straggler_fraction,
            rounds: outcome.records.len(),
            initial_loss: outcome.initial_loss,
            final_train_loss: last_measured.and_then(|r| r.train_loss),
            final_test_accuracy: last_measured.and_then(|r| r.test_accuracy),
            final_mu: outcome.records.last().map(|r| r.mu),
            status: outcome.records.last().map_or(ConvergenceStatus::Running, |r| r.status),
            aborted_rounds: outcome.records.iter().filter(|r| r.aborted).count(),
        });
        checkpoints.push(Checkpoint {
            schema_version: RESULTS_SCHEMA_VERSION,
            model: spec,
            run_seed: seed,
            rounds: outcome.records.len(),
            params: outcome.final_params,
        });
    }
    Ok(RunOutput {
        csv,
        jsonl,
        summaries,
        checkpoints,
    })
}

fn write_outputs(dir: &Path, prefix: &str, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    write_file(&dir.join(format!("{prefix}results.csv")), &out.csv)?;
    write_file(&dir.join(format!("{prefix}rounds.jsonl")), &out.jsonl)?;
    let summary = Summary {
        schema_version: RESULTS_SCHEMA_VERSION,
        rng_scheme: rng::RNG_SCHEME,
        config: cfg,
        runs: &out.summaries,
    };
    write_file(&dir.join(format!("{prefix}summary.json")), to_json(&summary))?;
    for c in &out.checkpoints {
        write_file(&dir.join(format!("{prefix}checkpoint-seed{}.json", c.run_seed)), to_json(c))?;
    }
    Ok(())
}

fn cmd_generate(args: &CommonArgs) -> Result<()> {
    let cfg = load(args, None)?;
    if let DatasetConfig::File { path } = &cfg.dataset {
        return Err(CliError::Usage(format!(
            "dataset is already a file ({}); nothing to generate",
            path.display()
        )));
    }
    let dir = out_dir(args, &cfg)?;
    for &seed in &cfg.runs {
        let ds = cfg.dataset.build(seed)?;
        let path = dir.join(format!("dataset-seed{seed}.fsim"));
        save_dataset(&ds, &path)?;
        println!("{}: {} devices, {} rows", path.display(), ds.num_devices(), ds.total_rows());
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load(&args.common, args.telemetry_every)?;
    let dir = out_dir(&args.common, &cfg)?;
    let out = execute(&cfg)?;
    write_outputs(&dir, "", &cfg, &out)?;
    for s in &out.summaries {
        println!(
            "seed {}: final loss {} status {}",
            s.run_seed,
            opt_float(s.final_train_loss),
            s.status.as_str()
        );
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = load(&args.run.common, args.run.telemetry_every)?;
    if base.federation.algorithm == crate::federation::Algorithm::FedAvg {
        return Err(CliError::Usage("sweep varies mu, which fedavg fixes at 0".into()));
    }
    let fractions = if args.stragglers.is_empty() {
        vec![base.federation.straggler_fraction]
    } else {
        args.stragglers.clone()
    };
    let dir = out_dir(&args.run.common, &base)?;
    for mu in SWEEP_MUS {
        let mut csv = results_header();
        csv.push('\n');
        for &fraction in &fractions {
            if !(0.0..1.0).contains(&fraction) {
                return Err(CliError::Usage(format!("straggler fraction {fraction} is outside [0, 1)")));
            }
            let mut cfg = base.clone();
            cfg.federation.mu = mu;
            cfg.federation.adaptive_mu = false;
            cfg.federation.straggler_fraction = fraction;
            let out = execute(&cfg)?;
            csv.extend(out.csv.lines().skip(1).flat_map(|l| [l, "\n"]));
        }
        let path = dir.join(format!("results-mu{}.csv", float(mu)));
        write_file(&path, &csv)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    train_loss: f64,
    test_accuracy: Option<f64>,
    global_grad_norm_sq: f64,
    dissimilarity: metrics::DissimilarityReading,
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let checkpoint: Checkpoint = read_json(&args.checkpoint)?;
    let spec = checkpoint.model;
    if (spec.input_dim, spec.num_classes) != (dataset.input_dim, dataset.num_classes) {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}x{} data, dataset is {}x{}",
            spec.input_dim, spec.num_classes, dataset.input_dim, dataset.num_classes
        )));
    }
    spec.check_params(&checkpoint.params)?;
    let snap = metrics::snapshot(&dataset, &spec, &checkpoint.params, args.epsilon)?;
    let report = MetricsReport {
        train_loss: snap.loss,
        test_accuracy: metrics::test_accuracy(&dataset, &spec, &checkpoint.params)?,
        global_grad_norm_sq: snap.dissimilarity.global_grad_norm_sq,
        dissimilarity: snap.dissimilarity,
    };
    println!("{}", to_json(&report));
    Ok(())
}

#[derive(Debug, Serialize)]
struct TheoryReport {
    params: TheoryParams,
    rho: f64,
    mu_bar: f64,
    rho_positive: bool,
    gamma_b_below_one: bool,
    b_over_sqrt_k_below_one: bool,
    iteration_estimate: Option<f64>,
}

fn cmd_theory(args: &TheoryArgs) -> Result<()> {
    let params: TheoryParams = read_json(&args.config)?;
    let rho = metrics::rho_bound(&params)?;
    let report = TheoryReport {
        params,
        rho: rho.rho,
        mu_bar: rho.mu_bar,
        rho_positive: rho.positive,
        gamma_b_below_one: rho.gamma_b_below_one,
        b_over_sqrt_k_below_one: rho.b_over_sqrt_k_below_one,
        iteration_estimate: metrics::iteration_estimate(&params).ok(),
    };
    println!("{}", to_json(&report));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Theory(a) => cmd_theory(a),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSIM_LOG", "warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::Algorithm;

    #[test]
    fn header_lists_every_column_once() {
        let h = results_header();
        assert_eq!(h.split(',').count(), RESULT_COLUMNS.len());
        assert!(h.starts_with("run_seed,round,algorithm"));
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, std::f64::consts::LN_10, f64::MIN_POSITIVE] {
            assert_eq!(float(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(opt_float(None), "");
    }

    #[test]
    fn row_has_one_field_per_column() {
        let cfg = FederationConfig::new(Algorithm::FedProx, 0);
        let r = RoundRecord {
            round: 3,
            algorithm: Algorithm::FedProx,
            mu: 0.1,
            selected: vec![1, 2],
            devices: vec![],
            dropped: vec![2],
            aborted: false,
            mean_gamma: Some(0.5),
            train_loss: Some(1.25),
            test_accuracy: None,
            dissimilarity: None,
            status: ConvergenceStatus::Running,
        };
        let row = result_row(7, &cfg, &r);
        assert_eq!(row, "7,3,fedprox,0.1,0,1.25,,,,0.5,1,running");
    }
}
