use fedsim::data::{generate_synthetic, split_train_test, FederatedDataset, SyntheticSpec};
use fedsim::federation::{
    run_experiment, run_experiment_from, sample_devices, Algorithm, FederationConfig, MuController,
    SamplingScheme,
};
use fedsim::model::{local_gradient, local_loss, ModelSpec, ParamVector};
use fedsim::rng::{self, Purpose};
use fedsim::solver::{solve_local, SolverConfig};

fn dataset(seed: u64) -> FederatedDataset {
    let ds = generate_synthetic(&SyntheticSpec::heterogeneous(1.0, 1.0, seed)).unwrap();
    split_train_test(&ds, 0.8, seed).unwrap()
}

fn single_device(seed: u64) -> FederatedDataset {
    let mut ds = dataset(seed);
    let shard = ds.shards.iter().max_by_key(|s| s.n_train()).unwrap().clone();
    ds.shards = vec![fedsim::data::DeviceShard { device_id: 0, ..shard }];
    ds
}

#[test]
fn weighted_sampling_matches_probabilities() {
    let weights = [0.9, 0.05, 0.05];
    let draws = 100_000;
    let hits = (0..draws)
        .filter(|&t| {
            let mut r = rng::stream(11, Purpose::Selection, t, 0);
            sample_devices(SamplingScheme::WeightedSampleSimpleAvg, &weights, 1, &mut r).unwrap()[0] == 0
        })
        .count();
    let freq = hits as f64 / draws as f64;
    assert!((freq - 0.9).abs() <= 0.01, "frequency {freq}");
}

#[test]
fn single_device_round_matches_hand_stepped_trace() {
    let ds = single_device(3);
    let spec = ModelSpec::logistic(60, 10);
    let shard = &ds.shards[0];
    let n = shard.n_train();
    let (lr, mu, epochs) = (0.05, 0.5, 3);

    let mut cfg = FederationConfig::new(Algorithm::FedProx, 0);
    cfg.clients_per_round = 1;
    cfg.rounds = 1;
    cfg.local_epochs = epochs;
    cfg.batch_size = n;
    cfg.learning_rate = lr;
    cfg.mu = mu;
    let w0 = ParamVector::zeros(spec.num_params());
    let out = run_experiment_from(&cfg, &spec, &ds, w0.clone()).unwrap();

    // Full-batch proximal steps written out by hand.
    let batch = shard.train_batch().unwrap();
    let mut w = w0.clone().into_vec();
    for _ in 0..epochs {
        let g = local_gradient(&spec, &w, &batch).unwrap();
        for i in 0..w.len() {
            w[i] -= lr * (g[i] + mu * (w[i] - w0[i]));
        }
    }
    let diff: f64 = out.final_params.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "max deviation {diff}");
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].selected, vec![0]);
}

#[test]
fn algorithms_share_selection_and_stragglers() {
    let ds = dataset(2);
    let spec = ModelSpec::logistic(60, 10);
    let run = |algorithm, mu| {
        let mut cfg = FederationConfig::new(algorithm, 17);
        cfg.rounds = 8;
        cfg.local_epochs = 3;
        cfg.mu = mu;
        cfg.straggler_fraction = 0.5;
        run_experiment(&cfg, &spec, &ds).unwrap().records
    };
    let reference = run(Algorithm::FedAvg, 0.0);
    for (alg, mu) in [(Algorithm::FedProx, 0.0), (Algorithm::FedProx, 1.0), (Algorithm::FedDane, 0.1)] {
        let other = run(alg, mu);
        for (a, b) in reference.iter().zip(&other) {
            assert_eq!(a.selected, b.selected);
            let slots = |r: &fedsim::federation::RoundRecord| {
                r.devices.iter().map(|d| (d.device_id, d.epochs, d.straggler)).collect::<Vec<_>>()
            };
            assert_eq!(slots(a), slots(b));
        }
    }
}

#[test]
fn fedavg_drops_ninety_percent_stragglers() {
    let ds = dataset(0);
    let mut cfg = FederationConfig::new(Algorithm::FedAvg, 1);
    cfg.rounds = 3;
    cfg.local_epochs = 2;
    cfg.straggler_fraction = 0.9;
    let out = run_experiment(&cfg, &ModelSpec::logistic(60, 10), &ds).unwrap();
    assert!(out.records.iter().all(|r| r.dropped.len() == 9));
}

#[test]
fn same_seed_same_records() {
    let ds = dataset(4);
    let mut cfg = FederationConfig::new(Algorithm::FedProx, 9);
    cfg.rounds = 6;
    cfg.local_epochs = 2;
    cfg.mu = 0.1;
    cfg.straggler_fraction = 0.5;
    cfg.adaptive_mu = true;
    let spec = ModelSpec::logistic(60, 10);
    let a = run_experiment(&cfg, &spec, &ds).unwrap();
    let b = run_experiment(&cfg, &spec, &ds).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn controller_two_patience_windows() {
    let mut c = MuController::new(1.0);
    let mut loss = 10.0;
    for _ in 0..10 {
        c.update(loss - 1.0, loss);
        loss -= 1.0;
    }
    assert!((c.mu - 0.8).abs() < 1e-12);

    let mut z = MuController::new(0.0);
    assert!((z.update(2.0, 1.0) - 0.1).abs() < 1e-15);
    let mut clamp = MuController::new(0.0);
    for i in 0..5 {
        clamp.update(-(i as f64) - 1.0, -(i as f64));
    }
    assert_eq!(clamp.mu, 0.0);
}

#[test]
fn full_batch_steps_decrease_the_subproblem() {
    let ds = single_device(5);
    let spec = ModelSpec::logistic(60, 10);
    let shard = &ds.shards[0];
    let batch = shard.train_batch().unwrap();
    let anchor = ParamVector::zeros(spec.num_params());
    let mu = 0.3;
    // Softmax cross-entropy curvature is at most ½·λmax(E[x̃x̃ᵀ]), x̃ = (x, 1).
    let rows: Vec<Vec<f64>> = batch.iter().map(|(x, _)| x.iter().copied().chain([1.0]).collect()).collect();
    let mut v = vec![1.0; 61];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut next = vec![0.0; 61];
        for x in &rows {
            let dot: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (n, xi) in next.iter_mut().zip(x) {
                *n += dot * xi / rows.len() as f64;
            }
        }
        lambda = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = next.iter().map(|a| a / lambda).collect();
    }
    let l_hat = 0.5 * lambda;
    let lr = 0.9 / (l_hat + mu);
    let h = |w: &ParamVector| local_loss(&spec, w, &batch).unwrap() + 0.5 * mu * w.distance(&anchor).powi(2);

    let mut prev = h(&anchor);
    for epochs in 1..=25 {
        let cfg = SolverConfig::new(epochs, lr, shard.n_train(), mu);
        let mut r = rng::stream(0, Purpose::Minibatch, 0, 0);
        let (w, _) = solve_local(&spec, shard, &anchor, &cfg, &mut r).unwrap();
        let cur = h(&w);
        assert!(cur <= prev + 1e-12, "epoch {epochs}: {cur} > {prev}");
        prev = cur;
    }
}
