use std::path::Path;
use std::process::{Command, Output};

use fedsim::cli::RESULT_COLUMNS;

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const IID_T5: &str = r#"{"dataset": "synthetic_iid", "algorithm": "fedprox", "federation": {"rounds": 5, "local_epochs": 2, "mu": 0.1}}"#;

#[test]
fn run_writes_one_row_per_round_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", IID_T5);
    let mut outputs = vec![];
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = fedsim(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4"]);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        outputs.push(std::fs::read(out.join("results.csv")).unwrap());
        for file in ["rounds.jsonl", "summary.json", "checkpoint-seed4.json"] {
            assert!(out.join(file).exists(), "{file} missing");
        }
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs.swap_remove(0)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], RESULT_COLUMNS.join(","));
    for (t, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), RESULT_COLUMNS.len());
        assert_eq!(fields[0], "4");
        assert_eq!(fields[1], t.to_string());
        // Every float field round-trips exactly.
        let loss: f64 = fields[5].parse().unwrap();
        assert_eq!(loss.to_string(), fields[5]);
    }
}

#[test]
fn sweep_writes_one_file_per_mu() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"dataset": "synthetic_1_1", "algorithm": "fedprox", "federation": {"rounds": 2, "local_epochs": 1}}"#,
    );
    let out = dir.path().join("sweep");
    let status = fedsim(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--stragglers", "0,0.5"]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["results-mu0.001.csv", "results-mu0.01.csv", "results-mu0.1.csv", "results-mu1.csv"]
    );
    let text = std::fs::read_to_string(out.join("results-mu0.1.csv")).unwrap();
    // Header plus two rounds for each straggler fraction.
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(3) == Some("0.1")));
}

#[test]
fn theory_reports_rho_and_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t.json",
        r#"{"L": 1, "L_minus": 0, "mu": 24, "gamma": 0, "B": 2, "K": 64, "epsilon": 0.001, "delta": 1}"#,
    );
    let out = fedsim(&["theory", "--config", &cfg]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rho = report["rho"].as_f64().unwrap();
    assert!((rho - 0.01731858517949363).abs() < 1e-12, "rho {rho}");
    assert_eq!(report["gamma_b_below_one"], true);
    assert_eq!(report["b_over_sqrt_k_below_one"], true);
    let estimate = report["iteration_estimate"].as_f64().unwrap();
    assert!((estimate - 1.0 / (rho * 0.001)).abs() < 1e-6 * estimate);
}

#[test]
fn metrics_recomputes_the_final_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", IID_T5);
    let out = dir.path().to_str().unwrap();
    assert!(fedsim(&["generate", "--config", &cfg, "--out", out]).status.success());
    assert!(fedsim(&["run", "--config", &cfg, "--out", out]).status.success());
    let report = fedsim(&[
        "metrics",
        "--dataset",
        dir.path().join("dataset-seed0.fsim").to_str().unwrap(),
        "--checkpoint",
        dir.path().join("checkpoint-seed0.json").to_str().unwrap(),
    ]);
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    let report: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(report["train_loss"], summary["runs"][0]["final_train_loss"]);
    assert!(report["dissimilarity"]["b"].as_f64().unwrap() >= 1.0 - 1e-9);
}

#[test]
fn bad_inputs_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad_range = write_config(
        dir.path(),
        "range.json",
        r#"{"dataset": "synthetic_iid", "algorithm": "fedprox", "federation": {"straggler_fraction": 1.2}}"#,
    );
    let out = fedsim(&["run", "--config", &bad_range, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("straggler_fraction"));

    let fedavg_mu = write_config(
        dir.path(),
        "mu.json",
        r#"{"dataset": "synthetic_iid", "algorithm": "fedavg", "federation": {"mu": 0.5}}"#,
    );
    let out = fedsim(&["run", "--config", &fedavg_mu]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mu"));

    let missing = dir.path().join("missing.json");
    assert_eq!(fedsim(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(fedsim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fedsim(&["--help"]).status.code(), Some(0));

    let garbage = write_config(dir.path(), "garbage.fsim", "not a dataset");
    let ckpt = write_config(dir.path(), "ckpt.json", "{}");
    let out = fedsim(&["metrics", "--dataset", &garbage, "--checkpoint", &ckpt]);
    assert_eq!(out.status.code(), Some(1));
}
