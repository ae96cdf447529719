//! End-to-end checks of the `fedd2p` binary: exit codes, output files and
//! byte-level reproducibility.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedd2p::cli::RunManifest;
use fedd2p::orchestrator::{run_experiment, ExperimentConfig};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

/// SHA-256 of `metrics.csv` from `fedd2p run --config configs/desk.json`.
const DESK_METRICS_SHA256: &str = "2bcf842c9d3a32706e6f438cfba34f26d31df9af3659ec827d90eeb9ebc587fc";

fn fedd2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedd2p")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn run_in(dir: &TempDir, sub: &str, cmd: &[&str], config: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let out = dir.path().join(sub);
    let mut args = cmd.to_vec();
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    args.extend(["--config", c, "--out", o]);
    args.extend(extra);
    (fedd2p(&args), out)
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_all_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = common::tiny();
    let config = write_config(dir.path(), &cfg);
    let (o, out) = run_in(&dir, "run", &["run"], &config, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let metrics = read(&out, "metrics.csv");
    let lines: Vec<_> = metrics.lines().collect();
    assert_eq!(lines[0], "round,client_id,accuracy,gen_loss,train_loss");
    assert_eq!(lines.len(), 1 + (cfg.rounds + 1) * (cfg.clients + 1));
    assert!(read(&out, "gen_loss.csv").starts_with("round,step,loss\n"));
    let comm = read(&out, "communication.csv");
    assert_eq!(comm.lines().count(), 1 + cfg.rounds * cfg.clients);

    let manifest: RunManifest = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest.command, "run");
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.outputs.len(), 4);

    // the final mean row agrees with the library
    let report = run_experiment(&cfg).unwrap();
    let last = lines.last().unwrap().split(',').collect::<Vec<_>>();
    assert_eq!(last[1], "mean");
    let acc: f64 = last[2].parse().unwrap();
    assert_eq!(acc, report.final_accuracy());
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"tau1": 0.0}"#).unwrap();
    let (o, _) = run_in(&dir, "out", &["run"], &config, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tau1"), "{}", stderr(&o));

    let o = fedd2p(&["run", "--config", "/nonexistent/config.json", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fedd2p(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fedd2p(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_1_with_round_context() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig { shard_cap: 1, ..common::tiny() };
    let config = write_config(dir.path(), &cfg);
    let (o, _) = run_in(&dir, "out", &["run"], &config, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("round"), "{err}");
}

#[test]
fn grid_has_one_row_per_tau1() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig { rounds: 1, ..common::tiny() };
    let config = write_config(dir.path(), &cfg);
    let (o, out) = run_in(&dir, "grid", &["grid"], &config, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = read(&out, "grid.csv");
    let lines: Vec<_> = grid.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "tau2=0.1,tau2=1,tau2=10");
    for row in &lines[1..] {
        assert_eq!(row.split(',').count(), 3);
    }
    assert_eq!(read(&out, "grid_cells.csv").lines().count(), 10);
    let manifest: RunManifest = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest.taus1, vec![0.1, 1.0, 10.0]);
}

#[test]
fn single_cell_grid_matches_run() {
    let dir = TempDir::new().unwrap();
    let cfg = ExperimentConfig { tau1: 2.0, tau2: 0.5, ..common::tiny() };
    let config = write_config(dir.path(), &cfg);
    let (o, out) = run_in(&dir, "grid", &["grid"], &config, &["--taus1", "2", "--taus2", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = read(&out, "grid.csv");
    let value: f64 = grid.lines().nth(1).unwrap().parse().unwrap();
    assert_eq!(value, run_experiment(&cfg).unwrap().final_accuracy());
}

#[test]
fn ablation_labels_both_series() {
    let dir = TempDir::new().unwrap();
    let cfg = common::tiny();
    let config = write_config(dir.path(), &cfg);
    let (o, out) = run_in(&dir, "abl", &["ablation"], &config, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&out, "ablation.csv");
    let count = |label: &str| csv.lines().filter(|l| l.starts_with(label)).count();
    assert_eq!(count("attention,"), cfg.rounds + 1);
    assert_eq!(count("mlp,"), cfg.rounds + 1);
}

#[test]
fn outputs_are_byte_identical_across_reruns_and_workers() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &common::tiny());
    let (a, out_a) = run_in(&dir, "a", &["run"], &config, &["--workers", "1"]);
    let (b, out_b) = run_in(&dir, "b", &["run"], &config, &["--workers", "1"]);
    let (c, out_c) = run_in(&dir, "c", &["run"], &config, &["--workers", "8"]);
    for o in [&a, &b, &c] {
        assert!(o.status.success(), "{}", stderr(o));
    }
    for name in ["metrics.csv", "gen_loss.csv", "communication.csv"] {
        let reference = fs::read(out_a.join(name)).unwrap();
        assert_eq!(reference, fs::read(out_b.join(name)).unwrap(), "{name} rerun");
        assert_eq!(reference, fs::read(out_c.join(name)).unwrap(), "{name} workers");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &common::tiny());
    let (o, out) = run_in(&dir, "s", &["run"], &config, &["--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: RunManifest = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest.config.seed, 7);
    let (_, base) = run_in(&dir, "base", &["run"], &config, &[]);
    assert_ne!(read(&out, "metrics.csv"), read(&base, "metrics.csv"));
}

#[test]
fn desk_metrics_match_the_pinned_digest() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(&dir, "desk", &["run"], &common::desk_path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let digest = Sha256::digest(fs::read(out.join("metrics.csv")).unwrap());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, DESK_METRICS_SHA256);
}
