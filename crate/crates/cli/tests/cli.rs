use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stabsyn::lmi::Certificate;
use stabsyn::rnnctl::{Activation, ControllerDims, TransformedParams};
use stabsyn::trainer::{StochasticPolicy, TrainConfig};

fn stabsyn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stabsyn"))
        .args(args)
        .current_dir(cwd)
        .env("STABSYN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_config(dir: &Path, env: &str, epochs: usize, mode: &str) -> String {
    let mut cfg = TrainConfig::for_env(env).unwrap();
    cfg.batch_steps = 1200;
    cfg.epochs = epochs;
    cfg.n_xi = 4;
    cfg.n_phi = 4;
    cfg.mode = mode.parse().unwrap();
    let path = dir.join(format!("{env}-{mode}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn zero_params(dir: &Path, n_y: usize, n_u: usize) -> String {
    let dims = ControllerDims {
        n_xi: 2,
        n_phi: 2,
        n_y,
        n_u,
    };
    let theta = TransformedParams::zeros(dims, Activation::Tanh).unwrap();
    let path = dir.join("zero.json");
    fs::write(&path, serde_json::to_string(&theta).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn list_envs_names_every_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = stabsyn(&["list-envs"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["pendulum-linear", "pendulum-nonlinear", "cartpole", "pendubot", "vehicle", "power39"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stabsyn(&["train", "--env", "bogus"], dir.path())), 1);
    assert_eq!(code(&stabsyn(&["train", "--env", "pendulum-linear", "--nope"], dir.path())), 1);
    assert_eq!(code(&stabsyn(&["train", "--env", "pendulum-linear", "--mode", "sgd"], dir.path())), 1);
    assert_eq!(code(&stabsyn(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&stabsyn(&["train", "--env", "pendulum-linear", "--epochs", "5000"], dir.path())), 1);
}

#[test]
fn failed_initialization_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::for_env("pendulum-linear").unwrap();
    cfg.n_xi = 1;
    let path = dir.path().join("cfg.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = stabsyn(&["train", "--config", path.to_str().unwrap(), "--out", "run"], dir.path());
    assert_eq!(code(&out), 2);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("observer-design"), "{err}");
}

#[test]
fn projected_train_writes_run_dir_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "pendulum-linear", 3, "projected");
    let out = stabsyn(&["train", "--config", &cfg, "--seed", "0", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");

    let rewards = fs::read_to_string(run.join("rewards.csv")).unwrap();
    let lines: Vec<&str> = rewards.lines().collect();
    assert_eq!(lines[0], "epoch,mean,std,diverged_count");
    assert_eq!(lines.len(), 4);
    for i in 0..=3 {
        assert!(run.join("certs").join(format!("epoch_{i}.json")).exists());
        let text = fs::read_to_string(run.join("params").join(format!("epoch_{i}.json"))).unwrap();
        let p: StochasticPolicy = serde_json::from_str(&text).unwrap();
        let again: StochasticPolicy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, again);
    }
    let text = fs::read_to_string(run.join("certs/epoch_3.json")).unwrap();
    let cert: Certificate = serde_json::from_str(&text).unwrap();
    let again: Certificate = serde_json::from_str(&serde_json::to_string(&cert).unwrap()).unwrap();
    assert_eq!(cert, again);
    let cfg_text = fs::read_to_string(run.join("config.json")).unwrap();
    let resolved: TrainConfig = serde_json::from_str(&cfg_text).unwrap();
    assert_eq!(resolved.epochs, 3);
    assert_eq!(serde_json::to_string_pretty(&resolved).unwrap(), cfg_text);

    // the trained controller verifies and evaluates without violations
    let params = run.join("params/epoch_3.json");
    let params = params.to_str().unwrap();
    let v = stabsyn(&["verify", "--params", params, "--env", "pendulum-linear", "--rho", "1", "--out", "v"], dir.path());
    assert_eq!(code(&v), 0, "{}", String::from_utf8_lossy(&v.stdout));
    let cert: Certificate =
        serde_json::from_str(&fs::read_to_string(dir.path().join("v/certificate.json")).unwrap()).unwrap();
    assert_eq!(cert.rho, 1.0);
    assert!(dir.path().join("v/manifest.json").exists());

    let e = stabsyn(
        &["eval", "--params", params, "--env", "pendulum-linear", "--episodes", "20", "--deterministic", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&e), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["diverged_count"], 0);
    assert_eq!(summary["episodes"], 20);

    let x = stabsyn(&["export-cert", "--run", "run", "--out", "exported.json"], dir.path());
    assert_eq!(code(&x), 0);
    let exported: Certificate =
        serde_json::from_str(&fs::read_to_string(dir.path().join("exported.json")).unwrap()).unwrap();
    let last: Certificate =
        serde_json::from_str(&fs::read_to_string(run.join("certs/epoch_3.json")).unwrap()).unwrap();
    assert_eq!(exported, last);
}

#[test]
fn zero_epochs_keeps_only_initial_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "pendulum-linear", 1, "projected");
    let out = stabsyn(&["train", "--config", &cfg, "--epochs", "0", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0);
    let certs: Vec<_> = fs::read_dir(dir.path().join("run/certs")).unwrap().collect();
    assert_eq!(certs.len(), 1);
    assert!(dir.path().join("run/certs/epoch_0.json").exists());
    let rewards = fs::read_to_string(dir.path().join("run/rewards.csv")).unwrap();
    assert_eq!(rewards.lines().count(), 1);
}

#[test]
fn zero_controller_on_cartpole_is_not_certified() {
    let dir = tempfile::tempdir().unwrap();
    let params = zero_params(dir.path(), 2, 1);
    let out = stabsyn(&["verify", "--params", &params, "--env", "cartpole", "--rho", "0.98", "--out", "v"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8(out.stdout).unwrap().contains("no certificate found"));
    assert!(!dir.path().join("v/certificate.json").exists());
}

#[test]
fn zero_controller_on_vehicle_is_not_certified() {
    // The open-loop lateral model has a double eigenvalue at 1, so no
    // certificate exists at rho = 1.
    let dir = tempfile::tempdir().unwrap();
    let params = zero_params(dir.path(), 2, 1);
    let out = stabsyn(&["verify", "--params", &params, "--env", "vehicle", "--rho", "1", "--out", "v"], dir.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn mismatched_params_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let params = zero_params(dir.path(), 3, 1);
    let out = stabsyn(&["verify", "--params", &params, "--env", "cartpole", "--out", "v"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_with_zero_episodes_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let params = zero_params(dir.path(), 2, 1);
    let out = stabsyn(
        &["eval", "--params", &params, "--env", "cartpole", "--episodes", "0", "--deterministic", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(dir.path().join("e/trajectories.csv")).unwrap();
    assert_eq!(csv, "episode,k,x1,x2,x3,x4,u1,r\n");
}

#[test]
fn baseline_controller_eval_records_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "cartpole", 2, "baseline-pg");
    let out = stabsyn(&["train", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(!dir.path().join("run/certs/epoch_0.json").exists());
    let e = stabsyn(
        &["eval", "--params", "run/params/epoch_2.json", "--env", "cartpole", "--episodes", "10", "--out", "e"],
        dir.path(),
    );
    assert_eq!(code(&e), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e/summary.json")).unwrap()).unwrap();
    assert!(summary["diverged_count"].as_u64().is_some());
    let csv = fs::read_to_string(dir.path().join("e/trajectories.csv")).unwrap();
    assert!(csv.lines().count() > 10);
}
