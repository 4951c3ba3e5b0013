mod common;

use std::process::Command as Proc;

use bsre::cli::{memory_estimate_mb, run_config, Command};
use bsre::config::{Audit, ExperimentConfig};
use common::*;

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_bsre"))
}

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs_dir().join("riccati-reference.toml")).unwrap();
    cfg.grid.steps = 200;
    cfg.output.dir = dir.to_path_buf();
    cfg
}

#[test]
fn rho_outside_interval_exits_with_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(configs_dir().join("riccati-reference.toml"))
        .unwrap()
        .replace("rho = 0.4", "rho = 0.6");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, src).unwrap();
    let out = bin().args(["verify", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_config");
    assert!(err["message"].as_str().unwrap().contains("(1/4, 1/2)"));
}

#[test]
fn missing_config_is_a_configuration_error() {
    let out = bin().args(["solve-riccati", "--config", "/nonexistent/x.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.coefficients = bsre::config::CoefficientSpec::ConstantDiagonal {
        c: bsre::config::PerMode::Uniform(0.9),
        b: bsre::config::PerMode::Uniform(0.0),
        s: bsre::config::PerMode::Uniform(1.0),
    };
    cfg.solver.max_iter = 2;
    let path = dir.path().join("slow.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = bin().args(["solve-lyapunov", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "non_convergence");
}

#[test]
fn commands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = configs_dir().join("riccati-reference.toml");
    for (cmd, files) in [
        ("solve-lyapunov", vec!["lyapunov.json", "lyapunov_eigen.csv"]),
        ("solve-riccati", vec!["riccati.json", "riccati_eigen.csv"]),
        ("simulate", vec!["costs.csv", "trajectory_0000.csv", "trajectory_0003.csv"]),
        ("oracle-compare", vec!["oracle.csv", "oracle.json"]),
    ] {
        let out_dir = dir.path().join(cmd);
        let out = bin()
            .args([cmd, "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        for f in files {
            assert!(out_dir.join(f).exists(), "{cmd} did not write {f}");
        }
    }
    let oracle: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("oracle-compare/oracle.json")).unwrap()).unwrap();
    assert!(oracle["max_rel_error"].as_f64().unwrap() <= 1e-4);
    let header = std::fs::read_to_string(dir.path().join("simulate/trajectory_0000.csv")).unwrap();
    assert!(header.starts_with("t,y_1,y_2,y_3,y_4,u_1,u_2,u_3,u_4\n"));
}

#[test]
fn verify_output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for w in [1, 3] {
        let mut cfg = small_config(&dir.path().join(w.to_string()));
        cfg.verify.audits = vec![Audit::Moments, Audit::Value, Audit::Probe];
        cfg.workers = Some(w);
        let out = run_config(Command::Verify, &cfg).unwrap();
        assert!(out.passed);
        reports.push(std::fs::read(&out.files[0]).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn seed_override_changes_monte_carlo_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = configs_dir().join("stochastic-value.toml");
    let mut costs = Vec::new();
    for seed in ["1", "2"] {
        let out_dir = dir.path().join(seed);
        let out = bin()
            .args(["simulate", "--config"])
            .arg(&cfg_path)
            .args(["--seed", seed, "--workers", "2", "--out"])
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        costs.push(std::fs::read_to_string(out_dir.join("costs.csv")).unwrap());
    }
    assert_ne!(costs[0], costs[1]);
}

#[test]
fn memory_budget_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.memory_budget_mb = 1e-3;
    assert!(memory_estimate_mb(Command::Verify, &cfg) > 1e-3);
    let err = run_config(Command::Verify, &cfg).unwrap_err();
    assert_eq!(bsre::cli::exit_code(&err), 2);
}
