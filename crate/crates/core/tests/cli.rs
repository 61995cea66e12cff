//! End-to-end runs of the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nlcollab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_dir(out: &Output) -> PathBuf {
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap()
}

const TRAIN: &str = r#"{
  "dataset": {"source": {"kind": "two_moons", "n": 120, "seed": 2}, "randomization": 0.2},
  "model": {"hidden": [8]},
  "train": {"scheme": "multi", "epochs": 8, "batch_size": 16, "seed": 1, "warmup_epochs": 2},
  "schemes": [{"single": 0}, {"nonlinear": 3.0}],
  "seeds": [1, 2]
}"#;

#[test]
fn train_then_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "train.json", TRAIN);
    let out_root = tmp.path().join("out");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--out", out_root.to_str().unwrap()];
    let dir = run_dir(&run(&args));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(dir.file_name().unwrap().to_str().unwrap(), hash);
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    for f in [
        "config.json",
        "comparison.csv",
        "trajectory_single-0_seed1.csv",
        "trajectory_nonlinear-p3_seed2.json",
        "model_nonlinear-p3_seed2.json",
    ] {
        assert!(files.contains(&f), "{f}");
        assert!(dir.join(f).exists());
    }
    let csv = fs::read_to_string(dir.join("trajectory_nonlinear-p3_seed1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("epoch,train_acc,val_acc,loss_ce,loss_mse,composite,beta_1,beta_2"));
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("trajectory_nonlinear-p3_seed1.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"], hash);

    // rerun is byte-identical
    let first = fs::read(dir.join("trajectory_single-0_seed2.csv")).unwrap();
    let again = run_dir(&run(&args));
    assert_eq!(again, dir);
    assert_eq!(fs::read(dir.join("trajectory_single-0_seed2.csv")).unwrap(), first);

    let model = dir.join("model_nonlinear-p3_seed1.json");
    let bounds = format!(
        r#"{{"dataset": {{"source": {{"kind": "two_moons", "n": 120, "seed": 2}}}},
            "bounds": {{"model": {:?}, "sigma": 0.02, "n_samples": 20, "eps_dp": 0.01}}}}"#,
        model.to_str().unwrap()
    );
    let bcfg = write(tmp.path(), "bounds.json", &bounds);
    let bdir = run_dir(&run(&["bounds", "--config", bcfg.to_str().unwrap(), "--out", out_root.to_str().unwrap()]));
    let cert: Value = serde_json::from_str(&fs::read_to_string(bdir.join("certificate.json")).unwrap()).unwrap();
    let keys: Vec<&String> = cert.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 8);
    let emp = cert["emp_risk"].as_f64().unwrap();
    let upper = cert["risk_upper"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&emp) && upper >= emp && upper <= 1.0);
    assert_eq!(cert["m"], 96);
    let lin: Value = serde_json::from_str(&fs::read_to_string(bdir.join("linear_bound.json")).unwrap()).unwrap();
    assert!(lin["bound"].as_f64().unwrap() > emp);
}

#[test]
fn seed_override_changes_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "train.json", TRAIN);
    let out = tmp.path().join("o");
    let base = ["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let a = run_dir(&run(&base));
    let mut with = base.to_vec();
    with.extend(["--seed-override", "7", "--jobs", "2"]);
    let b = run_dir(&run(&with));
    assert_ne!(a, b);
    assert!(b.join("trajectory_multi_seed7.csv").exists() || b.join("trajectory_single-0_seed7.csv").exists());
}

#[test]
fn klsweep_writes_both_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "k.json", r#"{"klsweep": {"grid": {"lo": -3, "hi": 3, "n": 201}, "p_list": [1, 2]}}"#);
    let dir = run_dir(&run(&["klsweep", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]));
    for mode in ["weighted", "unweighted_norm"] {
        let r: Value = serde_json::from_str(&fs::read_to_string(dir.join(format!("kl_report_{mode}.json"))).unwrap()).unwrap();
        assert_eq!(r["mode"], mode);
        assert!(r["d_non"]["2"].as_f64().unwrap() >= 0.0);
        assert!(r["dD_dp"]["1"].is_number());
    }
    let e: Value = serde_json::from_str(&fs::read_to_string(dir.join("entropy.json")).unwrap()).unwrap();
    assert!(e["weighted"]["1"].is_number());
}

#[test]
fn spectral_small_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "s.json",
        r#"{"spectral": {"epochs": 20, "width": 20, "n_points": 64, "schemes": ["multi"], "seeds": [4]}}"#,
    );
    let dir = run_dir(&run(&["spectral", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]));
    let csv = fs::read_to_string(dir.join("spectral_seed4.csv")).unwrap();
    assert!(csv.starts_with("scheme,epoch,band_lo,band_hi,rel_error\n"));
    assert_eq!(csv.lines().count(), 1 + 20 * 3);
    let s: Value = serde_json::from_str(&fs::read_to_string(dir.join("spectral_seed4.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 4);
}

#[test]
fn invalid_inputs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", r#"{"klsweep": {"p_list": [1]}, "extra": true}"#);
    let out = run(&["klsweep", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["kind"], "config_parse");
    assert!(e["error"]["message"].as_str().unwrap().contains("extra"));

    let nested = write(tmp.path(), "n.json", r#"{"train": {"scheme": "multi", "epochs": 3, "batch_size": 2, "seed": 0, "lr": 1}}"#);
    let out = run(&["train", "--config", nested.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("train"));

    let lam = write(tmp.path(), "l.json", r#"{"bounds": {"model": "m.json", "lambda": 0.25}}"#);
    assert_eq!(run(&["bounds", "--config", lam.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    let missing_section = write(tmp.path(), "e.json", "{}");
    let out = run(&["spectral", "--config", missing_section.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config_missing_section");
}

#[test]
fn missing_model_is_structured_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "b.json",
        r#"{"dataset": {"source": {"kind": "two_moons", "n": 50}}, "bounds": {"model": "no/such/model.json"}}"#,
    );
    let out = run(&["bounds", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["kind"], "missing_model");
    assert!(e["error"]["message"].as_str().unwrap().contains("no/such/model.json"));
}

#[test]
fn verify_writes_summary_and_detects_mutation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let s: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("verify_summary.json")).unwrap()).unwrap();
    assert_eq!(s["passed"], true);
    assert_eq!(s["failed"].as_array().unwrap().len(), 0);
    let out = run(&["verify", "--mutate", "composite-grad-sign", "--mutation-seed", "3"]);
    assert_eq!(out.status.code(), Some(3));
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(s["failed"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f == "composite.composite_grad_matches_finite_differences"));
}

#[test]
fn schema_command_prints_both_schemas() {
    let out = run(&["schema"]);
    assert_eq!(out.status.code(), Some(0));
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(s["config"]["properties"]["klsweep"].is_object());
    assert!(s["verify_summary"]["properties"]["invariants"].is_object());
}
