use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdisc::discover::Method;
use kdisc::dynamics::read_trajectory;
use kdisc::presets::{preset, Benchmark, Scale, Setting};
use serde_json::{json, Value};

fn kdisc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdisc")).args(args).output().expect("spawn kdisc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small experiment of `method`: 200 agents, 31 snapshots.
fn small_config(dir: &Path, method: Method) -> Value {
    let (bench, setting) = match method {
        Method::KnownS => (Benchmark::KnownS, Setting::S1),
        _ => (Benchmark::NonlocalDiffusion, Setting::S3),
    };
    let e = preset(bench, setting, Scale::Desk, method, 5).unwrap();
    let mut v = serde_json::to_value(&e).unwrap();
    v["sim"]["n_agents"] = json!(200);
    v["sim"]["snapshots"] = json!(31);
    v["discovery"]["drift"]["snapshots"] = json!(7);
    v["discovery"]["drift"]["stride"] = json!(4);
    v["discovery"]["diffusion"]["snapshots"] = json!(7);
    v["discovery"]["diffusion"]["stride"] = json!(4);
    if method == Method::KnownS {
        v["discovery"]["drift"]["stride"] = json!(1);
        v["discovery"]["diffusion"]["stride"] = json!(1);
    }
    if method == Method::Rbm {
        v["discovery"]["batch_size"] = json!(20);
        v["discovery"]["ensemble_size"] = json!(2);
    }
    v["output"] = json!({
        "trajectory": dir.join("data.kdt"),
        "report": dir.join("report.json"),
    });
    v
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

#[test]
fn generate_is_deterministic_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path(), Method::KnownS));
    let a = dir.path().join("a.kdt");
    let b = dir.path().join("b.kdt");
    for p in [&a, &b] {
        let out = kdisc(&["generate", "--config", path_str(&cfg), "--out", path_str(p)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let data = read_trajectory(&a).unwrap();
    assert_eq!((data.n_agents, data.snapshots()), (200, 31));
    assert!(data.pairings.is_some());

    let again = kdisc(&["generate", "--config", path_str(&cfg), "--out", path_str(&a)]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = kdisc(&["generate", "--config", path_str(&cfg), "--out", path_str(&a), "--force", "--seed", "9"]);
    assert_eq!(code(&forced), 0);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn single_snapshot_file_holds_only_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config(dir.path(), Method::KnownS);
    v["sim"]["snapshots"] = json!(1);
    let cfg = write_config(dir.path(), "cfg.json", &v);
    let out = kdisc(&["generate", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = read_trajectory(&dir.path().join("data.kdt")).unwrap();
    assert_eq!(data.snapshots(), 1);
}

#[test]
fn known_pairings_missing_from_file_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config(dir.path(), Method::KnownS);
    v["scheme"] = json!("batch");
    v["sim"]["batch_size"] = json!(5);
    let cfg = write_config(dir.path(), "cfg.json", &v);
    assert_eq!(code(&kdisc(&["generate", "--config", path_str(&cfg)])), 0);
    let out = kdisc(&["discover", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pairings"));
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn discover_echoes_config_and_emits_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let v = small_config(dir.path(), Method::Rbm);
    let cfg = write_config(dir.path(), "cfg.json", &v);
    assert_eq!(code(&kdisc(&["generate", "--config", path_str(&cfg)])), 0);
    let out = kdisc(&["--threads", "1", "discover", "--config", path_str(&cfg), "--emit-plots"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["discovery"], v["discovery"]);
    assert_eq!(report["config"]["sim"], v["sim"]);
    let labels: Vec<&str> = report["report"]["validation"].as_array().unwrap().iter().map(|e| e["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["averaging", "best"]);

    let drift = fs::read_to_string(dir.path().join("report_drift.csv")).unwrap();
    let mut lines = drift.lines();
    assert_eq!(lines.next(), Some("r,P_true,P_hat_av,P_hat_best,P_hat_mf"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 201);
    for row in &rows {
        assert_eq!(row.len(), 5);
        assert!(row[..4].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
        assert_eq!(row[4], "");
    }
    let diffusion = fs::read_to_string(dir.path().join("report_diffusion_0.csv")).unwrap();
    assert!(diffusion.starts_with("r,D_true,D_hat_av,D_hat_best,D_hat_mf\n"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config(dir.path(), Method::MeanField);
    v["sim"]["agents"] = json!(10);
    let cfg = write_config(dir.path(), "cfg.json", &v);
    let out = kdisc(&["generate", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("agents"));
}

#[test]
fn infeasible_constraints_are_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config(dir.path(), Method::MeanField);
    // Nonincreasing, yet the last value is pinned above the first.
    v["discovery"]["diffusion"]["anchors"] = json!([[0, 0.5], [-1, 1.0]]);
    v["discovery"]["diffusion"]["monotone"] = json!(-1);
    let cfg = write_config(dir.path(), "cfg.json", &v);
    assert_eq!(code(&kdisc(&["generate", "--config", path_str(&cfg)])), 0);
    let out = kdisc(&["discover", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_test_id_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdisc(&["reproduce", "7", "--out-dir", path_str(dir.path())]);
    assert_eq!(code(&out), 2);
    let bad_scale = kdisc(&["reproduce", "1", "--scale", "huge"]);
    assert_eq!(code(&bad_scale), 2);
}

#[test]
fn bound_check_holds_on_a_small_instance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "n_agents": 10, "dt": 0.01, "snapshots": 21, "paths": 50,
        "perturbations": [0.0, 0.01, 0.1],
        "drift": {"kind": "cucker_smale"},
        "diffusion": {"kind": "rational_decay", "amplitude": 0.25},
        "seed": 3, "grid_points": 2001
    });
    let p = write_config(dir.path(), "bound.json", &cfg);
    let out_path = dir.path().join("cases.json");
    let out = kdisc(&["bound-check", "--config", path_str(&p), "--out", path_str(&out_path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cases: Value = serde_json::from_str(&fs::read_to_string(out_path).unwrap()).unwrap();
    assert_eq!(cases.as_array().unwrap().len(), 3);
    assert!(cases.as_array().unwrap().iter().all(|c| c["holds"] == json!(true)));
    assert_eq!(cases[0]["empirical"], json!(0.0));
}
