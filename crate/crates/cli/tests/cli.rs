//! End-to-end tests of the `mmvi` binary: artifact layout, flag/config
//! precedence, and the exit-code contract (0 ok, 2 config, 3 runtime).

use std::path::Path;
use std::process::{Command, Output};

fn mmvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvi")).args(args).output().expect("spawn mmvi")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("read {name}: {e}"))
}

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = mmvi(&[
        "run",
        "--n",
        "9",
        "--dt",
        "0.05",
        "--t-end",
        "0.5",
        "--out",
        dir.path().to_str().expect("utf8 path"),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let meta: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "meta.json")).expect("meta.json parses");
    assert_eq!(meta["termination"]["kind"], "completed");
    assert_eq!(meta["config"]["n"], 9);
    assert_eq!(meta["steps_recorded"], 11);

    let state = read(dir.path(), "state.csv");
    assert_eq!(state.lines().count(), 1 + 9 + 2, "one row per node incl. boundaries");
    assert!(state.starts_with("node,x,y,ydot,xdot"));

    let diag = read(dir.path(), "diagnostics.csv");
    assert_eq!(diag.lines().count(), 1 + 11);
}

#[test]
fn energy_adds_the_time_series() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = mmvi(&[
        "energy",
        "--strategy",
        "lm",
        "--scheme",
        "lobatto2",
        "--n",
        "9",
        "--dt",
        "0.05",
        "--t-end",
        "0.5",
        "--out",
        dir.path().to_str().expect("utf8 path"),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let energy = read(dir.path(), "energy.csv");
    assert!(energy.starts_with("t,energy,energy_dev"));
    assert_eq!(energy.lines().count(), 1 + 11);
}

#[test]
fn converge_tabulates_every_resolution() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = mmvi(&[
        "converge",
        "--grid",
        "7,15",
        "--dt",
        "0.05",
        "--t-end",
        "0.5",
        "--out",
        dir.path().to_str().expect("utf8 path"),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let study = read(dir.path(), "study.csv");
    let lines: Vec<&str> = study.lines().collect();
    assert_eq!(lines[0], "n,dt,error,rate,status");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("7,") && lines[1].ends_with(",ok"));
    assert!(lines[2].starts_with("15,") && lines[2].ends_with(",ok"));
    let rows: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "study.json")).expect("study.json parses");
    assert_eq!(rows.as_array().map(Vec::len), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("exp.json");
    std::fs::write(
        &config,
        r#"{
            "problem": "single_soliton",
            "strategy": "lm",
            "scheme": "trapezoidal",
            "constraint": {"kind": "arclength", "alpha": 2.0},
            "n": 9,
            "xmax": 25.0,
            "dt": 0.1,
            "t_end": 0.5
        }"#,
    )
    .expect("write config");
    let out = mmvi(&[
        "run",
        "--config",
        config.to_str().expect("utf8 path"),
        "--dt",
        "0.05",
        "--out",
        dir.path().to_str().expect("utf8 path"),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "meta.json")).expect("meta.json parses");
    assert_eq!(meta["config"]["scheme"], "trapezoidal", "file field survives");
    assert_eq!(meta["config"]["dt"], 0.05, "flag wins over file");
}

#[test]
fn configuration_problems_exit_two() {
    let unknown_scheme = mmvi(&["run", "--scheme", "euler"]);
    assert_eq!(unknown_scheme.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown_scheme.stderr).contains("unknown scheme"));

    let bad_combo = mmvi(&["run", "--strategy", "lm", "--scheme", "gauss2"]);
    assert_eq!(bad_combo.status.code(), Some(2));

    let missing_file = mmvi(&["run", "--config", "/nonexistent/exp.json"]);
    assert_eq!(missing_file.status.code(), Some(2));

    let bad_flag = mmvi(&["run", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_three_and_keeps_partial_diagnostics() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("doomed.json");
    std::fs::write(
        &config,
        r#"{
            "problem": "single_soliton",
            "strategy": "ct",
            "scheme": "gauss2",
            "constraint": {"kind": "arclength", "alpha": 2.5},
            "n": 9,
            "xmax": 25.0,
            "dt": 2.5,
            "t_end": 10.0,
            "newton": {"max_iters": 2, "damping": "none"}
        }"#,
    )
    .expect("write config");
    let out = mmvi(&[
        "run",
        "--config",
        config.to_str().expect("utf8 path"),
        "--out",
        dir.path().to_str().expect("utf8 path"),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "meta.json")).expect("meta.json parses");
    assert_eq!(meta["termination"]["kind"], "failed");
    assert!(dir.path().join("diagnostics.csv").exists());
}
