use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "n_runs = 2
n_source = 300
n_holdout = 100
epochs = 2
kl_pilot_runs = 1
block_id_pairs = 50
parallelism = 1
[sweep]
scopes = [2, 6]
severities = [3.0, 9.0]
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_extrapolate"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn no_args_prints_usage_and_fails() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_fails_with_usage() {
    for args in [&["--bogus"][..], &["train", "--bogus"], &["frobnicate"]] {
        let out = bin().args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn help_succeeds() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().args(["sweep", "--help"]).output().unwrap().status.code(), Some(0));
}

#[test]
fn validation_errors_exit_one() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "n_rns = 3\n").unwrap();
    for args in [
        &["train", "--config", "c.toml", "--distance", "1"][..],
        &["train", "--config", "bad.toml"],
        &["train", "--config", "missing.toml"],
        &["train", "--config", "c.toml", "--mode", "diagonal"],
        &["evaluate", "--config", "c.toml", "--checkpoint", "missing.json"],
        &["sweep", "--config", "c.toml", "--scopes", "1"],
        &["sweep", "--from-grid", "c.toml"],
        &["adapt", "--config", "c.toml", "--checkpoint", "x.json", "--lr", "-1"],
    ] {
        let out = run(d, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn runtime_abort_exits_two() {
    let dir = setup();
    fs::write(dir.path().join("hot.toml"), TINY.replace("[sweep]", "lr = 1e12\n[sweep]")).unwrap();
    let out = run(dir.path(), &["train", "--config", "hot.toml", "--kl-grid", "0.1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn every_subcommand_is_byte_deterministic() {
    let dir = setup();
    let d = dir.path();
    let train = run(d, &["train", "--config", "c.toml", "--out", "model", "--distance", "12"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ckpt = "model/model.json";
    let cases: Vec<Vec<&str>> = vec![
        vec!["generate", "--config", "c.toml"],
        vec!["train", "--config", "c.toml", "--distance", "12"],
        vec!["adapt", "--config", "c.toml", "--distance", "12", "--checkpoint", ckpt, "--steps", "2", "--mask"],
        vec!["evaluate", "--config", "c.toml", "--distance", "12", "--checkpoint", ckpt],
        vec!["sweep", "--config", "c.toml"],
        vec!["check-assumptions", "--config", "c.toml", "--mode", "sparse", "--points", "4"],
        vec!["reproduce-table1", "--config", "c.toml", "--distances", "12"],
        vec!["reproduce-regression", "--config", "c.toml", "--distances", "18", "--n-runs", "1"],
    ];
    for case in cases {
        let mut outputs = Vec::new();
        for rep in ["a", "b"] {
            let out_dir = format!("{}-{rep}", case[0]);
            let mut args = case.clone();
            args.extend(["--out", out_dir.as_str()]);
            let out = run(d, &args);
            assert!(out.status.success(), "{case:?}: {}", String::from_utf8_lossy(&out.stderr));
            outputs.push(files(&d.join(&out_dir)));
        }
        assert!(!outputs[0].is_empty(), "{case:?}");
        assert_eq!(outputs[0], outputs[1], "{case:?}");
    }
}

#[test]
fn table_reproduction_writes_csv_and_summary() {
    let dir = setup();
    let out = run(dir.path(), &["reproduce-table1", "--config", "c.toml", "--mode", "dense", "--out", "t"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("t/results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "mode,task,distance,seed,method,correct,sq_error,block_id,degenerate");
    // Two methods, four default distances, two runs each.
    assert_eq!(lines.count(), 16);
    let md = fs::read_to_string(dir.path().join("t/summary.md")).unwrap();
    assert!(md.starts_with("| mode | task | method | distance |"));
    assert!(md.contains("| dense | classification | source_only | 30 |"));
}

#[test]
fn sparse_assumption_report_has_mechanistic_dependence() {
    let dir = setup();
    let out = run(dir.path(), &["check-assumptions", "--mode", "sparse", "--points", "4", "--out", "a"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/assumptions.json")).unwrap()).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"mechanistic_dependence"));
    for c in v.as_array().unwrap() {
        assert!(c["satisfied"].is_boolean() && c["evidence"].is_object());
    }
}

#[test]
fn plot_from_grid_matches_sweep_plot() {
    let dir = setup();
    let d = dir.path();
    assert!(run(d, &["sweep", "--config", "c.toml", "--out", "s"]).status.success());
    assert!(run(d, &["sweep", "--from-grid", "s/grid.csv", "--out", "p"]).status.success());
    assert_eq!(fs::read(d.join("s/sweep.svg")).unwrap(), fs::read(d.join("p/sweep.svg")).unwrap());
    fs::write(d.join("bad.csv"), "scope,severity,mean_error,n_runs\n2,x,0.1,3\n").unwrap();
    let out = run(d, &["sweep", "--from-grid", "bad.csv", "--out", "q"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
