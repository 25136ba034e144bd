use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use etir::hardware::bundled;
use serde_json::Value;
use tempfile::TempDir;

fn ops_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../ops")
}

fn etir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etir"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("failed to run etir")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gemm8() -> String {
    ops_dir().join("gemm8.json").to_str().unwrap().to_string()
}

#[test]
fn schedule_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        let out = etir(dir.path(), &["schedule", "--op", &gemm8(), "--seed", "3"]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(stdout(&out).contains("graph"));
    }
    let read = |d: &TempDir| fs::read(d.path().join("results.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    let doc: Value = serde_json::from_slice(&read(&a)).unwrap();
    assert!(doc["results"].as_array().is_some_and(|r| !r.is_empty()));
    assert!(doc["results"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["engine"] == "graph"));
}

#[test]
fn both_engines_are_recorded() {
    let dir = TempDir::new().unwrap();
    let out = etir(
        dir.path(),
        &["schedule", "--op", &gemm8(), "--engine", "both"],
    );
    assert!(out.status.success());
    assert!(stdout(&out).contains("graph/tree ratio"));
    let doc: Value =
        serde_json::from_slice(&fs::read(dir.path().join("results.json")).unwrap()).unwrap();
    let engines: Vec<&str> = doc["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["engine"].as_str().unwrap())
        .collect();
    assert!(engines.contains(&"graph") && engines.contains(&"tree"));
}

#[test]
fn compare_writes_csv() {
    let dir = TempDir::new().unwrap();
    let suite = write(
        dir.path(),
        "suite.json",
        r#"[{"label":"g","kind":"gemm","M":16,"K":16,"N":16},{"label":"v","kind":"gemv","M":32,"N":8}]"#,
    );
    let out = etir(
        dir.path(),
        &["compare", "--suite", &suite, "--seeds", "0-2"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "op_label,tree_cost,graph_cost,ratio,graph_wall_ms,tree_wall_ms,status"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("g,") && lines[2].starts_with("v,"));
    assert!(lines[3].starts_with("geomean,"));
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        let ratio: f64 = cols[3].parse().unwrap();
        assert!(ratio <= 1.0, "{row}");
        assert_eq!(cols[6], "ok");
    }
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let empty = write(dir.path(), "empty.json", "[]");
    assert_eq!(
        etir(dir.path(), &["compare", "--suite", &empty])
            .status
            .code(),
        Some(2)
    );
    let bad = write(
        dir.path(),
        "bad.json",
        r#"{"kind":"gemm","M":0,"K":4,"N":4}"#,
    );
    assert_eq!(
        etir(dir.path(), &["schedule", "--op", &bad]).status.code(),
        Some(2)
    );
    let out = etir(
        dir.path(),
        &[
            "schedule",
            "--op",
            &gemm8(),
            "--t0",
            "0.5",
            "--threshold",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(
        etir(
            dir.path(),
            &["schedule", "--op", &gemm8(), "--hw", "no-such-gpu"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(etir(dir.path(), &["schedule"]).status.code(), Some(2));
}

#[test]
fn analyze_reports_chain() {
    let dir = TempDir::new().unwrap();
    let mut hw = bundled("generic-gpu").unwrap();
    hw.levels.truncate(2);
    let hw = write(dir.path(), "hw.json", &hw.to_json());
    let op = write(dir.path(), "gemv.json", r#"{"kind":"gemv","M":2,"N":1}"#);
    let out = etir(
        dir.path(),
        &["analyze", "--op", &op, "--hw", &hw, "--vthreads", "1"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: Value =
        serde_json::from_slice(&fs::read(dir.path().join("analysis.json")).unwrap()).unwrap();
    assert_eq!(doc["states"], 4);
    assert_eq!(doc["levels"][0]["states"], 2);
    assert_eq!(doc["irreducible"], serde_json::json!([true]));
    assert_eq!(doc["aperiodic"], false);

    let out = etir(
        dir.path(),
        &[
            "analyze",
            "--op",
            &gemm8(),
            "--hw",
            &hw,
            "--vthreads",
            "1,2,4",
        ],
    );
    let doc: Value = serde_json::from_str(stdout(&out).split("wrote").next().unwrap()).unwrap();
    assert_eq!(doc["aperiodic"], true);
    assert!(doc["stationary_residual"].as_f64().unwrap() < 1e-10);
    assert_eq!(doc["value_initial"], doc["policy_payoff"]);
}

#[test]
fn analyze_oversized_space_exits_three() {
    let dir = TempDir::new().unwrap();
    let op = write(
        dir.path(),
        "big.json",
        r#"{"kind":"gemm","M":64,"K":64,"N":64}"#,
    );
    let out = etir(dir.path(), &["analyze", "--op", &op, "--max-states", "500"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("500"));
}

#[test]
fn verify_passes_and_catches_tampering() {
    let dir = TempDir::new().unwrap();
    let op = write(
        dir.path(),
        "conv.json",
        r#"{"kind":"conv2d","I":[1,3,9,9],"K":[4,3,3,3],"S":1}"#,
    );
    assert!(
        etir(dir.path(), &["schedule", "--op", &op, "--engine", "both"])
            .status
            .success()
    );
    let results = dir.path().join("results.json");
    let path = results.to_str().unwrap();
    for mode in ["f64", "f32"] {
        let out = etir(dir.path(), &["verify", "--results", path, "--mode", mode]);
        assert!(out.status.success(), "{}", stdout(&out));
        assert!(!stdout(&out).contains("FAIL"));
    }
    let mut doc: Value = serde_json::from_slice(&fs::read(&results).unwrap()).unwrap();
    let trace = doc["results"][0]["trace"].as_array_mut().unwrap();
    trace.pop();
    let tampered = write(dir.path(), "tampered.json", &doc.to_string());
    let out = etir(dir.path(), &["verify", "--results", &tampered]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("ReplayMismatch"));
}

#[test]
fn emit_and_explain() {
    let dir = TempDir::new().unwrap();
    assert!(etir(dir.path(), &["schedule", "--op", &gemm8()])
        .status
        .success());
    let results = dir.path().join("results.json");
    let path = results.to_str().unwrap();
    let out = etir(dir.path(), &["emit", "--results", path]);
    assert!(out.status.success());
    let src = fs::read_to_string(dir.path().join("gemm8.c")).unwrap();
    assert!(src.contains("for ("));

    let out = etir(dir.path(), &["cost", "explain", "--results", path]);
    assert!(out.status.success());
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let doc: Value = serde_json::from_slice(&fs::read(&results).unwrap()).unwrap();
    assert_eq!(
        report["cost"]["est_seconds"],
        doc["results"][0]["est_seconds"]
    );

    let out = etir(
        dir.path(),
        &["cost", "explain", "--results", path, "--index", "999"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = etir(dir.path(), &["emit", "--op", &gemm8(), "--engine", "tree"]);
    assert!(out.status.success());
}
