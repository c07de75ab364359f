use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmas::harness::Scenario;

fn dmas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmas"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn paper_toml() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/paper.toml")
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let scenario = paper_toml();
    let mut args = vec!["run", scenario.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    dmas(&args)
}

#[test]
fn run_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "cycles.csv", "audit.json", "ledger.json", "trace.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 9, "header plus one row per request");
    assert!(lines[0].starts_with("pa,request,start_ms"));

    // Summary totals are the column sums of the CSV.
    let mut reader = csv::Reader::from_reader(metrics.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (mut total, mut on) = (0u64, 0u64);
    for rec in reader.records() {
        let rec = rec.unwrap();
        total += rec[col("total_ms")].parse::<u64>().unwrap();
        on += rec[col("on_chain_ms")].parse::<u64>().unwrap();
    }
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    let all: Vec<&str> = summary
        .lines()
        .find(|l| l.starts_with("all "))
        .unwrap()
        .split_whitespace()
        .collect();
    assert_eq!(all[5].parse::<u64>().unwrap(), total);
    assert_eq!(all[6].parse::<u64>().unwrap(), on);
    assert_eq!(all[7].parse::<u64>().unwrap(), total - on);
}

#[test]
fn cmas_run_has_no_ledger_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path(), &["--mode", "cmas", "--seed", "3"]);
    assert!(out.status.success());
    assert!(!dir.path().join("ledger.json").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mode=cmas seed=3"));
}

#[test]
fn verify_accepts_genuine_and_flags_altered_audits() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_into(dir.path(), &[]).status.success());
    let audit = dir.path().join("audit.json");
    let ledger = dir.path().join("ledger.json");
    let ok = dmas(&["verify", "--audit", audit.to_str().unwrap(), "--ledger", ledger.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("ok:"));

    let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(&audit).unwrap()).unwrap();
    doc["cycles"][1]["sa"] = serde_json::Value::String("did:dmas:sa-r3".into());
    let altered = dir.path().join("altered.json");
    fs::write(&altered, serde_json::to_vec(&doc).unwrap()).unwrap();
    let bad = dmas(&["verify", "--audit", altered.to_str().unwrap(), "--ledger", ledger.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("invariant violation"));
}

#[test]
fn sweep_reports_decreasing_shares() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmas(&["sweep", "--pa-counts", "1,2,4", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let shares: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(shares.len(), 3);
    assert!(shares.windows(2).all(|w| w[1] < w[0]), "{shares:?}");
}

#[test]
fn config_errors_exit_with_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "pa_count = 1\n[latency]\nper_hop_ms = \"fast\"\n").unwrap();
    let out = dmas(&["run", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("latency.per_hop_ms"), "{err}");

    fs::write(&bad, "pa_count = 0\n").unwrap();
    let out = dmas(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pa_count"));

    let missing = dmas(&["run", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn unwritable_output_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("taken");
    fs::write(&file, "x").unwrap();
    let out = run_into(&file, &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn printed_scenario_round_trips() {
    let out = dmas(&["scenario"]);
    assert!(out.status.success());
    let parsed = Scenario::from_toml_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(parsed, Scenario::default());
    let file = Scenario::from_file(&paper_toml()).unwrap();
    assert_eq!(file, Scenario::default());
}
