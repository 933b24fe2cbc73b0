use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kvsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn json(dir: &Path, rel: &str) -> Value {
    serde_json::from_str(&read(dir, rel)).unwrap()
}

/// CSV data rows, without the comment preamble and header.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn error_of(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let last = text.lines().last().expect("error line");
    serde_json::from_str(last).unwrap()
}

const SMOKE: &str = r#"{
  "instances": 2,
  "policies": ["accellm"],
  "efficiency": {"compute": 0.5, "mem_bw": 1.0, "link": 1.0},
  "trace": "one.csv",
  "duration_s": 1.0,
  "warmup_s": 0.0,
  "drain_s": 10.0
}"#;

#[test]
fn smoke_run_reports_the_oracle_ttft() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "one.csv", "#kvsim-trace v1\n0,0.0,512,10\n");
    write(dir.path(), "smoke.json", SMOKE);
    let out = kvsim(dir.path(), &["run", "--config", "smoke.json", "--out", "out"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = json(dir.path(), "out/report.json");
    let ttft = report["points"][0]["report"]["ttft"]["mean"].as_f64().unwrap();
    let want = (2.0 * 70e9 * 512.0 + 4.0 * 512.0 * 512.0 * 8192.0 * 80.0) / (4.0 * 989e12 * 0.5);
    assert!(((ttft - want) / want).abs() < 1e-9);
    assert!((ttft - 0.0366).abs() < 0.5e-4);

    let meta = json(dir.path(), "out/meta.json");
    assert_eq!(meta["meta"]["tool"], "kvsim");
    assert_eq!(meta["meta"], report["meta"]);
    assert_eq!(meta["config"]["drain_s"], 10.0);
    assert_eq!(meta["config"]["policy_params"]["accellm"]["degraded_ticks"], 3);
    let hash = meta["meta"]["config_hash"].as_str().unwrap();
    assert!(read(dir.path(), "out/summary.csv").starts_with(&format!("# kvsim {} config={hash} seed=0\n", env!("CARGO_PKG_VERSION"))));
}

#[test]
fn odd_cluster_fails_with_a_machine_readable_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "odd.json", r#"{"instances": 5, "policies": ["accellm"]}"#);
    let out = kvsim(dir.path(), &["run", "--config", "odd.json", "--out", "out"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_of(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("even instance count required"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_keys_and_empty_rates_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "typo.json", r#"{"instance": 4}"#);
    write(dir.path(), "empty.json", r#"{"rates": []}"#);
    for name in ["typo.json", "empty.json"] {
        let out = kvsim(dir.path(), &["validate-config", "--config", name]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert_eq!(error_of(&out)["error"]["kind"], "config");
    }
    let out = kvsim(dir.path(), &["run", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
}

const SMALL: &str = r#"{
  "instances": 2,
  "policies": ["accellm", "splitwise_static", "unified"],
  "rates": [2.0],
  "duration_s": 15,
  "warmup_s": 2,
  "drain_s": 30
}"#;

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "small.json", SMALL);
    for out in ["a", "b"] {
        let o = kvsim(dir.path(), &["run", "--config", "small.json", "--seed", "7", "--out", out]);
        assert!(o.status.success());
    }
    for file in ["summary.csv", "report.json"] {
        assert_eq!(read(dir.path(), &format!("a/{file}")), read(dir.path(), &format!("b/{file}")), "{file}");
    }
    assert_eq!(json(dir.path(), "a/meta.json")["meta"], json(dir.path(), "b/meta.json")["meta"]);
    assert!(read(dir.path(), "a/summary.csv").contains("seed=7"));
    let summary = read(dir.path(), "a/summary.csv");
    let header = summary.lines().nth(1).unwrap();
    assert_eq!(
        header,
        "policy,rate,ttft_mean,ttft_p95,tbt_mean,tbt_max,jct_mean,jct_p95,cost_eff,idle_frac,peak_kv_gb,link_prefill_gb,link_mirror_gb"
    );
    let policies: Vec<String> = rows(&summary).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(policies, ["accellm", "splitwise_static", "unified"]);
    assert!(!dir.path().join("a/.summary.csv.tmp").exists());
}

#[test]
fn one_point_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "one.json", r#"{"instances": 2, "rates": [3.0], "duration_s": 15, "warmup_s": 2, "drain_s": 30}"#);
    assert!(kvsim(dir.path(), &["run", "--config", "one.json", "--out", "r"]).status.success());
    assert!(kvsim(dir.path(), &["sweep", "--config", "one.json", "--out", "s"]).status.success());
    assert_eq!(rows(&read(dir.path(), "r/summary.csv")), rows(&read(dir.path(), "s/summary.csv")));
    let long = rows(&read(dir.path(), "s/sweep.csv"));
    assert!(long.iter().any(|r| r[2] == "cost_eff"));
    assert!(long.iter().any(|r| r[2] == "saturation_rate" && r[3] == "3"));
    assert!(!dir.path().join("s/comparison.csv").exists());
}

#[test]
fn sweep_writes_comparison_for_several_policies() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "sw.json",
        r#"{"instances": 2, "policies": ["accellm", "unified"], "rates": [1.0, 2.0], "duration_s": 10, "warmup_s": 1, "drain_s": 30}"#,
    );
    assert!(kvsim(dir.path(), &["sweep", "--config", "sw.json", "--out", "s"]).status.success());
    let table = read(dir.path(), "s/comparison.csv");
    assert!(table.lines().nth(1).unwrap().starts_with("rate,metric,accellm,unified,accellm_ratio,unified_ratio"));
    let report = json(dir.path(), "s/report.json");
    assert_eq!(report["points"].as_array().unwrap().len(), 4);
    assert_eq!(report["saturation"].as_array().unwrap().len(), 2);
}

#[test]
fn curves_follow_the_perf_model() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.json",
        r#"{"curves": {"phases": ["prefill", "decode"], "lengths": [500], "batches": [1, 2, 4]}}"#,
    );
    assert!(kvsim(dir.path(), &["curves", "--config", "c.json", "--out", "c"]).status.success());
    let table = rows(&read(dir.path(), "c/curves.csv"));
    assert_eq!(table.len(), 6);
    let prefill: Vec<&Vec<String>> = table.iter().filter(|r| r[0] == "prefill").collect();
    assert!(prefill.iter().all(|r| r[4] == prefill[0][4]));
    let decode1: f64 = table.iter().find(|r| r[0] == "decode" && r[2] == "1").unwrap()[3].parse().unwrap();
    let want = (140e9 + 500.0 * 327_680.0) / (4.0 * 3.35e12 * 0.8);
    assert!(((decode1 - want) / want).abs() < 1e-9);
}

#[test]
fn resource_sweep_records_failed_points_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "rs.json",
        r#"{
          "instances": 2,
          "policies": ["accellm", "splitwise_static"],
          "rates": [2.0],
          "duration_s": 10, "warmup_s": 1, "drain_s": 30,
          "resource_sweep": {"resource": "hbm_capacity", "values": [30e9, 60e9, 80e9]}
        }"#,
    );
    let out = kvsim(dir.path(), &["resource-sweep", "--config", "rs.json", "--out", "r"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let points = read(dir.path(), "r/resource_sweep.csv");
    let data: Vec<&str> = points.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(data.len(), 6);
    for line in &data {
        let failed = line.contains(",3e10,") || line.contains(",30000000000,");
        assert_eq!(failed, line.contains("fit"), "{line}");
    }
    let knees = rows(&read(dir.path(), "r/knees.csv"));
    assert_eq!(knees.len(), 2);
    assert!(knees.iter().all(|k| k[4].parse::<f64>().unwrap() == 60e9));
}

#[test]
fn emit_events_writes_a_log_per_point() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "one.csv", "#kvsim-trace v1\n0,0.0,512,10\n");
    write(dir.path(), "smoke.json", SMOKE);
    let out = kvsim(dir.path(), &["run", "--config", "smoke.json", "--out", "e", "--emit-events"]);
    assert!(out.status.success());
    let log = read(dir.path(), "e/events-accellm-4.jsonl");
    let mut lines = log.lines();
    let head: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(head["meta"]["tool"], "kvsim");
    let kinds: Vec<String> = lines
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.first().map(String::as_str), Some("arrival"));
    assert_eq!(kinds.last().map(String::as_str), Some("complete"));
}
