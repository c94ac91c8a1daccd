//! Command line behaviour: outputs and exit codes.

mod common;

use std::process::{Command, Output};

use common::fixture_path;
use serde_json::Value;

fn mscrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscrn")).args(args).output().expect("binary runs")
}

fn fixture_arg(name: &str) -> String {
    fixture_path(name).to_string_lossy().into_owned()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON output")
}

#[test]
fn analyze_reports_the_gene_partition() {
    let out = mscrn(&["analyze", &fixture_arg("gene.mscrn")]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["class"]["name"], "single-scale");
    assert_eq!(v["tiers"][0]["discrete_species"], serde_json::json!(["G", "Gp"]));
    assert_eq!(v["tiers"][0]["continuous_species"], serde_json::json!(["P"]));
    assert_eq!(v["tiers"][0]["discrete_reactions"], serde_json::json!([1, 2]));
    assert_eq!(v["tiers"][0]["continuous_reactions"], serde_json::json!([3, 4]));
}

#[test]
fn analyze_reports_conserved_sums_and_spatial_cases() {
    let v = json(&mscrn(&["analyze", &fixture_arg("activation.mscrn")]));
    assert_eq!(v["conserved"]["quantities"][0]["theta"], serde_json::json!([["G", 1], ["Gp", 1]]));
    let v = json(&mscrn(&["analyze", &fixture_arg("ab_spatial.mscrn")]));
    assert_eq!(v["spatial_case"]["case"], 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let out = mscrn(&["bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(mscrn(&["simulate"]).status.code(), Some(1));
    assert_eq!(mscrn(&["simulate", &fixture_arg("ab.mscrn"), "--grid", "x,y"]).status.code(), Some(1));
}

#[test]
fn model_errors_exit_with_two() {
    assert_eq!(mscrn(&["analyze", "/nonexistent/model.mscrn"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mscrn");
    std::fs::write(&bad, "species A alpha=1\nA + Q -> 0 @ mass_action(1)\n").unwrap();
    let out = mscrn(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains('Q'));
}

#[test]
fn numerical_failures_exit_with_three() {
    let out = mscrn(&["avg-rates", &fixture_arg("activation.mscrn"), "--at", "1,3", "--budget", "20"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reduce_prints_the_averaged_rate() {
    let out = mscrn(&["reduce", &fixture_arg("ab.mscrn")]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("reaction R1 flow [vA:-1] rate k1*k2*vA/(k3+k1*vA)"), "{text}");
}

#[test]
fn avg_rates_tabulates_values() {
    let out = mscrn(&["avg-rates", &fixture_arg("ab.mscrn"), "--at", "1;3", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].ends_with(",1,0.5,0"), "{}", rows[1]);
    assert!(rows[2].ends_with(",3,0.75,0"), "{}", rows[2]);
}

#[test]
fn movement_simulation_keeps_totals() {
    let out = mscrn(&["simulate", &fixture_arg("movement.mscrn"), "--N", "1", "--grid", "0:1:0.25", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("time,X@c1,X@c2,S_X"));
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[1] + cols[2], 1000.0);
        assert_eq!(cols[3], 1000.0);
    }
}

#[test]
fn simulate_runs_both_engines() {
    for engine in ["ssa", "pdmp"] {
        let out = mscrn(&["simulate", &fixture_arg("gene.mscrn"), "--engine", engine, "--N", "50", "--replicas", "20"]);
        assert_eq!(out.status.code(), Some(0), "{engine}");
        let v = json(&out);
        assert_eq!(v["replicas"], 20);
    }
}

#[test]
fn verify_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let out = mscrn(&[
        "verify",
        &fixture_arg("ab.mscrn"),
        "--N",
        "10,100",
        "--replicas",
        "200",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["errors"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("n,observable,time,mean,std_error,limit_mean,limit_std_error,normalized_error\n"));
    let single = mscrn(&["verify", &fixture_arg("ab.mscrn"), "--N", "10", "--replicas", "50"]);
    assert_eq!(json(&single)["trend"], "not-applicable");
}
