use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn god(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_god"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUADRATIC: &str = r#"["1", "x1", "x2", "x3", "x1^2", "x2^2", "x3^2", "x1*x2", "x1*x3", "x2*x3"]"#;

fn ss_fixed_config() -> String {
    format!(
        r#"{{
  "problem": "linear_ss_fixed", "n": 16, "k": 3, "regression": {QUADRATIC}, "utility": "sh",
  "optimizer": {{ "restarts": 4, "init": {{ "kind": "replicated", "q_min": 10, "q_max": 13 }}, "replication_moves": true }},
  "seed": 5
}}"#
    )
}

const POISSON: &str = r#"{
  "problem": "bayes_poisson", "n": 5, "k": 2, "regression": ["1", "x1", "x2"], "utility": "nse",
  "b": 100, "final_b": 400,
  "optimizer": { "grid_size": 5, "passes": 1, "restarts": 2, "comparison_b": 100 },
  "seed": 11
}"#;

fn run_ok(args: &[&str]) -> Output {
    let out = god(args);
    assert!(
        out.status.success(),
        "god {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn sum_of_squares_sh_design_reports_six_pure_error_df() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &ss_fixed_config());
    let out = tmp.path().join("run");
    run_ok(&["optimize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["d"], 6);
    assert_eq!(report["q"], 10);
    assert_eq!(report["p"], 10);
    assert_eq!(report["seed"], 5);
    assert_eq!(report["design"], "design.csv");
    for key in ["objective", "config", "wall_time_secs", "version"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(out.join("trace.csv").exists());
}

#[test]
fn same_config_and_seed_give_identical_design_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", POISSON);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["optimize", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run_ok(&[
        "--threads",
        "1",
        "optimize",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(a.join("design.csv")).unwrap(), fs::read(b.join("design.csv")).unwrap());
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(read_json(&a.join("report.json"))["p"], 3);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", POISSON);
    let a = tmp.path().join("a");
    run_ok(&[
        "optimize",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
        "--seed-override",
        "77",
    ]);
    let report = read_json(&a.join("report.json"));
    assert_eq!(report["seed"], 77);
    let echoed = write_config(tmp.path(), "echo.json", &report["config"].to_string());
    let b = tmp.path().join("b");
    run_ok(&["optimize", "--config", echoed.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("design.csv")).unwrap(), fs::read(b.join("design.csv")).unwrap());
    assert_eq!(read_json(&b.join("report.json"))["objective"], report["objective"]);
}

#[test]
fn evaluate_round_trips_an_optimized_design() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &ss_fixed_config());
    let run = tmp.path().join("run");
    run_ok(&["optimize", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    let best = read_json(&run.join("report.json"))["objective"]["mean"].as_f64().unwrap();

    let with_ref = ss_fixed_config().replacen("\"seed\": 5", &format!("\"seed\": 5, \"references\": {{ \"closed_sh_fixed\": {best} }}"), 1);
    let cfg2 = write_config(tmp.path(), "cfg2.json", &with_ref);
    let eval = tmp.path().join("eval");
    run_ok(&[
        "evaluate",
        "--design",
        run.join("design.csv").to_str().unwrap(),
        "--config",
        cfg2.to_str().unwrap(),
        "--objectives",
        "closed_sh_fixed,closed_d_optimal",
        "--out",
        eval.to_str().unwrap(),
    ]);
    let ev = read_json(&eval.join("evaluation.json"));
    let results = ev["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["objective"], "closed_sh_fixed");
    assert_eq!(results[0]["mean"].as_f64().unwrap(), best);
    assert_eq!(results[0]["efficiency"].as_f64().unwrap(), 1.0);
    assert!(results[1]["efficiency"].is_null());
    assert_eq!(ev["d"], 6);
}

#[test]
fn stochastic_evaluation_agrees_with_the_search_estimate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", POISSON);
    let run = tmp.path().join("run");
    run_ok(&["optimize", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    let objective = read_json(&run.join("report.json"))["objective"].clone();
    let eval = tmp.path().join("eval");
    run_ok(&[
        "evaluate",
        "--design",
        run.join("design.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--objectives",
        "mc_bayes",
        "--out",
        eval.to_str().unwrap(),
    ]);
    let r = &read_json(&eval.join("evaluation.json"))["results"][0];
    let (m1, s1) = (objective["mean"].as_f64().unwrap(), objective["std_error"].as_f64().unwrap());
    let (m2, s2) = (r["mean"].as_f64().unwrap(), r["std_error"].as_f64().unwrap());
    // Independent draws; four pooled standard errors.
    assert!((m1 - m2).abs() <= 4.0 * (s1 * s1 + s2 * s2).sqrt(), "{m1} vs {m2}");
}

#[test]
fn type_error_exits_two_and_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let bad = POISSON.replace("\"passes\": 1", "\"passes\": \"one\"");
    let cfg = write_config(tmp.path(), "cfg.json", &bad);
    let out = god(&["optimize", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("optimizer.passes"), "{stderr}");
}

#[test]
fn incompatible_weight_rule_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let bad = POISSON.replace("\"seed\": 11", "\"seed\": 11, \"weight\": { \"rule\": \"pure_error\" }");
    let cfg = write_config(tmp.path(), "cfg.json", &bad);
    let out = god(&["optimize", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(".weight"));
}

#[test]
fn unknown_field_and_out_of_range_term_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    for (i, bad) in [
        POISSON.replace("\"seed\": 11", "\"seed\": 11, \"sead\": 1"),
        POISSON.replace("\"x2\"]", "\"x3\"]"),
    ]
    .iter()
    .enumerate()
    {
        let cfg = write_config(tmp.path(), &format!("cfg{i}.json"), bad);
        let out = god(&["optimize", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn design_dimension_mismatch_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", POISSON);
    let design = write_config(tmp.path(), "d.csv", "x1,x2,x3\n0,0,0\n1,1,1\n");
    let out = god(&[
        "evaluate",
        "--design",
        design.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--objectives",
        "mc_bayes",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_objective_name_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", POISSON);
    let design = write_config(tmp.path(), "d.csv", "x1,x2\n0,0\n1,1\n-1,1\n1,-1\n0,1\n");
    let out = god(&[
        "evaluate",
        "--design",
        design.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--objectives",
        "mc_bays",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn singular_everywhere_search_exits_three_and_keeps_the_trace() {
    let tmp = TempDir::new().unwrap();
    let body = format!(
        r#"{{ "problem": "linear_ss_fixed", "n": 3, "k": 3, "regression": {QUADRATIC}, "utility": "sh",
             "optimizer": {{ "grid_size": 3, "passes": 1, "restarts": 1 }} }}"#
    );
    let cfg = write_config(tmp.path(), "cfg.json", &body);
    let out_dir = tmp.path().join("run");
    let out = god(&["optimize", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stuck"));
    assert!(out_dir.join("trace.csv").exists());
    assert!(!out_dir.join("design.csv").exists());
}

#[test]
fn table2_without_comparison_design_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let out = god(&["repro", "table2", "--scale", "desk", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--lhd"));
}
