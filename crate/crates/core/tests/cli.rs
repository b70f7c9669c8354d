use std::fs;
use std::path::Path;

use bilmforge::cli::dispatch;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("bilmforge").chain(args.iter().copied()))
}

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    assert_eq!(run(&["nope"]), 1);
    assert_eq!(run(&["evaluate", "--gold", "a.conll", "--strict", "maybe"]), 1);
    // missing input file is a runtime failure
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.conll");
    let m = missing.to_str().unwrap();
    assert_eq!(run(&["evaluate", "--gold", m, "--pred", m]), 2);
    // malformed manifest is a validation failure
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "source,language\nx,en\n").unwrap();
    let out = dir.path().join("plan.json");
    assert_eq!(run(&["balance", "--manifest", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
}

#[test]
fn balance_writes_plan_and_run_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan.json");
    let manifest = fixtures().join("table1_manifest.csv");
    let code = run(&[
        "balance", "--manifest", manifest.to_str().unwrap(), "--alpha", "0.3", "--exclude", "clinical", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let q_es = plan["languages"]["es"]["q"].as_f64().unwrap();
    assert!((q_es - 0.277).abs() < 1e-3, "{q_es}");
    let run_json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["command"], "balance");
    assert_eq!(run_json["config"]["alpha"], 0.3);
    assert_eq!(run_json["config"]["exclude"], serde_json::json!(["clinical"]));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("plan.json");
    let manifest = fixtures().join("table1_manifest.csv");
    fs::write(&cfg, serde_json::json!({ "manifest": manifest, "alpha": 1.0, "out": out }).to_string()).unwrap();
    assert_eq!(run(&["balance", "--config", cfg.to_str().unwrap(), "--alpha", "0.5"]), 0);
    let run_json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["config"]["alpha"], 0.5);

    fs::write(&cfg, r#"{"alpah": 0.3}"#).unwrap();
    assert_eq!(run(&["balance", "--config", cfg.to_str().unwrap()]), 1);
}

#[test]
fn evaluate_identical_files_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let gold = fixtures().join("ner/es/dev.conll");
    let out = dir.path().join("report.json");
    let g = gold.to_str().unwrap();
    assert_eq!(run(&["evaluate", "--gold", g, "--pred", g, "--out", out.to_str().unwrap()]), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["micro"]["f1"], 1.0);
    assert_eq!(report["macro"]["f1"], 1.0);
}
