use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn verisql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_verisql"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixtures(dir: &Path) {
    let out = verisql(&["make-fixtures", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

fn data_args(dir: &Path) -> Vec<String> {
    vec![
        "--db-root".into(),
        dir.join("databases").display().to_string(),
        "--split".into(),
        dir.join("dev.json").display().to_string(),
    ]
}

fn run(dir: &Path, extra: &[&str]) -> Output {
    let mut args = data_args(dir);
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    verisql(&refs)
}

fn first_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().next().expect("some output")).expect("json line")
}

#[test]
fn gold_traces_evaluate_to_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let traces = dir.path().join("gold_traces.json");
    let out = run(dir.path(), &["evaluate", "--traces", traces.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = first_json(&out);
    assert_eq!(v["report"]["accuracy_percent"], "100.00");
    assert_eq!(v["provenance"]["command"], "evaluate");
}

#[test]
fn misaligned_traces_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let traces = dir.path().join("short.json");
    std::fs::write(&traces, r#"["SELECT 1"]"#).unwrap();
    let out = run(dir.path(), &["evaluate", "--traces", traces.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn broken_gold_query_exits_with_data_warning() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let split = dir.path().join("dev.json");
    let mut dps: Vec<Value> = serde_json::from_slice(&std::fs::read(&split).unwrap()).unwrap();
    dps[3]["SQL"] = Value::from("SELECT no_such_column FROM movies");
    std::fs::write(&split, serde_json::to_vec(&dps).unwrap()).unwrap();

    let out = run(dir.path(), &["validate-data"]);
    assert_eq!(out.status.code(), Some(1));
    let v = first_json(&out);
    assert_eq!(v["gold_failures"][0]["question_id"], 3);

    let traces = dir.path().join("gold_traces.json");
    let out = run(dir.path(), &["evaluate", "--traces", traces.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(first_json(&out)["report"]["n_gold_failures"], 1);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let config = dir.path().join("run.json");
    let body = serde_json::json!({
        "db_root": dir.path().join("databases"),
        "split_path": dir.path().join("dev.json"),
        "sandbox": {"timeout_ms": 5000},
    });
    std::fs::write(&config, body.to_string()).unwrap();
    let traces = dir.path().join("gold_traces.json");
    let cfg = config.to_str().unwrap();
    let t = traces.to_str().unwrap();

    let from_file = verisql(&["--config", cfg, "evaluate", "--traces", t]);
    assert_eq!(from_file.status.code(), Some(0));
    let overridden = verisql(&["--config", cfg, "--timeout-ms", "7000", "evaluate", "--traces", t]);
    assert_eq!(overridden.status.code(), Some(0));
    let same = verisql(&["--config", cfg, "--timeout-ms", "5000", "evaluate", "--traces", t]);

    let digest = |o: &Output| first_json(o)["provenance"]["config_digest"].clone();
    assert_ne!(digest(&from_file), digest(&overridden));
    assert_eq!(digest(&from_file), digest(&same));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"timeout": 5}"#).unwrap();
    let out = verisql(&["--config", config.to_str().unwrap(), "validate-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_database_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let out = run(dir.path(), &["score", "--db-id", "nope", "--gold-sql", "SELECT 1", "--sql", "SELECT 1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_backend_exits_with_backend_failure() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let out = run(
        dir.path(),
        &["pipeline", "--backend", "http://127.0.0.1:9", "--max-retries", "0", "--request-timeout-ms", "500"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stub_pipeline_matches_scripted_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = verisql(&["make-fixtures", "--out", dir.path().to_str().unwrap(), "--wrong-majority", "4,9"]);
    assert_eq!(out.status.code(), Some(0));
    let expected = first_json(&out)["expected_pipeline_accuracy"].clone();
    assert_eq!(expected, "92.00");
    let stub = dir.path().join("stub.json");
    let out = run(dir.path(), &["pipeline", "--backend", stub.to_str().unwrap(), "--csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().last().unwrap().contains("92.00"), "{text}");
}
