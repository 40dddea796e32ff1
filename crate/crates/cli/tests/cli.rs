use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toolwatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toolwatch"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = toolwatch(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// synth -> encode -> train, returning the SAE paths.
fn pipeline(dir: &Path) -> Vec<String> {
    ok(dir, &["--seed", "7", "synth", "--rows", "400"]);
    let sae: Vec<String> = [3, 7, 11, 15, 19, 23]
        .iter()
        .map(|l| format!("synth/sae/layer_{l:03}.twsae"))
        .collect();
    ok(dir, &["encode", "--store", "synth/store.twa", "--sae", &sae.join(",")]);
    ok(
        dir,
        &["--seed", "7", "train", "--kind", "tool-need", "--rows", "synth/rows.jsonl", "--features", "features.jsonl", "--n-select", "32"],
    );
    sae
}

fn accuracy(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.starts_with("accuracy")).expect("accuracy line");
    let pct = line.split_whitespace().nth(1).unwrap().trim_end_matches('%');
    pct.parse::<f64>().unwrap() / 100.0
}

#[test]
fn planted_pipeline_evaluates_near_perfect() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let out = ok(
        dir.path(),
        &["--seed", "7", "eval", "--model", "model.json", "--rows", "synth/rows.jsonl", "--features", "features.jsonl"],
    );
    assert!(accuracy(&out) >= 0.99, "{out}");
    let model: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(model["provenance"]["seed"], 7);
}

#[test]
fn predictions_file_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture("tool_need_predictions.jsonl");
    let out = ok(dir.path(), &["eval", "--predictions", path.to_str().unwrap()]);
    assert!(out.contains("accuracy 75.3% (1501/1993)"), "{out}");
    assert!(out.contains("macro-F1 0.753"), "{out}");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["synth/store.twa", "synth/rows.jsonl", "features.jsonl", "model.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn monitor_with_missed_calls_exits_with_alert_code() {
    let dir = tempfile::tempdir().unwrap();
    let sae = pipeline(dir.path());
    let rows = std::fs::read_to_string(dir.path().join("synth/rows.jsonl")).unwrap();
    let actions: String = rows
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .map(|r| {
            serde_json::json!({
                "trajectory_id": r["trajectory_id"],
                "step_index": r["step_index"],
                "called": false,
            })
            .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(dir.path().join("actions.jsonl"), actions).unwrap();
    let out = toolwatch(
        dir.path(),
        &[
            "monitor",
            "--rows",
            "synth/rows.jsonl",
            "--store",
            "synth/store.twa",
            "--sae",
            &sae.join(","),
            "--model",
            "model.json",
            "--actions",
            "actions.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report = ok(dir.path(), &["report", "--events", "events.jsonl"]);
    assert!(!report.is_empty());
}

#[test]
fn empty_events_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("events.jsonl"), "").unwrap();
    let out = toolwatch(dir.path(), &["report", "--events", "events.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!toolwatch(dir.path(), &["frobnicate"]).status.success());
}
