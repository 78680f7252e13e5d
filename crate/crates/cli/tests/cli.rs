use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_uctnas");

fn uctnas(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = uctnas(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[derive(Debug, serde::Deserialize)]
struct Row {
    architecture: String,
    reward: f64,
    cache_hit: bool,
}

fn rows(dir: &Path) -> Vec<Row> {
    csv::Reader::from_path(dir.join("rollouts.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

fn serve_command(extra: &str) -> String {
    format!("external:{BIN} serve-surrogate {extra}")
}

#[test]
fn identical_runs_write_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["run", "--policy", "random", "--rollouts", "10", "--seed", "7", "--out", dir.to_str().unwrap()]);
    }
    let first = std::fs::read(a.join("rollouts.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.join("rollouts.csv")).unwrap());
    assert_eq!(rows(&a).len(), 10);
}

#[test]
fn zero_rollouts_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = uctnas(&["run", "--rollouts", "0", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_budget_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = uctnas(&["run", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn artifacts_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("crp");
    ok(&["run", "--policy", "crp", "--rollouts", "200", "--seed", "1", "--dump-crp", "--out", dir.to_str().unwrap()]);
    let rows = rows(&dir);
    assert_eq!(rows.len(), 200);
    let best = json(&dir.join("best.json"));
    let best_reward = best["reward"].as_f64().unwrap();
    assert!(rows.iter().all(|r| r.reward <= best_reward));
    assert!(rows.iter().any(|r| r.architecture == best["architecture"].as_str().unwrap()));

    let topk = json(&dir.join("topk.json"));
    let models = topk["models"].as_array().unwrap();
    assert_eq!(models.len(), 5);
    assert_eq!(models[0]["reward"].as_f64().unwrap(), best_reward);

    let thresholds = std::fs::read_to_string(dir.join("threshold.csv")).unwrap();
    assert_eq!(thresholds.lines().count(), 102);

    let meta = json(&dir.join("run_meta.json"));
    assert_eq!(meta["config"]["policy"], "crp");
    assert_eq!(meta["config"]["seed"], 1);
    assert!(meta["versions"]["surrogate_formula"].is_u64());

    let dump = std::fs::read_to_string(dir.join("crp_examples.jsonl")).unwrap();
    let first: Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    assert!(first["features"].is_array() && first["label"].is_f64());
}

#[test]
fn dump_requires_crp() {
    let tmp = tempfile::tempdir().unwrap();
    let out = uctnas(&["run", "--policy", "uct", "--rollouts", "5", "--dump-crp", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn rerun_from_meta_reproduces_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--policy", "rave4nn", "--rollouts", "40", "--seed", "3", "--c", "0.8", "--out", a.to_str().unwrap()]);
    let meta = a.join("run_meta.json");
    ok(&["run", "--from-meta", meta.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(
        std::fs::read(a.join("rollouts.csv")).unwrap(),
        std::fs::read(b.join("rollouts.csv")).unwrap()
    );
}

#[test]
fn external_evaluator_matches_in_process_surrogate() {
    let tmp = tempfile::tempdir().unwrap();
    let (local, remote) = (tmp.path().join("local"), tmp.path().join("remote"));
    let common = ["run", "--policy", "uct", "--rollouts", "30", "--seed", "4"];
    ok(&[&common[..], &["--out", local.to_str().unwrap()]].concat());
    let cmd = serve_command("--seed 4");
    ok(&[&common[..], &["--evaluator", &cmd, "--out", remote.to_str().unwrap()]].concat());
    let (l, r) = (rows(&local), rows(&remote));
    assert_eq!(l.len(), r.len());
    for (a, b) in l.iter().zip(&r) {
        assert_eq!(a.architecture, b.architecture);
        assert_eq!(a.cache_hit, b.cache_hit);
        assert!((a.reward - b.reward).abs() < 1e-9);
    }
}

#[test]
fn recoverable_faults_cost_one_rollout() {
    for fault in ["garbage:2", "out-of-range:2", "wrong-id:2"] {
        let tmp = tempfile::tempdir().unwrap();
        let cmd = serve_command(&format!("--fault {fault}"));
        ok(&["run", "--policy", "random", "--rollouts", "8", "--evaluator", &cmd, "--out", tmp.path().to_str().unwrap()]);
        let meta = json(&tmp.path().join("run_meta.json"));
        assert_eq!(meta["rollouts_failed"], 1, "{fault}");
        assert_eq!(rows(tmp.path()).len(), 7, "{fault}");
    }
}

#[test]
fn stalled_evaluation_times_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cmd = serve_command("--fault stall:2:1500");
    ok(&[
        "run", "--policy", "random", "--rollouts", "5", "--evaluator", &cmd, "--eval-timeout", "1.0",
        "--out", tmp.path().to_str().unwrap(),
    ]);
    let meta = json(&tmp.path().join("run_meta.json"));
    assert_eq!(meta["rollouts_failed"], 1);
    let error = meta["failures"][0]["error"].as_str().unwrap();
    assert!(error.contains("no response to request 2"), "{error}");
}

#[test]
fn dead_evaluator_aborts_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cmd = serve_command("--fault exit:3");
    let out = uctnas(&["run", "--policy", "random", "--rollouts", "40", "--evaluator", &cmd, "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("aborted"));
    let meta = json(&tmp.path().join("run_meta.json"));
    assert_eq!(meta["rollouts_completed"], 2);
    assert_eq!(meta["rollouts_failed"], 10);
}

#[test]
fn missing_evaluator_command_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = uctnas(&[
        "run", "--rollouts", "3", "--evaluator", "external:/nonexistent/evaluator", "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn tabular_evaluator_reads_table() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("table.csv");
    std::fs::write(&table, "architecture,accuracy\nSM,0.1\n\"C(3,64)-SM\",0.4\n").unwrap();
    let spec = format!("tabular:{}", table.display());
    let out_dir = tmp.path().join("out");
    ok(&[
        "run", "--rollouts", "20", "--evaluator", &spec, "--tabular-fallback", "--out",
        out_dir.to_str().unwrap(),
    ]);
    for r in rows(&out_dir) {
        match r.architecture.as_str() {
            "SM" => assert_eq!(r.reward, 0.1),
            "C(3,64)-SM" => assert_eq!(r.reward, 0.4),
            _ => {}
        }
    }
    let strict = uctnas(&["run", "--rollouts", "20", "--evaluator", &spec, "--out", out_dir.to_str().unwrap()]);
    assert!(!strict.status.success(), "missing architectures abort without a fallback");
}

#[test]
fn compare_summarizes_policies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&[
        "compare", "--policies", "random,crp", "--seeds", "0-4", "--rollouts", "30", "--out",
        tmp.path().to_str().unwrap(),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("random") && table.contains("crp"), "{table}");
    for f in ["curves.csv", "summary.csv", "cells.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let cells = json(&tmp.path().join("cells.json"));
    assert_eq!(cells.as_array().unwrap().len(), 10);
}

#[test]
fn compare_rejects_bad_seed_lists() {
    let tmp = tempfile::tempdir().unwrap();
    for seeds in ["", "5-1", "0,1"] {
        let out = uctnas(&["compare", "--seeds", seeds, "--rollouts", "5", "--out", tmp.path().to_str().unwrap()]);
        assert!(!out.status.success(), "seeds `{seeds}`");
    }
}
