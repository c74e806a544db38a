//! End-to-end checks of the command-line interface, driving the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mixlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixlab"))
}

fn run(args: &[&str]) -> Output {
    mixlab().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    trace: PathBuf,
    truth: PathBuf,
}

/// A small simulated trace with its ground truth, shared by attack tests.
fn simulated_workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let truth = dir.path().join("truth.json");
    let out = run(&[
        "simulate",
        "--n",
        "300",
        "--b",
        "10",
        "--m",
        "4",
        "--rounds",
        "4000",
        "--seed",
        "11",
        "--target-rate",
        "0.2",
        "--out",
        &path_str(&trace),
        "--truth",
        &path_str(&truth),
    ]);
    assert!(out.status.success(), "simulate failed: {}", stderr(&out));
    Workspace {
        _dir: dir,
        trace,
        truth,
    }
}

#[test]
fn simulate_writes_trace_and_truth() {
    let ws = simulated_workspace();
    let text = std::fs::read_to_string(&ws.trace).unwrap();
    assert_eq!(text.lines().count(), 4000);
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("{\"round\":1,\"senders\":["));
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ws.truth).unwrap()).unwrap();
    assert_eq!(truth["n_users"], 300);
    assert_eq!(truth["partners"].as_array().unwrap().len(), 4);
}

#[test]
fn simulate_rejects_zero_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--n",
        "10",
        "--b",
        "2",
        "--m",
        "2",
        "--rounds",
        "0",
        "--out",
        &path_str(&dir.path().join("t.jsonl")),
    ]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("--rounds"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for path in [&a, &b] {
        let out = run(&[
            "simulate",
            "--n",
            "50",
            "--b",
            "5",
            "--m",
            "3",
            "--rounds",
            "200",
            "--seed",
            "77",
            "--out",
            &path_str(path),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn attack_reports_ranking_and_success() {
    let ws = simulated_workspace();
    let out = run(&[
        "attack",
        "--trace",
        &path_str(&ws.trace),
        "--attack",
        "improved",
        "--truth",
        &path_str(&ws.truth),
    ]);
    assert!(out.status.success(), "attack failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("attack: improved"));
    assert!(text.contains("top-4 ranked partners:"));
    assert!(text.contains("success: true"), "output: {text}");
    assert!(text.contains("first success at observation"));

    // Same invocation, byte-identical report.
    let again = run(&[
        "attack",
        "--trace",
        &path_str(&ws.trace),
        "--attack",
        "improved",
        "--truth",
        &path_str(&ws.truth),
    ]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn attack_needs_target_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    std::fs::write(
        &trace,
        "{\"round\":1,\"senders\":[1,2],\"receivers\":[3,4]}\n{\"round\":2,\"senders\":[2,3],\"receivers\":[4,4]}\n",
    )
    .unwrap();
    let out = run(&[
        "attack",
        "--trace",
        &path_str(&trace),
        "--target",
        "0",
        "--attack",
        "standard",
        "--n",
        "5",
        "--b",
        "2",
        "--m",
        "2",
    ]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("no target rounds"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn attack_rejects_unknown_flags_and_bad_values() {
    let out = run(&["attack", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--no-such-flag"));

    let out = run(&["simulate", "--n", "ten"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--n"), "stderr: {}", stderr(&out));
}

#[test]
fn sgmix_log_feeds_the_attack() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let truth = dir.path().join("truth.json");
    let out = run(&[
        "sgmix",
        "--lambda",
        "5",
        "--mu",
        "4",
        "--horizon",
        "14000",
        "--n",
        "100",
        "--m",
        "4",
        "--seed",
        "5",
        "--out",
        &path_str(&log),
        "--truth",
        &path_str(&truth),
    ]);
    assert!(out.status.success(), "sgmix failed: {}", stderr(&out));
    assert!(stdout(&out).contains("messages over horizon"));

    let out = run(&[
        "attack",
        "--event-log",
        &path_str(&log),
        "--horizon",
        "14000",
        "--attack",
        "improved",
        "--truth",
        &path_str(&truth),
    ]);
    assert!(out.status.success(), "attack failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("virtual rounds"), "output: {text}");
    assert!(text.contains("success: true"), "output: {text}");
}

#[test]
fn event_log_attack_requires_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    std::fs::write(&log, "").unwrap();
    let out = run(&[
        "attack",
        "--event-log",
        &path_str(&log),
        "--attack",
        "standard",
        "--target",
        "0",
        "--n",
        "5",
        "--m",
        "2",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--horizon"));
}

#[test]
fn sweep_runs_grid_and_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        r#"
sweep_parameter = "b"
sweep_values = [3, 5]
trials_per_config = 5
attacks = ["standard", "improved"]

[base]
n_users = 80
batch_size = 5
n_partners = 3
target_rate = 0.4
obs_limit = 300
"#,
    )
    .unwrap();
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let summary = dir.path().join("summary.csv");
    for csv in [&csv_a, &csv_b] {
        let out = run(&[
            "sweep",
            "--grid",
            &path_str(&grid),
            "--master-seed",
            "9",
            "--out",
            &path_str(csv),
            "--summary",
            &path_str(&summary),
            "--threads",
            "2",
        ]);
        assert!(out.status.success(), "sweep failed: {}", stderr(&out));
    }
    let a = std::fs::read_to_string(&csv_a).unwrap();
    assert_eq!(a, std::fs::read_to_string(&csv_b).unwrap());
    assert!(
        a.starts_with("config_id,N,b,m,attack,defense,trial,seed,observations_used,succeeded\n")
    );
    assert_eq!(a.lines().count(), 1 + 2 * 2 * 5);
    let s = std::fs::read_to_string(&summary).unwrap();
    assert!(
        s.starts_with("config_id,N,b,m,attack,defense,trials,success_rate,median_obs,mean_obs\n")
    );
    assert_eq!(s.lines().count(), 1 + 4);
}

#[test]
fn sweep_rejects_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        r#"
sweep_parameter = "b"
sweep_values = [5, 3]

[base]
n_users = 80
batch_size = 5
n_partners = 3
"#,
    )
    .unwrap();
    let out = run(&[
        "sweep",
        "--grid",
        &path_str(&grid),
        "--out",
        &path_str(&dir.path().join("out.csv")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("strictly increasing"));
}

#[test]
fn help_lists_flags_with_defaults() {
    for (cmd, flag, default) in [
        ("attack", "--obs-limit", "5000"),
        ("attack", "--success-fraction", "0.8"),
        ("attack", "--k", "3"),
        ("sgmix", "--k", "3"),
        ("simulate", "--seed", "0"),
        ("sweep", "--master-seed", "0"),
    ] {
        let out = run(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = stdout(&out);
        assert!(text.contains(flag), "{cmd} --help misses {flag}");
        assert!(
            text.contains(default),
            "{cmd} --help misses default {default}"
        );
    }
}
