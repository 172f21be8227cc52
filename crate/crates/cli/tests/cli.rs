use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn glb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    fs::write(
        &path,
        r#"{
            "schema_version": 1,
            "environment": {"n_arms": 3, "dim": 2},
            "policies": [
                {"policy": {"kind": "ddrts", "mc_samples": 200}, "grid": [0.01, 0.1]},
                {"policy": {"kind": "glm_ucb"}, "grid": [0.1]},
                {"policy": {"kind": "ts_glm"}, "grid": [0.1]},
                {"policy": {"kind": "uniform"}}
            ],
            "horizon": 50,
            "repetitions": 1,
            "seed": 4
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_parseable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = glb(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let policies = summary["policies"].as_array().unwrap();
    assert_eq!(policies.len(), 4);
    assert_eq!(policies[0]["policy"], "ddrts");
    assert!(policies[0]["final_stats"]["mean"].as_f64().unwrap() >= 0.0);

    let csv = fs::read_to_string(out.join("runs/ddrts_seed4.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,regret,cum_regret,arm,resamples,elapsed_ms"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 50);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (k + 1).to_string());
        let arm: usize = row[3].parse().unwrap();
        assert!((1..=3).contains(&arm));
    }
}

#[test]
fn simulate_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = glb(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for name in ["ddrts_seed4.csv", "glm_ucb_seed4.csv", "ts_glm_seed4.csv", "uniform_seed4.csv"] {
        assert_eq!(fs::read(a.join("runs").join(name)).unwrap(), fs::read(b.join("runs").join(name)).unwrap());
    }
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
}

#[test]
fn simulate_seed_flag_changes_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("s9");
    let o = glb(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("runs/uniform_seed9.csv").exists());
}

#[test]
fn simulate_dry_run_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("never");
    let o = glb(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(resolved["horizon"], 50);
    assert_eq!(resolved["tuning_repetitions"], 1);
    assert!(!out.exists());
}

#[test]
fn simulate_config_errors_exit_2() {
    let o = glb(&["simulate", "--config", "/definitely/missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.json"));

    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.json");
    fs::write(
        &typo,
        r#"{"schema_version": 1, "environment": {"n_arms": 3, "dim": 2},
            "policies": [{"policy": {"kind": "ts_glm", "vee": 0.1}, "grid": [0.1]}],
            "horizon": 10, "repetitions": 1}"#,
    )
    .unwrap();
    let o = glb(&["simulate", "--config", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = glb(&["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_log(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("log.jsonl");
    let o = glb(&["gen-log", "--arms", "4", "--dim", "3", "--events", "3000", "--seed", "2", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

fn replay_json(args: &[&str]) -> serde_json::Value {
    let o = glb(args);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn replay_logged_policy_matches_every_event() {
    let dir = tempfile::tempdir().unwrap();
    let log = write_log(dir.path());
    let r = replay_json(&["replay", "--log", log.to_str().unwrap(), "--policy", "logged"]);
    assert_eq!(r["matched"], 3000);
    assert_eq!(r["ctr"], r["log_click_rate"]);
}

#[test]
fn replay_is_deterministic_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let log = write_log(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        replay_json(&[
            "replay", "--log", log.to_str().unwrap(), "--policy", "ts-glm", "--exploration", "0.1",
            "--seed", "5", "--out", out.to_str().unwrap(),
        ]);
        fs::read(out.join("replay.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn replay_empty_log_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "\n\n").unwrap();
    let o = glb(&["replay", "--log", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no events"));
}

#[test]
fn replay_cites_malformed_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = write_log(dir.path());
    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text.lines().take(20).collect();
    lines[16] = "{\"t\": 17, \"contexts\": [[0.1, 0.2, 0.3]], \"arm\": ";
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = glb(&["replay", "--log", bad.to_str().unwrap(), "--policy", "uniform"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 17"), "{}", stderr(&o));
}

#[test]
fn diagnose_uniform_ball_near_one_over_d_plus_two() {
    let r = replay_json(&["diagnose", "--sampler", "uniform-ball", "--dim", "5", "--samples", "100000", "--seed", "1"]);
    let v = r["min_eigenvalue"].as_f64().unwrap();
    assert!((v - 1.0 / 7.0).abs() < 0.1 / 7.0, "{v}");
    let again = replay_json(&["diagnose", "--sampler", "uniform-ball", "--dim", "5", "--samples", "100000", "--seed", "1"]);
    assert_eq!(r, again);
}

#[test]
fn diagnose_zero_samples_is_usage_error() {
    let o = glb(&["diagnose", "--samples", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_log_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let o = glb(&["gen-log", "--arms", "3", "--dim", "2", "--events", "100", "--seed", "8", "--out", p.to_str().unwrap()]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 100);
}
