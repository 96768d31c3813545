use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn memsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memsteer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn small_config() -> Value {
    json!({ "n_episodes": 6, "seeds": [0, 1], "guidance_mode": { "kind": "dynamic_t0" } })
}

#[test]
fn deploy_writes_the_three_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &small_config());
    let out = dir.path().join("out");
    let o = memsteer(&["deploy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let episodes = fs::read_to_string(out.join("episodes.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 12);
    for line in episodes.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["true_success"].is_boolean() && v["memory_size_after"].is_u64());
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().count() >= 3);
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        ("malformed.json", "{ not json".to_string()),
        ("unknown.json", json!({ "n_episodes": 3, "episodes": 4 }).to_string()),
        ("zero.json", json!({ "n_episodes": 0 }).to_string()),
        ("task.json", json!({ "task_id": "T99" }).to_string()),
        ("mode.json", json!({ "guidance_mode": { "kind": "fixed_t0", "value": 1.5 } }).to_string()),
    ];
    for (name, text) in cases {
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        let o = memsteer(&["deploy", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = memsteer(&["deploy", "--config", "/nonexistent/cfg.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exceeding_the_abort_budget_exits_with_three() {
    // blank features and a noiseless key make every key degenerate, so
    // every episode aborts
    let task_json = memsteer(&["show-task", "T2"]);
    assert_eq!(task_json.status.code(), Some(0));
    let mut task: Value = serde_json::from_slice(&task_json.stdout).unwrap();
    task["features"] = json!({ "bias": 0.0, "pos": 0.0, "rot": 0.0, "flag": 0.0 });

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("out");
    let mut v = json!({ "n_episodes": 3, "seeds": [0], "task": task, "key": { "noise_scale": 0.0 } });
    v["abort_budget"] = json!(1);
    write_json(&cfg, &v);
    let o = memsteer(&["deploy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let episodes = fs::read_to_string(out.join("episodes.jsonl")).unwrap();
    assert!(episodes.lines().all(|l| l.contains("\"outcome\":\"aborted\"")));

    // the same run within budget succeeds
    v["abort_budget"] = json!(3);
    write_json(&cfg, &v);
    let o = memsteer(&["deploy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn ablate_writes_one_summary_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = dir.path().join("matrix.json");
    write_json(
        &matrix,
        &json!({
            "base": { "n_episodes": 4, "seeds": [0] },
            "axes": {
                "guidance_mode": [{ "kind": "off" }, { "kind": "fixed_t0", "value": 0.5 }],
                "capacity": [100, null]
            }
        }),
    );
    let out = dir.path().join("out");
    let o = memsteer(&["ablate", "--matrix", matrix.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    let episodes = fs::read_to_string(out.join("episodes.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 16);
}

#[test]
fn inspect_memory_reports_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = memsteer::harness::DeploymentConfig {
        n_episodes: 8,
        seeds: vec![0],
        ..Default::default()
    };
    let (_, memory) = memsteer::harness::run_seed_keep_memory(&cfg, 0).unwrap();
    let path = dir.path().join("mem.jsonl");
    memsteer::memory::save_snapshot(&memory, &path).unwrap();
    let o = memsteer(&["inspect-memory", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains(&format!("{}", memory.len())));

    fs::write(&path, "{\"version\":1}\n").unwrap();
    assert_ne!(memsteer(&["inspect-memory", path.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn bench_prints_a_timing_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &json!({ "memory": { "capacity": 40 }, "seeds": [0] }));
    let o = memsteer(&["bench", "--config", cfg.to_str().unwrap(), "--decisions", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["memory_entries"], 40);
    assert!(v["full_ratio"].as_f64().unwrap() > 0.0);
}
