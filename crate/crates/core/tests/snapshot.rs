use std::fs;

use memsteer::action_space::GripperMode;
use memsteer::harness::{run_seed_keep_memory, DeploymentConfig, GuidanceMode};
use memsteer::memory::{inspect_snapshot, load_snapshot, save_snapshot};
use memsteer::Error;

fn deployed_memory() -> memsteer::memory::SuccessMemory {
    let cfg = DeploymentConfig {
        n_episodes: 12,
        seeds: vec![3],
        guidance_mode: GuidanceMode::DynamicT0,
        ..Default::default()
    };
    let (run, memory) = run_seed_keep_memory(&cfg, 3).unwrap();
    assert!(run.records.iter().any(|r| r.verdict), "no episode succeeded");
    assert!(!memory.is_empty());
    memory
}

#[test]
fn deployment_memory_round_trips_losslessly() {
    let memory = deployed_memory();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.jsonl");
    save_snapshot(&memory, &path).unwrap();
    let back = load_snapshot(&path).unwrap();
    assert_eq!(back.len(), memory.len());
    assert!(back.entries().eq(memory.entries()));
    assert_eq!(back.key_rows(), memory.key_rows());

    // saving the reloaded memory reproduces the file byte for byte
    let again = dir.path().join("again.jsonl");
    save_snapshot(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let report = inspect_snapshot(&path).unwrap();
    assert_eq!(report.entries, memory.len());
    assert_eq!(report.per_task.get("T2"), Some(&memory.len()));
    assert!(report.violations.is_empty(), "{:?}", report.violations);
}

#[test]
fn damaged_snapshots_are_rejected() {
    let memory = deployed_memory();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.jsonl");
    save_snapshot(&memory, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();

    let cut = dir.path().join("cut.jsonl");
    fs::write(&cut, &text[..text.len() - 7]).unwrap();
    assert!(load_snapshot(&cut).is_err());

    let garbled = dir.path().join("garbled.jsonl");
    fs::write(&garbled, text.replacen("\"key\":[", "\"key\":[oops,", 1)).unwrap();
    assert!(load_snapshot(&garbled).is_err());
}

#[test]
fn shape_mismatch_is_an_incompatibility() {
    let memory = deployed_memory();
    let err = memory
        .check_compatible(memory.dim() + 1, memory.horizon(), GripperMode::Continuous)
        .unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    memory
        .check_compatible(memory.dim(), memory.horizon(), memory.gripper_mode())
        .unwrap();
}
