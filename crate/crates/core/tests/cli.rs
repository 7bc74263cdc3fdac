mod common;

use std::process::Command;

use common::config_path;

fn leosplit() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_leosplit"));
    cmd.env_remove("LEOSPLIT_LOG");
    cmd
}

#[test]
fn zero_rounds_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let status = leosplit()
        .args(["run", "--config"])
        .arg(config_path("desk.cfg"))
        .args(["--rounds", "0", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("round,sat_id,loss_x"));
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert!(stdout.starts_with("rounds=0 final_acc=n/a"));
}

#[test]
fn csv_goes_to_stdout_and_repeats_per_seed() {
    let run = |seed: &str| {
        let out = leosplit()
            .args(["run", "--config"])
            .arg(config_path("desk.cfg"))
            .args(["--rounds", "1", "--mode", "no-am", "--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("rounds=1"));
        out.stdout
    };
    let a = run("4");
    assert_eq!(a, run("4"));
    assert_ne!(a, run("5"));
    // Header plus five satellites and the ground-station row.
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 7);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "satellites = 3\nwarp_speed = 9\n").unwrap();
    let out = leosplit()
        .args(["run", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":2:"), "{err}");

    let out = leosplit()
        .args(["run", "--config"])
        .arg(config_path("desk.cfg"))
        .args(["--mode", "warp"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = leosplit()
        .args(["run", "--config", "/nonexistent/x.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = leosplit().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[cfg(target_os = "linux")]
#[test]
fn runtime_errors_exit_with_two() {
    // The output file opens but every write fails.
    let out = leosplit()
        .args(["run", "--config"])
        .arg(config_path("desk.cfg"))
        .args(["--rounds", "1", "--mode", "no-am", "--out", "/dev/full"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_exits_cleanly() {
    let out = leosplit().arg("--help").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("run"));
}
