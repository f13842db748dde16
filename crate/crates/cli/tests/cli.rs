use std::fs;
use std::process::Command;

fn rama() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rama"))
}

#[test]
fn run_then_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scenario.toml");
    let trace = dir.path().join("trace.jsonl");
    fs::write(
        &config,
        r#"
n_switches = 2
seed = 5

[[faults]]
target = "master"
point = "F3"
trigger = "last"
"#,
    )
    .unwrap();
    let out = rama().args(["run", "--config"]).arg(&config).arg("--trace").arg(&trace).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS total_order"));

    let out = rama().args(["check", "--trace"]).arg(&trace).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn check_fails_on_mutated_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bug.toml");
    let trace = dir.path().join("bug.jsonl");
    fs::write(&config, "seed = 1\nbug = \"skip_marker\"\n").unwrap();
    let out = rama().args(["run", "--config"]).arg(&config).arg("--trace").arg(&trace).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = rama().args(["check", "--trace"]).arg(&trace).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL commands_exactly_once"));
}

#[test]
fn bench_and_failover_report() {
    let out = rama().args(["bench", "--switches", "2", "--batch-size", "10", "--batch-time", "5", "--mode", "commands", "--measure-ms", "50"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("responses/s"));

    let out = rama().args(["failover", "--session-timeout", "100"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("median gap"));
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "n_controllers = 3\nf = 1\n").unwrap();
    let out = rama().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(!out.status.success());
}
