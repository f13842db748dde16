use rama::apps::AppKind;
use rama::ctrl::FaultPoint;
use rama::harness::{run_scenario, FaultInjection, FaultSpot, FaultTarget, NamedTrigger, ScenarioConfig, Transport, Trigger};
use rama::trace::{read_jsonl, to_jsonl, TraceKind};

fn hooked(point: FaultPoint) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.faults.push(FaultInjection::at(point, Trigger::Named(NamedTrigger::Mid)));
    cfg
}

#[test]
fn socket_runs_survive_each_fault_point() {
    for point in [FaultPoint::F1, FaultPoint::F2, FaultPoint::F3] {
        let cfg = ScenarioConfig { transport: Transport::Sockets, ..hooked(point) };
        let out = run_scenario(&cfg).unwrap();
        assert!(out.passed(), "{point:?}: {:?}\n{}", out.error, out.report);
        assert!(out.trace.iter().any(|r| r.kind == TraceKind::Crashed));
    }
}

#[test]
fn switch_crash_mid_run() {
    let mut cfg = ScenarioConfig { seed: Some(4), ..Default::default() };
    cfg.faults.push(FaultInjection { target: FaultTarget::Switch(2), point: FaultSpot::AtTime, trigger: None, at_ms: Some(60) });
    let out = run_scenario(&cfg).unwrap();
    assert!(out.passed(), "{}", out.report);
    assert!(out.trace.iter().any(|r| r.kind == TraceKind::SwitchCrashed));
    // the second switch stopped early, so fewer than 200 events were logged
    assert!(out.report.stats.events_logged < 200);
}

#[test]
fn master_killed_at_time_with_learning_app() {
    let mut cfg = ScenarioConfig { seed: Some(9), app: AppKind::Learning, ..Default::default() };
    cfg.faults.push(FaultInjection { target: FaultTarget::Master, point: FaultSpot::AtTime, trigger: None, at_ms: Some(50) });
    let out = run_scenario(&cfg).unwrap();
    assert!(out.passed(), "{}", out.report);
}

#[test]
fn master_and_switch_faults_together() {
    let mut cfg = hooked(FaultPoint::F2);
    cfg.faults.push(FaultInjection { target: FaultTarget::Switch(1), point: FaultSpot::AtTime, trigger: None, at_ms: Some(90) });
    let out = run_scenario(&cfg).unwrap();
    assert!(out.passed(), "{}", out.report);
}

#[test]
fn trace_survives_jsonl_round_trip() {
    let out = run_scenario(&hooked(FaultPoint::F3)).unwrap();
    let bytes = to_jsonl(&out.trace);
    let back = read_jsonl(bytes.as_slice()).unwrap();
    assert_eq!(back, out.trace);
    assert_eq!(rama::harness::check_trace(&back), out.report);
}

#[test]
fn tampered_trace_fails_the_checker() {
    let out = run_scenario(&ScenarioConfig::default()).unwrap();
    let mut trace = out.trace.clone();
    // drop one executed command: its bundle no longer matches the replay
    let idx = trace.iter().position(|r| r.kind == TraceKind::Executed).unwrap();
    trace.remove(idx);
    let report = rama::harness::check_trace(&trace);
    assert!(!report.passed());
    assert!(report.failed().contains(&"commands_exactly_once"));
}
