//! Runs a configured scenario end to end and checks its trace.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use super::check::{check_trace, CheckReport};
use super::config::{ConfigError, FaultInjection, FaultSpot, FaultTarget, NamedTrigger, ScenarioConfig, Transport, Trigger};
use super::sim::{Sim, SimError, SimParams, STAGGER};
use super::{socket, workload};
use crate::ctrl::{FaultHook, FaultPoint, ProtocolBug, ReplicaConfig};
use crate::trace::{self, Actor, TraceKind, TraceRecord};
use crate::types::{ControllerId, EventId, Nanos, MILLIS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("socket transport: {0}")]
    Socket(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dry run logged no events, cannot resolve trigger")]
    NoEvents,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Vec<TraceRecord>,
    pub report: CheckReport,
    /// Time at which the run went quiescent.
    pub end: Nanos,
    /// Event targeted by the hook fault, after trigger resolution.
    pub hook_event: Option<EventId>,
    /// Set when the run stopped on an error instead of quiescing. The trace
    /// up to that point is still checked.
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.report.passed()
    }

    pub fn write_trace(&self, path: &Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        trace::write_jsonl(f, &self.trace)
    }
}

pub(crate) fn replica_configs(cfg: &ScenarioConfig, hook: Option<FaultHook>) -> Vec<ReplicaConfig> {
    (0..cfg.n_controllers)
        .map(|i| ReplicaConfig {
            id: ControllerId(i + 1),
            batch_size: cfg.batch_size,
            batch_time: cfg.batch_time_ms * MILLIS,
            session_timeout: cfg.session_timeout(),
            heartbeat: cfg.heartbeat_ms * MILLIS,
            mode: cfg.mode,
            app: cfg.app,
            ports: cfg.ports.clone(),
            // only the initial master carries the hook
            fault: if i == 0 { hook } else { None },
            bug: cfg.bug,
            stale_delay: 2 * cfg.session_timeout(),
            tracing: true,
        })
        .collect()
}

fn hook_fault(cfg: &ScenarioConfig) -> Option<(FaultPoint, Trigger)> {
    cfg.faults.iter().find_map(|f| Some((f.point.hook()?, f.trigger?)))
}

/// Maps a trigger onto an event id, consulting a fault-free dry run for
/// named positions.
fn resolve_trigger(cfg: &ScenarioConfig, trigger: Trigger) -> Result<EventId, HarnessError> {
    let named = match trigger {
        Trigger::Nth(n) => return Ok(EventId(n.max(1))),
        Trigger::Named(n) => n,
    };
    let mut dry = cfg.clone();
    dry.faults.clear();
    dry.bug = None;
    let (trace, _, _) = simulate(&dry, None)?;
    let n = trace
        .iter()
        .filter(|r| r.kind == TraceKind::Logged && r.detail.pointer("/body/type").and_then(|t| t.as_str()) == Some("Event"))
        .count() as u64;
    if n == 0 {
        return Err(HarnessError::NoEvents);
    }
    Ok(EventId(match named {
        NamedTrigger::First => 1,
        NamedTrigger::Mid => (n / 2).max(1),
        NamedTrigger::Last => n,
    }))
}

fn header(cfg: &ScenarioConfig, hook: Option<FaultHook>) -> TraceRecord {
    TraceRecord::new(TraceKind::Scenario, Actor::Harness, 0).detail(json!({ "config": cfg, "hook": hook }))
}

/// One deterministic run. Returns the trace (with header and end record),
/// the quiescence time and any error that cut the run short.
fn simulate(cfg: &ScenarioConfig, hook: Option<FaultHook>) -> Result<(Vec<TraceRecord>, Nanos, Option<String>), HarnessError> {
    let params = SimParams {
        n_switches: cfg.n_switches as usize,
        replicas: replica_configs(cfg, hook),
        cost: cfg.cost,
        seed: cfg.seed(),
        coord_tick: cfg.coord_tick_ms * MILLIS,
        fencing: cfg.bug != Some(ProtocolBug::StaleEpochAppend),
        tracing: true,
        stagger: STAGGER,
    };
    let mut sim = Sim::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed() ^ 0x5eed);
    for inj in workload::open_loop(&cfg.workload, cfg.n_switches, &mut rng) {
        sim.inject(inj.at, inj.switch as usize - 1, inj.in_port, inj.payload);
    }
    for f in &cfg.faults {
        let (FaultSpot::AtTime, Some(ms)) = (f.point, f.at_ms) else {
            continue;
        };
        match f.target {
            FaultTarget::Master => sim.schedule_kill_master(ms * MILLIS),
            FaultTarget::Switch(s) => sim.schedule_switch_crash(ms * MILLIS, s as usize - 1),
        }
    }
    let result = sim.run_to_quiescence(cfg.deadline());
    let end = sim.now();
    let error = result.err().map(|e| e.to_string());
    let mut trace = vec![header(cfg, hook)];
    trace.extend(sim.take_trace());
    trace.push(TraceRecord::new(TraceKind::RunEnd, Actor::Harness, end).detail(json!({ "error": error })));
    Ok((trace, end, error))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let hook = match hook_fault(cfg) {
        Some((point, trigger)) => Some(FaultHook { point, event: resolve_trigger(cfg, trigger)? }),
        None => None,
    };
    let (trace, end, error) = match cfg.transport {
        Transport::Deterministic => simulate(cfg, hook)?,
        Transport::Sockets => {
            let mut t = vec![header(cfg, hook)];
            let run = socket::run(cfg, replica_configs(cfg, hook)).map_err(|e| HarnessError::Socket(e.to_string()))?;
            t.extend(run.trace);
            t.push(TraceRecord::new(TraceKind::RunEnd, Actor::Harness, run.end).detail(json!({ "error": run.error })));
            (t, run.end, run.error)
        }
    };
    let report = check_trace(&trace);
    Ok(RunOutcome { trace, report, end, hook_event: hook.map(|h| h.event), error })
}

/// The scenario each protocol bug is exercised under.
pub fn mutation_scenario(bug: ProtocolBug, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig { seed: Some(seed), bug: Some(bug), ..ScenarioConfig::default() };
    let mid = Trigger::Named(NamedTrigger::Mid);
    match bug {
        ProtocolBug::DuplicateCommit | ProtocolBug::SkipMarker | ProtocolBug::NonFifoDelivery | ProtocolBug::DoubleDelivery => {}
        ProtocolBug::LostBufferedEvent | ProtocolBug::StaleEpochAppend => cfg.faults.push(FaultInjection::at(FaultPoint::F1, mid)),
        ProtocolBug::IgnoreMarkers => cfg.faults.push(FaultInjection::at(FaultPoint::F3, mid)),
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_free_run_passes_every_property() {
        let out = run_scenario(&ScenarioConfig::default()).unwrap();
        assert!(out.error.is_none(), "{:?}", out.error);
        assert!(out.report.passed(), "{}", out.report);
        assert_eq!(out.report.stats.events_logged, 200);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = ScenarioConfig { seed: Some(11), ..Default::default() };
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(trace::to_jsonl(&a.trace), trace::to_jsonl(&b.trace));
    }

    #[test]
    fn named_triggers_resolve_against_dry_run() {
        let cfg = ScenarioConfig::default();
        assert_eq!(resolve_trigger(&cfg, Trigger::Named(NamedTrigger::First)).unwrap(), EventId(1));
        assert_eq!(resolve_trigger(&cfg, Trigger::Named(NamedTrigger::Mid)).unwrap(), EventId(100));
        assert_eq!(resolve_trigger(&cfg, Trigger::Named(NamedTrigger::Last)).unwrap(), EventId(200));
        assert_eq!(resolve_trigger(&cfg, Trigger::Nth(7)).unwrap(), EventId(7));
    }

    #[test]
    fn master_crash_mid_run_still_passes() {
        for point in [FaultPoint::F1, FaultPoint::F2, FaultPoint::F3] {
            let mut cfg = ScenarioConfig::default();
            cfg.faults.push(FaultInjection::at(point, Trigger::Named(NamedTrigger::Mid)));
            let out = run_scenario(&cfg).unwrap();
            assert!(out.passed(), "{point:?}: {:?}\n{}", out.error, out.report);
            assert!(out.trace.iter().any(|r| r.kind == TraceKind::FaultFired));
        }
    }
}
