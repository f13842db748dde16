//! Failover timing: how long forwarding stops when the master dies.
//!
//! One switch receives a packet every `interval_ms`; the master is killed
//! halfway between two packets. The gap runs from the last PacketOut the
//! switch executed on behalf of the old master to the first one executed on
//! behalf of its successor.

use serde::{Deserialize, Serialize};

use super::config::{FaultInjection, FaultSpot, FaultTarget, ScenarioConfig, Transport, Workload};
use super::scenario::{run_scenario, HarnessError};
use crate::ofwire::{parse_commit_marker, OfMessage};
use crate::switchsim::Origin;
use crate::trace::{Actor, TraceKind, TraceRecord};
use crate::types::{ControllerId, Nanos, MILLIS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailoverConfig {
    pub session_timeout_ms: u64,
    pub transport: Transport,
    pub seed: u64,
    pub trials: u32,
    pub interval_ms: u64,
    /// Run without killing anything, to measure baseline jitter.
    pub kill: bool,
}

impl Default for FailoverConfig {
    fn default() -> Self {
        FailoverConfig { session_timeout_ms: 500, transport: Transport::Deterministic, seed: 1, trials: 1, interval_ms: 10, kill: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailoverResult {
    pub gaps_ms: Vec<f64>,
    pub median_ms: f64,
    /// Largest deviation of any inter-PacketOut spacing from the nominal
    /// interval, excluding the failover gap itself.
    pub max_jitter_ms: f64,
    /// Every trial's trace passed the checker.
    pub checks_passed: bool,
}

/// Packets sent before the kill.
const PACKETS_BEFORE_KILL: u64 = 10;
const START_MS: u64 = 20;

pub fn failover_scenario(cfg: &FailoverConfig, seed: u64) -> ScenarioConfig {
    let kill_ms = START_MS + PACKETS_BEFORE_KILL * cfg.interval_ms + cfg.interval_ms / 2;
    let tail_ms = 2 * cfg.session_timeout_ms + 300;
    let packets = (kill_ms - START_MS + tail_ms) / cfg.interval_ms.max(1);
    ScenarioConfig {
        n_switches: 1,
        n_controllers: 2,
        f: 1,
        batch_size: 1,
        batch_time_ms: 1,
        session_timeout_ms: cfg.session_timeout_ms,
        heartbeat_ms: 1,
        coord_tick_ms: 1,
        seed: Some(seed),
        transport: cfg.transport,
        workload: Workload { packets_per_switch: packets, start_ms: START_MS, interval_us: cfg.interval_ms * 1000, jitter_us: 0, hosts: 2 },
        faults: if cfg.kill {
            vec![FaultInjection { target: FaultTarget::Master, point: FaultSpot::AtTime, trigger: None, at_ms: Some(kill_ms) }]
        } else {
            Vec::new()
        },
        ..ScenarioConfig::default()
    }
}

/// PacketOuts executed at the switch, as (time, controller), markers excluded.
fn forwarded(trace: &[TraceRecord]) -> Vec<(Nanos, ControllerId)> {
    trace
        .iter()
        .filter(|r| r.kind == TraceKind::Executed && matches!(r.actor, Actor::Switch(_)))
        .filter_map(|r| {
            let cmd: OfMessage = serde_json::from_value(r.detail.get("command")?.clone()).ok()?;
            let origin: Origin = serde_json::from_value(r.detail.get("origin")?.clone()).ok()?;
            if !matches!(cmd, OfMessage::PacketOut { .. }) || matches!(parse_commit_marker(&cmd), Ok(Some(_))) || origin == Origin::Table {
                return None;
            }
            let c: ControllerId = serde_json::from_value(r.detail.get("controller")?.clone()).ok()?;
            Some((r.timestamp, c))
        })
        .collect()
}

/// (gap, max jitter) in nanoseconds. The gap is zero when no master change
/// shows up in the executed commands.
pub fn measure_gap(trace: &[TraceRecord], interval: Nanos) -> (Nanos, Nanos) {
    let outs = forwarded(trace);
    let mut gap = 0;
    let mut jitter = 0;
    for w in outs.windows(2) {
        let d = w[1].0.saturating_sub(w[0].0);
        if w[0].1 != w[1].1 {
            gap = gap.max(d);
        } else {
            jitter = jitter.max(d.abs_diff(interval));
        }
    }
    (gap, jitter)
}

pub fn failover_timing(cfg: &FailoverConfig) -> Result<FailoverResult, HarnessError> {
    let mut gaps = Vec::new();
    let mut jitter: Nanos = 0;
    let mut checks_passed = true;
    for t in 0..cfg.trials.max(1) {
        let out = run_scenario(&failover_scenario(cfg, cfg.seed + u64::from(t)))?;
        checks_passed &= out.passed();
        let (gap, j) = measure_gap(&out.trace, cfg.interval_ms * MILLIS);
        gaps.push(gap as f64 / MILLIS as f64);
        jitter = jitter.max(j);
    }
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median_ms = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    Ok(FailoverResult { gaps_ms: gaps, median_ms, max_jitter_ms: jitter as f64 / MILLIS as f64, checks_passed })
}
