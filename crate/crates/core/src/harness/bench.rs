//! Closed-loop throughput measurement on the deterministic transport.
//!
//! Emulated switches each keep a fixed number of packets outstanding and send
//! a fresh one for every response (a bundle commit or a plain PacketOut).
//! Throughput is responses per simulated second over a window that starts
//! after a warm-up.

use serde::{Deserialize, Serialize};

use super::config::CostModel;
use super::scenario::HarnessError;
use super::sim::{Sim, SimParams, STAGGER};
use crate::apps::{AppKind, StaticPortMap};
use crate::ctrl::{ConsistencyMode, ReplicaConfig};
use crate::types::{ControllerId, Nanos, MILLIS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub switches: usize,
    pub controllers: u32,
    pub batch_size: usize,
    pub batch_time_ms: u64,
    pub mode: ConsistencyMode,
    /// Packets each switch keeps outstanding.
    pub outstanding: u64,
    pub warmup_ms: u64,
    pub measure_ms: u64,
    pub seed: u64,
    pub cost: CostModel,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            switches: 16,
            controllers: 2,
            batch_size: 1000,
            batch_time_ms: 50,
            mode: ConsistencyMode::Both,
            outstanding: 64,
            warmup_ms: 100,
            measure_ms: 500,
            seed: 1,
            cost: CostModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub responses: u64,
    pub window: Nanos,
    /// Responses per second.
    pub throughput: f64,
}

/// Time for leadership to settle before load starts.
const LOAD_START: Nanos = 10 * MILLIS;

pub fn bench(cfg: &BenchConfig) -> Result<BenchResult, HarnessError> {
    let replicas = (0..cfg.controllers.max(1))
        .map(|i| ReplicaConfig {
            batch_size: cfg.batch_size.max(1),
            batch_time: cfg.batch_time_ms * MILLIS,
            session_timeout: 500 * MILLIS,
            heartbeat: 100 * MILLIS,
            mode: cfg.mode,
            app: AppKind::Forwarding,
            ports: StaticPortMap::default(),
            tracing: false,
            ..ReplicaConfig::new(ControllerId(i + 1))
        })
        .collect();
    let mut sim = Sim::new(SimParams {
        n_switches: cfg.switches,
        replicas,
        cost: cfg.cost,
        seed: cfg.seed,
        coord_tick: MILLIS,
        fencing: true,
        tracing: false,
        stagger: STAGGER,
    });
    sim.start_closed_loop(LOAD_START, cfg.outstanding, 2);
    let begin = LOAD_START + cfg.warmup_ms * MILLIS;
    let window = cfg.measure_ms.max(1) * MILLIS;
    sim.run_until(begin)?;
    let r0 = sim.responses();
    sim.run_until(begin + window)?;
    let responses = sim.responses() - r0;
    Ok(BenchResult { responses, window, throughput: responses as f64 * 1e9 / window as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mode: ConsistencyMode, batch_size: usize) -> f64 {
        let cfg = BenchConfig { switches: 4, mode, batch_size, warmup_ms: 20, measure_ms: 100, ..Default::default() };
        bench(&cfg).unwrap().throughput
    }

    #[test]
    fn closed_loop_makes_progress() {
        assert!(quick(ConsistencyMode::Both, 100) > 1000.0);
    }

    #[test]
    fn bench_is_deterministic() {
        assert_eq!(quick(ConsistencyMode::Both, 100), quick(ConsistencyMode::Both, 100));
    }
}
