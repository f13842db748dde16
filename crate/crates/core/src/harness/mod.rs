//! Scenario runner, transports, checker, throughput and failover measurement.

pub mod bench;
pub mod check;
pub mod config;
pub mod failover;
pub mod scenario;
pub mod sim;
pub mod socket;
pub mod workload;

pub use bench::{bench, BenchConfig, BenchResult};
pub use check::{check_trace, CheckReport, PropertyResult};
pub use config::{ConfigError, CostModel, FaultInjection, FaultSpot, FaultTarget, NamedTrigger, ScenarioConfig, Transport, Trigger, Workload};
pub use failover::{failover_timing, FailoverConfig, FailoverResult};
pub use scenario::{mutation_scenario, run_scenario, HarnessError, RunOutcome};
pub use sim::{Sim, SimError, SimParams};
