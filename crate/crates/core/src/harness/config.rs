use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::{AppKind, StaticPortMap};
use crate::ctrl::{ConsistencyMode, FaultPoint, ProtocolBug};
use crate::types::{Nanos, MICROS, MILLIS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    Deterministic,
    Sockets,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    pub packets_per_switch: u64,
    pub start_ms: u64,
    pub interval_us: u64,
    /// Uniform jitter added to each arrival, seeded.
    pub jitter_us: u64,
    /// Hosts per switch for the learning app; each sits on its own port.
    pub hosts: u8,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { packets_per_switch: 100, start_ms: 20, interval_us: 1000, jitter_us: 500, hosts: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedTrigger {
    First,
    Mid,
    Last,
}

/// Which event a fault hook targets: a 1-based index into the events the
/// initial master orders, or a position resolved by a fault-free dry run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Trigger {
    Nth(u64),
    Named(NamedTrigger),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTarget {
    Master,
    Switch(u64),
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Master => f.write_str("master"),
            FaultTarget::Switch(s) => write!(f, "switch:{s}"),
        }
    }
}

impl FromStr for FaultTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "master" {
            return Ok(FaultTarget::Master);
        }
        s.strip_prefix("switch:")
            .and_then(|n| n.parse().ok())
            .map(FaultTarget::Switch)
            .ok_or_else(|| format!("bad fault target {s:?}"))
    }
}

impl Serialize for FaultTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FaultTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultSpot {
    F1,
    F2,
    F3,
    #[serde(rename = "at-time")]
    AtTime,
}

impl FaultSpot {
    pub fn hook(self) -> Option<FaultPoint> {
        match self {
            FaultSpot::F1 => Some(FaultPoint::F1),
            FaultSpot::F2 => Some(FaultPoint::F2),
            FaultSpot::F3 => Some(FaultPoint::F3),
            FaultSpot::AtTime => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub target: FaultTarget,
    pub point: FaultSpot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<Trigger>,
    /// Simulated (or wall-clock) time for `at-time` faults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_ms: Option<u64>,
}

impl FaultInjection {
    pub fn at(point: FaultPoint, trigger: Trigger) -> Self {
        let point = match point {
            FaultPoint::F1 => FaultSpot::F1,
            FaultPoint::F2 => FaultSpot::F2,
            FaultPoint::F3 => FaultSpot::F3,
        };
        FaultInjection { target: FaultTarget::Master, point, trigger: Some(trigger), at_ms: None }
    }
}

/// Link and CPU costs for the deterministic transport. Processing is
/// serialized per actor, so these costs decide where the bottleneck is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub link_latency: Nanos,
    pub coord_latency: Nanos,
    pub jitter: Nanos,
    pub ctrl_rx_of: Nanos,
    pub ctrl_tx_of: Nanos,
    pub ctrl_deliver: Nanos,
    pub ctrl_coord_request: Nanos,
    pub ctrl_coord_reply: Nanos,
    pub ctrl_entry_tx: Nanos,
    pub ctrl_entry_rx: Nanos,
    pub ctrl_tick: Nanos,
    pub coord_request: Nanos,
    pub coord_entry: Nanos,
    pub switch_msg: Nanos,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            link_latency: 50 * MICROS,
            coord_latency: 100 * MICROS,
            jitter: 20 * MICROS,
            ctrl_rx_of: 2 * MICROS,
            ctrl_tx_of: 1_500,
            ctrl_deliver: 4 * MICROS,
            ctrl_coord_request: 300 * MICROS,
            ctrl_coord_reply: 2 * MICROS,
            ctrl_entry_tx: 4 * MICROS,
            ctrl_entry_rx: 3 * MICROS,
            ctrl_tick: MICROS,
            coord_request: 20 * MICROS,
            coord_entry: MICROS,
            switch_msg: MICROS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_switches: u64,
    pub n_controllers: u32,
    pub f: u32,
    pub batch_size: usize,
    pub batch_time_ms: u64,
    pub session_timeout_ms: u64,
    pub heartbeat_ms: u64,
    pub coord_tick_ms: u64,
    pub seed: Option<u64>,
    pub transport: Transport,
    pub app: AppKind,
    pub ports: StaticPortMap,
    pub mode: ConsistencyMode,
    pub workload: Workload,
    pub faults: Vec<FaultInjection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bug: Option<ProtocolBug>,
    /// Simulated-time budget after the workload ends.
    pub drain_ms: u64,
    pub cost: CostModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_switches: 2,
            n_controllers: 2,
            f: 1,
            batch_size: 8,
            batch_time_ms: 2,
            session_timeout_ms: 100,
            heartbeat_ms: 10,
            coord_tick_ms: 1,
            seed: Some(1),
            transport: Transport::Deterministic,
            app: AppKind::Forwarding,
            ports: StaticPortMap::default(),
            mode: ConsistencyMode::Both,
            workload: Workload::default(),
            faults: Vec::new(),
            bug: None,
            drain_ms: 0,
            cost: CostModel::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_controllers == 0 || self.n_controllers != self.f + 1 {
            return bad(format!("n_controllers ({}) must equal f + 1 ({})", self.n_controllers, self.f + 1));
        }
        if self.n_switches == 0 {
            return bad("n_switches must be at least 1".into());
        }
        if self.transport == Transport::Deterministic && self.seed.is_none() {
            return bad("deterministic transport requires a seed".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.heartbeat_ms == 0 || self.heartbeat_ms >= self.session_timeout_ms {
            return bad("heartbeat_ms must be positive and below session_timeout_ms".into());
        }
        let hooks = self.faults.iter().filter(|f| f.point.hook().is_some()).count();
        if hooks > 1 {
            return bad("at most one F1/F2/F3 fault per run".into());
        }
        let ctrl_faults = self.faults.iter().filter(|f| f.target == FaultTarget::Master).count();
        if ctrl_faults > self.f as usize {
            return bad(format!("{ctrl_faults} controller faults exceed f = {}", self.f));
        }
        for fault in &self.faults {
            match (fault.target, fault.point) {
                (FaultTarget::Switch(s), FaultSpot::AtTime) if s >= 1 && s <= self.n_switches => {}
                (FaultTarget::Switch(_), FaultSpot::AtTime) => return bad(format!("no such switch in {fault:?}")),
                (FaultTarget::Switch(_), _) => return bad("switch faults must be at-time".into()),
                (FaultTarget::Master, FaultSpot::AtTime) if fault.at_ms.is_none() => {
                    return bad("at-time fault needs at_ms".into())
                }
                (FaultTarget::Master, FaultSpot::AtTime) => {}
                (FaultTarget::Master, _) if fault.trigger.is_none() => return bad("F1/F2/F3 fault needs a trigger".into()),
                (FaultTarget::Master, _) => {}
            }
        }
        if matches!(self.faults.iter().find(|f| f.target != FaultTarget::Master), Some(f) if f.at_ms.is_none()) {
            return bad("switch fault needs at_ms".into());
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn session_timeout(&self) -> Nanos {
        self.session_timeout_ms * MILLIS
    }

    /// End of packet injection.
    pub fn workload_end(&self) -> Nanos {
        let w = &self.workload;
        w.start_ms * MILLIS + w.packets_per_switch * w.interval_us * MICROS + w.jitter_us * MICROS
    }

    /// Simulated-time deadline for quiescence.
    pub fn deadline(&self) -> Nanos {
        let drain = if self.drain_ms > 0 { self.drain_ms * MILLIS } else { 10 * self.session_timeout() + 500 * MILLIS };
        self.workload_end() + drain
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_structured_toml() {
        let cfg = ScenarioConfig::from_toml(
            r#"
            n_switches = 2
            n_controllers = 2
            f = 1
            seed = 9
            app = "learning"
            [workload]
            packets_per_switch = 50
            [[faults]]
            target = "master"
            point = "F2"
            trigger = "mid"
            [[faults]]
            target = "switch:2"
            point = "at-time"
            at_ms = 40
            "#,
        );
        let cfg = cfg.unwrap();
        assert_eq!(cfg.faults[1].target, FaultTarget::Switch(2));
        assert_eq!(cfg.faults[0].trigger, Some(Trigger::Named(NamedTrigger::Mid)));
        let cfg = ScenarioConfig::from_toml(
            r#"
            seed = 9
            app = "learning"
            [workload]
            packets_per_switch = 50
            [[faults]]
            target = "master"
            point = "F2"
            trigger = 17
            "#,
        )
        .unwrap();
        assert_eq!(cfg.app, AppKind::Learning);
        assert_eq!(cfg.workload.packets_per_switch, 50);
        assert_eq!(cfg.faults[0].trigger, Some(Trigger::Nth(17)));
        assert_eq!(cfg.faults[0].point.hook(), Some(FaultPoint::F2));
    }

    #[test]
    fn rejects_bad_controller_count() {
        let err = ScenarioConfig::from_toml("n_controllers = 3\nf = 1\nseed = 1").unwrap_err();
        assert!(err.to_string().contains("f + 1"));
    }

    #[test]
    fn deterministic_needs_seed() {
        let cfg = ScenarioConfig { seed: None, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = ScenarioConfig::default();
        cfg.faults.push(FaultInjection::at(FaultPoint::F3, Trigger::Named(NamedTrigger::Last)));
        let v = serde_json::to_value(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }
}
