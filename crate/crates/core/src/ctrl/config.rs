use serde::{Deserialize, Serialize};

use crate::apps::{AppKind, StaticPortMap};
use crate::types::{ControllerId, EventId, Nanos, MILLIS};

/// Which halves of the protocol are active. Only `Both` is fault tolerant;
/// the other two exist to measure what each half costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    #[default]
    Both,
    /// Events replicated through the log, commands sent unbundled.
    EventsOnly,
    /// Commands bundled with markers, no log; slaves ignore events.
    CommandsOnly,
}

impl std::str::FromStr for ConsistencyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(ConsistencyMode::Both),
            "events" | "events_only" => Ok(ConsistencyMode::EventsOnly),
            "commands" | "commands_only" => Ok(ConsistencyMode::CommandsOnly),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultPoint {
    /// Before the append carrying the event is sent.
    F1,
    /// Event logged; first switch has Open and Adds but no Commit yet.
    F2,
    /// Every Commit for the event sent, Processed not yet appended.
    F3,
}

impl std::str::FromStr for FaultPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "F1" => Ok(FaultPoint::F1),
            "F2" => Ok(FaultPoint::F2),
            "F3" => Ok(FaultPoint::F3),
            _ => Err(format!("unknown fault point {s:?}")),
        }
    }
}

/// Crash the replica when `event` reaches `point` while it is master.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultHook {
    pub point: FaultPoint,
    pub event: EventId,
}

/// Deliberate protocol defects, used to show the checker catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolBug {
    /// Every bundle is sent twice.
    DuplicateCommit,
    /// Bundles carry no commit marker.
    SkipMarker,
    /// A promoted replica drops the first event of its buffer.
    LostBufferedEvent,
    /// The master delivers the first two events of its log swapped.
    NonFifoDelivery,
    /// A slave delivers its first event twice.
    DoubleDelivery,
    /// The append at the fault point reaches the service after failover.
    StaleEpochAppend,
    /// A promoted replica resends even when a marker was seen.
    IgnoreMarkers,
}

impl ProtocolBug {
    pub const ALL: [ProtocolBug; 7] = [
        ProtocolBug::DuplicateCommit,
        ProtocolBug::SkipMarker,
        ProtocolBug::LostBufferedEvent,
        ProtocolBug::NonFifoDelivery,
        ProtocolBug::DoubleDelivery,
        ProtocolBug::StaleEpochAppend,
        ProtocolBug::IgnoreMarkers,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub id: ControllerId,
    pub batch_size: usize,
    pub batch_time: Nanos,
    pub session_timeout: Nanos,
    pub heartbeat: Nanos,
    pub mode: ConsistencyMode,
    pub app: AppKind,
    pub ports: StaticPortMap,
    pub fault: Option<FaultHook>,
    pub bug: Option<ProtocolBug>,
    /// Extra transit time for the delayed append of [`ProtocolBug::StaleEpochAppend`].
    pub stale_delay: Nanos,
    pub tracing: bool,
}

impl ReplicaConfig {
    pub fn new(id: ControllerId) -> Self {
        ReplicaConfig {
            id,
            batch_size: 1000,
            batch_time: 50 * MILLIS,
            session_timeout: 500 * MILLIS,
            heartbeat: 100 * MILLIS,
            mode: ConsistencyMode::Both,
            app: AppKind::Forwarding,
            ports: StaticPortMap::default(),
            fault: None,
            bug: None,
            stale_delay: 0,
            tracing: true,
        }
    }

    pub(crate) fn has_bug(&self, bug: ProtocolBug) -> bool {
        self.bug == Some(bug)
    }
}
