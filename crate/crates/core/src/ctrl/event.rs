use serde::{Deserialize, Serialize};

use crate::ofwire::OfMessage;
use crate::types::{EventId, Nanos, SwitchId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventMessage {
    PacketIn {
        in_port: u32,
        buffer_id: u32,
        #[serde(with = "hex")]
        payload: Vec<u8>,
    },
    PortStatus {
        port: u32,
        up: bool,
    },
    /// Synthesized by every replica when a switch connection drops.
    SwitchDown,
}

/// A switch event stamped with its position in the total order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RamaEvent {
    pub event_id: EventId,
    pub switch_id: SwitchId,
    pub switch_seq: u64,
    pub message: EventMessage,
}

impl RamaEvent {
    /// Identity of the underlying occurrence, shared by every replica.
    pub fn key(&self) -> (SwitchId, u64) {
        (self.switch_id, self.switch_seq)
    }
}

/// An event collected but not yet ordered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingEvent {
    pub switch_id: SwitchId,
    pub switch_seq: u64,
    pub message: EventMessage,
    pub arrived: Nanos,
}

impl PendingEvent {
    pub fn key(&self) -> (SwitchId, u64) {
        (self.switch_id, self.switch_seq)
    }

    pub fn with_id(self, event_id: EventId) -> RamaEvent {
        RamaEvent { event_id, switch_id: self.switch_id, switch_seq: self.switch_seq, message: self.message }
    }

    /// Switch-originated event messages; anything else is not an event.
    pub fn from_switch(msg: OfMessage, arrived: Nanos) -> Option<PendingEvent> {
        match msg {
            OfMessage::PacketIn { switch_id, switch_seq, buffer_id, in_port, payload } => Some(PendingEvent {
                switch_id,
                switch_seq,
                message: EventMessage::PacketIn { in_port, buffer_id, payload },
                arrived,
            }),
            OfMessage::PortStatus { switch_id, switch_seq, port, up } => {
                Some(PendingEvent { switch_id, switch_seq, message: EventMessage::PortStatus { port, up }, arrived })
            }
            _ => None,
        }
    }
}
