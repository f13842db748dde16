use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{App, AppContext, AppError};
use crate::ctrl::{EventMessage, RamaEvent};
use crate::ofwire::{Action, OfMessage};

/// Static `in_port -> out_port` map. Ports not listed go to `default_port`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticPortMap {
    #[serde(default)]
    pub map: BTreeMap<u32, u32>,
    pub default_port: u32,
}

impl Default for StaticPortMap {
    fn default() -> Self {
        StaticPortMap { map: BTreeMap::from([(1, 2), (2, 1)]), default_port: 1 }
    }
}

impl StaticPortMap {
    pub fn out_port(&self, in_port: u32) -> u32 {
        self.map.get(&in_port).copied().unwrap_or(self.default_port)
    }
}

/// Forwards every packet with a single PacketOut and never touches flow tables.
#[derive(Debug, Clone)]
pub struct ForwardingApp {
    ports: StaticPortMap,
    forwarded: u64,
}

impl ForwardingApp {
    pub fn new(ports: StaticPortMap) -> Self {
        ForwardingApp { ports, forwarded: 0 }
    }

    pub fn forwarded(&self) -> u64 {
        self.forwarded
    }
}

impl App for ForwardingApp {
    fn name(&self) -> &str {
        "forwarding"
    }

    fn on_event(&mut self, event: &RamaEvent, ctx: &mut AppContext) -> Result<(), AppError> {
        let EventMessage::PacketIn { in_port, payload, .. } = &event.message else {
            return Ok(());
        };
        let out = self.ports.out_port(*in_port);
        self.forwarded += 1;
        ctx.write(event.switch_id, OfMessage::PacketOut { actions: vec![Action::Output(out)], payload: payload.clone() })
    }
}
