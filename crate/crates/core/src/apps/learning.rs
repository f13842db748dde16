use std::collections::BTreeMap;

use super::{App, AppContext, AppError};
use crate::ctrl::{EventMessage, RamaEvent};
use crate::ofwire::{Action, MatchKey, OfMessage, PORT_FLOOD};
use crate::types::{MacAddr, SwitchId};

pub const LEARNED_PRIORITY: u16 = 10;

/// L2 learning switch: learns `eth_src -> in_port` per switch, installs a
/// destination rule once the destination is known, floods otherwise.
#[derive(Debug, Clone, Default)]
pub struct LearningSwitch {
    hosts: BTreeMap<(SwitchId, MacAddr), u32>,
}

impl LearningSwitch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn known(&self, switch: SwitchId, mac: MacAddr) -> Option<u32> {
        self.hosts.get(&(switch, mac)).copied()
    }
}

impl App for LearningSwitch {
    fn name(&self) -> &str {
        "learning"
    }

    fn on_event(&mut self, event: &RamaEvent, ctx: &mut AppContext) -> Result<(), AppError> {
        let sw = event.switch_id;
        match &event.message {
            EventMessage::PacketIn { in_port, payload, .. } => {
                let header = (payload.len() >= 12).then(|| (MacAddr::from_slice(payload), payload.get(6..12).and_then(MacAddr::from_slice)));
                let Some((Some(dst), Some(src))) = header else {
                    let flood = OfMessage::PacketOut { actions: vec![Action::Output(PORT_FLOOD)], payload: payload.clone() };
                    return ctx.write(sw, flood);
                };
                self.hosts.insert((sw, src), *in_port);
                match self.known(sw, dst) {
                    Some(port) => {
                        ctx.write(
                            sw,
                            OfMessage::FlowMod {
                                match_key: MatchKey { eth_dst: Some(dst), ..Default::default() },
                                actions: vec![Action::Output(port)],
                                priority: LEARNED_PRIORITY,
                            },
                        )?;
                        ctx.write(sw, OfMessage::PacketOut { actions: vec![Action::Output(port)], payload: payload.clone() })
                    }
                    None => ctx.write(
                        sw,
                        OfMessage::PacketOut { actions: vec![Action::Output(PORT_FLOOD)], payload: payload.clone() },
                    ),
                }
            }
            EventMessage::SwitchDown => {
                self.hosts.retain(|(s, _), _| *s != sw);
                Ok(())
            }
            EventMessage::PortStatus { port, up: false } => {
                self.hosts.retain(|(s, _), p| !(*s == sw && p == port));
                Ok(())
            }
            EventMessage::PortStatus { .. } => Ok(()),
        }
    }
}
