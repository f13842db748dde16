//! OpenFlow-subset message model.
//!
//! Only the messages the replication protocol needs are modelled: events
//! (`PacketIn`, `PortStatus`), commands (`PacketOut`, `FlowMod`), the bundle
//! lifecycle, barriers and a role announcement. The byte layout is a compact
//! length-prefixed framing (see [`encode`]), not the OpenFlow 1.4 binary format.

mod codec;
mod marker;

pub use codec::{decode, encode, encode_frame, split_frame, FrameDecoder, MAX_FRAME_BODY};
pub use marker::{make_commit_marker, parse_commit_marker, CommitMarker, MARKER_MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ControllerId, Epoch, MacAddr, SwitchId};

/// Port number used for flooding (`OFPP_FLOOD`).
pub const PORT_FLOOD: u32 = 0xffff_fffb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "port")]
pub enum Action {
    Output(u32),
    /// Send the packet to every connected controller as a `PacketIn`.
    OutputController,
    Drop,
}

/// Fields a flow rule may match on. `None` is a wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct MatchKey {
    pub in_port: Option<u32>,
    pub eth_src: Option<MacAddr>,
    pub eth_dst: Option<MacAddr>,
}

impl MatchKey {
    pub fn matches(&self, in_port: u32, payload: &[u8]) -> bool {
        if self.in_port.is_some_and(|p| p != in_port) {
            return false;
        }
        if let Some(dst) = self.eth_dst {
            if MacAddr::from_slice(payload) != Some(dst) {
                return false;
            }
        }
        if let Some(src) = self.eth_src {
            if payload.get(6..12).and_then(MacAddr::from_slice) != Some(src) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum OfMessage {
    PacketIn {
        switch_id: SwitchId,
        switch_seq: u64,
        buffer_id: u32,
        in_port: u32,
        #[serde(with = "hex::serde")]
        payload: Vec<u8>,
    },
    PacketOut {
        actions: Vec<Action>,
        #[serde(with = "hex::serde")]
        payload: Vec<u8>,
    },
    FlowMod {
        match_key: MatchKey,
        actions: Vec<Action>,
        priority: u16,
    },
    BundleOpen {
        bundle_id: u32,
    },
    BundleAdd {
        bundle_id: u32,
        inner: Box<OfMessage>,
    },
    BundleCommit {
        bundle_id: u32,
    },
    BundleReply {
        bundle_id: u32,
        success: bool,
    },
    BarrierRequest {
        xid: u32,
    },
    BarrierReply {
        xid: u32,
    },
    RoleAnnounce {
        controller_id: ControllerId,
        epoch: Epoch,
    },
    PortStatus {
        switch_id: SwitchId,
        /// Drawn from the same per-switch counter as PacketIn.
        switch_seq: u64,
        port: u32,
        up: bool,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame body of {0} bytes exceeds the {MAX_FRAME_BODY} byte limit")]
    Oversize(usize),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("invalid message: {0}")]
    Invalid(&'static str),
}

impl OfMessage {
    /// True for messages a switch applies as commands.
    pub fn is_command(&self) -> bool {
        matches!(self, OfMessage::PacketOut { .. } | OfMessage::FlowMod { .. })
    }

    /// Checks the structural invariants of the message model.
    pub fn validate(&self) -> Result<(), WireError> {
        match self {
            OfMessage::FlowMod { actions, .. } => {
                if actions.contains(&Action::OutputController) {
                    return Err(WireError::Invalid("output=controller is only legal in PacketOut"));
                }
                Ok(())
            }
            OfMessage::BundleAdd { inner, .. } => {
                if !inner.is_command() {
                    return Err(WireError::Invalid("bundle may only stage PacketOut or FlowMod"));
                }
                inner.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OfMessage::PacketIn { .. } => "PacketIn",
            OfMessage::PacketOut { .. } => "PacketOut",
            OfMessage::FlowMod { .. } => "FlowMod",
            OfMessage::BundleOpen { .. } => "BundleOpen",
            OfMessage::BundleAdd { .. } => "BundleAdd",
            OfMessage::BundleCommit { .. } => "BundleCommit",
            OfMessage::BundleReply { .. } => "BundleReply",
            OfMessage::BarrierRequest { .. } => "BarrierRequest",
            OfMessage::BarrierReply { .. } => "BarrierReply",
            OfMessage::RoleAnnounce { .. } => "RoleAnnounce",
            OfMessage::PortStatus { .. } => "PortStatus",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flowmod_rejects_output_controller() {
        let m = OfMessage::FlowMod {
            match_key: MatchKey::default(),
            actions: vec![Action::OutputController],
            priority: 1,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn bundle_add_rejects_nested_control_messages() {
        let m = OfMessage::BundleAdd {
            bundle_id: 1,
            inner: Box::new(OfMessage::BarrierRequest { xid: 3 }),
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_uses_field_names() {
        let m = OfMessage::PacketIn {
            switch_id: SwitchId(1),
            switch_seq: 7,
            buffer_id: 0,
            in_port: 2,
            payload: b"hi".to_vec(),
        };
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["type"], "PacketIn");
        assert_eq!(v["switch_seq"], 7);
        assert_eq!(v["payload"], "6869");
        let back: OfMessage = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn match_key_on_dst() {
        let dst = MacAddr([2, 0, 0, 0, 0, 9]);
        let mut pkt = dst.0.to_vec();
        pkt.extend_from_slice(&[2, 0, 0, 0, 0, 1, 8, 0]);
        let k = MatchKey { eth_dst: Some(dst), ..Default::default() };
        assert!(k.matches(1, &pkt));
        let k2 = MatchKey { in_port: Some(3), ..k };
        assert!(!k2.matches(1, &pkt));
    }
}
