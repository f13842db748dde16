//! Commit marker carried by the last `PacketOut` of every bundle.
//!
//! The marker uses `output=controller`, so when the switch commits the bundle
//! it echoes the payload to every connected controller as a `PacketIn`. That
//! echo is how slaves learn which events a switch has fully executed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::codec::{put_varint, Reader};
use super::{Action, OfMessage};
use crate::types::{Epoch, EventId};

/// Reserved payload prefix. The first byte is `0xff`, a group address in the
/// Ethernet destination slot, which workload traffic never uses.
pub const MARKER_MAGIC: [u8; 4] = [0xff, b'R', b'M', b'A'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitMarker {
    pub master_epoch: Epoch,
    pub event_ids: Vec<EventId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MarkerError {
    #[error("commit marker must name at least one event")]
    Empty,
    #[error("corrupted commit marker: {0}")]
    Corrupt(&'static str),
}

pub fn make_commit_marker(epoch: Epoch, event_ids: &[EventId]) -> Result<OfMessage, MarkerError> {
    if event_ids.is_empty() {
        return Err(MarkerError::Empty);
    }
    let mut payload = MARKER_MAGIC.to_vec();
    put_varint(&mut payload, epoch.0);
    put_varint(&mut payload, event_ids.len() as u64);
    for id in event_ids {
        put_varint(&mut payload, id.0);
    }
    Ok(OfMessage::PacketOut { actions: vec![Action::OutputController], payload })
}

/// Parses the marker out of a `PacketIn` (or the `PacketOut` that produced it).
///
/// Returns `Ok(None)` for ordinary traffic and an error when the payload
/// carries the magic prefix but does not parse.
pub fn parse_commit_marker(msg: &OfMessage) -> Result<Option<CommitMarker>, MarkerError> {
    let payload = match msg {
        OfMessage::PacketIn { payload, .. } | OfMessage::PacketOut { payload, .. } => payload,
        _ => return Ok(None),
    };
    let Some(rest) = payload.strip_prefix(&MARKER_MAGIC[..]) else {
        return Ok(None);
    };
    let corrupt = |_| MarkerError::Corrupt("truncated or malformed field");
    let mut r = Reader::new(rest);
    let master_epoch = Epoch(r.varint().map_err(corrupt)?);
    let n = r.varint().map_err(corrupt)?;
    if n == 0 {
        return Err(MarkerError::Corrupt("no event ids"));
    }
    if n > rest.len() as u64 {
        return Err(MarkerError::Corrupt("event count exceeds payload"));
    }
    let mut event_ids = Vec::with_capacity(n as usize);
    for _ in 0..n {
        event_ids.push(EventId(r.varint().map_err(corrupt)?));
    }
    if !r.is_empty() {
        return Err(MarkerError::Corrupt("trailing bytes"));
    }
    Ok(Some(CommitMarker { master_epoch, event_ids }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SwitchId;

    fn as_packet_in(out: OfMessage) -> OfMessage {
        let OfMessage::PacketOut { payload, .. } = out else { panic!("not a PacketOut") };
        OfMessage::PacketIn { switch_id: SwitchId(1), switch_seq: 4, buffer_id: 0, in_port: 0, payload }
    }

    #[test]
    fn single_event_round_trip() {
        let out = make_commit_marker(Epoch(1), &[EventId(7)]).unwrap();
        match &out {
            OfMessage::PacketOut { actions, payload } => {
                assert_eq!(actions, &vec![Action::OutputController]);
                assert!(payload.starts_with(&MARKER_MAGIC));
            }
            _ => panic!(),
        }
        let m = parse_commit_marker(&as_packet_in(out)).unwrap().unwrap();
        assert_eq!(m, CommitMarker { master_epoch: Epoch(1), event_ids: vec![EventId(7)] });
    }

    #[test]
    fn multi_event_order_preserved() {
        let out = make_commit_marker(Epoch(3), &[EventId(1), EventId(2)]).unwrap();
        let m = parse_commit_marker(&as_packet_in(out)).unwrap().unwrap();
        assert_eq!(m.event_ids, vec![EventId(1), EventId(2)]);
        assert_eq!(m.master_epoch, Epoch(3));
    }

    #[test]
    fn ordinary_payload_is_not_a_marker() {
        let pin = OfMessage::PacketIn {
            switch_id: SwitchId(1),
            switch_seq: 1,
            buffer_id: 0,
            in_port: 1,
            payload: b"hello".to_vec(),
        };
        assert_eq!(parse_commit_marker(&pin), Ok(None));
    }

    #[test]
    fn corrupted_marker_is_an_error() {
        let mut payload = MARKER_MAGIC.to_vec();
        payload.push(0x80); // unterminated varint
        let pin = OfMessage::PacketIn { switch_id: SwitchId(1), switch_seq: 1, buffer_id: 0, in_port: 0, payload };
        assert!(matches!(parse_commit_marker(&pin), Err(MarkerError::Corrupt(_))));

        let mut payload = MARKER_MAGIC.to_vec();
        payload.extend_from_slice(&[1, 0]);
        let pin = OfMessage::PacketIn { switch_id: SwitchId(1), switch_seq: 1, buffer_id: 0, in_port: 0, payload };
        assert_eq!(parse_commit_marker(&pin), Err(MarkerError::Corrupt("no event ids")));
    }

    #[test]
    fn empty_marker_rejected() {
        assert_eq!(make_commit_marker(Epoch(1), &[]), Err(MarkerError::Empty));
    }
}
