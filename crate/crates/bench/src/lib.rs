//! Shared fixtures for the benchmarks.

use rama::ofwire::{make_commit_marker, Action, MatchKey, OfMessage};
use rama::types::{EventId, Epoch, MacAddr, SwitchId};

/// A bundle as the master sends it for one event: open, staged commands,
/// the commit marker, commit.
pub fn bundle_messages(commands: usize) -> Vec<OfMessage> {
    let bundle_id = 7;
    let mut out = vec![OfMessage::BundleOpen { bundle_id }];
    for i in 0..commands {
        let inner = if i % 2 == 0 {
            OfMessage::PacketOut { actions: vec![Action::Output(2)], payload: frame(i as u64) }
        } else {
            OfMessage::FlowMod {
                match_key: MatchKey { eth_dst: Some(MacAddr([2, 0, 0, 1, 0, 2])), ..Default::default() },
                actions: vec![Action::Output(2)],
                priority: 10,
            }
        };
        out.push(OfMessage::BundleAdd { bundle_id, inner: Box::new(inner) });
    }
    let marker = make_commit_marker(Epoch(3), &[EventId(41)]).expect("non-empty");
    out.push(OfMessage::BundleAdd { bundle_id, inner: Box::new(marker) });
    out.push(OfMessage::BundleCommit { bundle_id });
    out
}

pub fn packet_in(seq: u64) -> OfMessage {
    OfMessage::PacketIn { switch_id: SwitchId(1), switch_seq: seq, buffer_id: seq as u32, in_port: 1, payload: frame(seq) }
}

fn frame(tag: u64) -> Vec<u8> {
    let mut p = vec![2, 0, 0, 1, 0, 2, 2, 0, 0, 1, 0, 1, 0x08, 0x00];
    p.extend_from_slice(&tag.to_be_bytes());
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_encode() {
        for m in bundle_messages(4).iter().chain([packet_in(1)].iter()) {
            rama::ofwire::encode(m).unwrap();
        }
    }
}
