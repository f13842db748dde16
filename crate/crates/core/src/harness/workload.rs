//! Packet streams injected at switch data ports.
//!
//! Host MACs are `02:00:00:<switch>:00:<host>`, locally administered and
//! unicast, so no generated payload starts with the commit-marker magic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::Workload;
use crate::types::{MacAddr, Nanos, MICROS, MILLIS};

pub fn host_mac(switch: u64, host: u8) -> MacAddr {
    MacAddr([0x02, 0, 0, switch as u8, 0, host])
}

/// Ethernet-like frame: dst, src, ethertype, then a sequence tag.
pub fn frame(dst: MacAddr, src: MacAddr, tag: u64) -> Vec<u8> {
    let mut p = Vec::with_capacity(22);
    p.extend_from_slice(&dst.0);
    p.extend_from_slice(&src.0);
    p.extend_from_slice(&[0x08, 0x00]);
    p.extend_from_slice(&tag.to_be_bytes());
    p
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub at: Nanos,
    /// 1-based switch number.
    pub switch: u64,
    pub in_port: u32,
    pub payload: Vec<u8>,
}

/// The k-th packet at `switch`: host `k mod hosts` sends to a different host,
/// and enters on its own port.
pub fn packet(switch: u64, k: u64, hosts: u8, rng: &mut ChaCha8Rng) -> (u32, Vec<u8>) {
    let hosts = u64::from(hosts.max(2));
    let src = k % hosts + 1;
    let dst = (src - 1 + rng.gen_range(1..hosts)) % hosts + 1;
    let payload = frame(host_mac(switch, dst as u8), host_mac(switch, src as u8), k);
    (src as u32, payload)
}

/// Open-loop stream: every switch receives `packets_per_switch` packets at
/// `interval_us` spacing plus seeded jitter. Sorted by time, then switch.
pub fn open_loop(w: &Workload, n_switches: u64, rng: &mut ChaCha8Rng) -> Vec<Injection> {
    let mut out = Vec::new();
    for sw in 1..=n_switches {
        for k in 0..w.packets_per_switch {
            let jitter = if w.jitter_us > 0 { rng.gen_range(0..=w.jitter_us * MICROS) } else { 0 };
            let at = w.start_ms * MILLIS + k * w.interval_us * MICROS + jitter;
            let (in_port, payload) = packet(sw, k, w.hosts, rng);
            out.push(Injection { at, switch: sw, in_port, payload });
        }
    }
    out.sort_by_key(|i| (i.at, i.switch));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofwire::{parse_commit_marker, OfMessage};
    use crate::types::SwitchId;
    use rand::SeedableRng;

    #[test]
    fn generated_payloads_never_parse_as_markers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inj in open_loop(&Workload { packets_per_switch: 500, ..Default::default() }, 4, &mut rng) {
            let pin = OfMessage::PacketIn { switch_id: SwitchId(inj.switch), switch_seq: 1, buffer_id: 0, in_port: inj.in_port, payload: inj.payload };
            assert_eq!(parse_commit_marker(&pin), Ok(None));
        }
    }

    #[test]
    fn source_and_destination_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..200 {
            let (port, p) = packet(1, k, 4, &mut rng);
            assert_ne!(&p[0..6], &p[6..12]);
            assert_eq!(u32::from(p[11]), port);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let w = Workload::default();
        let a = open_loop(&w, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let b = open_loop(&w, 2, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
    }
}
