//! Frame layout: `len: u32 BE | tag: u8 | body`, where `len` counts the tag and
//! body. Integers in the body are unsigned LEB128 varints, byte strings and
//! lists are varint-length-prefixed, booleans are one byte.

use super::{Action, MatchKey, OfMessage, WireError};
use crate::types::{ControllerId, Epoch, MacAddr, SwitchId};

/// Largest accepted `tag + body` length.
pub const MAX_FRAME_BODY: usize = 1 << 24;

const TAG_PACKET_IN: u8 = 0x01;
const TAG_PACKET_OUT: u8 = 0x02;
const TAG_FLOW_MOD: u8 = 0x03;
const TAG_BUNDLE_OPEN: u8 = 0x04;
const TAG_BUNDLE_ADD: u8 = 0x05;
const TAG_BUNDLE_COMMIT: u8 = 0x06;
const TAG_BUNDLE_REPLY: u8 = 0x07;
const TAG_BARRIER_REQUEST: u8 = 0x08;
const TAG_BARRIER_REPLY: u8 = 0x09;
const TAG_ROLE_ANNOUNCE: u8 = 0x0a;
const TAG_PORT_STATUS: u8 = 0x0b;

const ACTION_OUTPUT: u8 = 0;
const ACTION_CONTROLLER: u8 = 1;
const ACTION_DROP: u8 = 2;

pub(crate) fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Cursor over a frame body.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        let b = *self.buf.get(self.pos).ok_or(WireError::Malformed("body truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    pub(crate) fn varint(&mut self) -> Result<u64, WireError> {
        let mut v: u64 = 0;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            let bits = u64::from(b & 0x7f);
            if shift == 63 && bits > 1 {
                return Err(WireError::Malformed("varint overflow"));
            }
            v |= bits << shift;
            if b & 0x80 == 0 {
                // Reject non-minimal encodings so that encode stays injective.
                if b == 0 && shift > 0 {
                    return Err(WireError::Malformed("non-minimal varint"));
                }
                return Ok(v);
            }
        }
        Err(WireError::Malformed("varint overflow"))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        u32::try_from(self.varint()?).map_err(|_| WireError::Malformed("integer out of range"))
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        u16::try_from(self.varint()?).map_err(|_| WireError::Malformed("integer out of range"))
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Malformed("bad boolean")),
        }
    }

    pub(crate) fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let len = usize::try_from(self.varint()?).map_err(|_| WireError::Malformed("length"))?;
        let end = self.pos.checked_add(len).ok_or(WireError::Malformed("length"))?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Malformed("body truncated"))?;
        self.pos = end;
        Ok(s)
    }

    fn mac(&mut self) -> Result<MacAddr, WireError> {
        let end = self.pos + 6;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Malformed("body truncated"))?;
        self.pos = end;
        Ok(MacAddr::from_slice(s).expect("six bytes"))
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_varint(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_actions(out: &mut Vec<u8>, actions: &[Action]) {
    put_varint(out, actions.len() as u64);
    for a in actions {
        match a {
            Action::Output(port) => {
                out.push(ACTION_OUTPUT);
                put_varint(out, u64::from(*port));
            }
            Action::OutputController => out.push(ACTION_CONTROLLER),
            Action::Drop => out.push(ACTION_DROP),
        }
    }
}

fn read_actions(r: &mut Reader<'_>) -> Result<Vec<Action>, WireError> {
    let n = r.varint()?;
    let mut actions = Vec::new();
    for _ in 0..n {
        actions.push(match r.u8()? {
            ACTION_OUTPUT => Action::Output(r.u32()?),
            ACTION_CONTROLLER => Action::OutputController,
            ACTION_DROP => Action::Drop,
            _ => return Err(WireError::Malformed("unknown action")),
        });
    }
    Ok(actions)
}

fn put_match(out: &mut Vec<u8>, k: &MatchKey) {
    let flags = u8::from(k.in_port.is_some())
        | u8::from(k.eth_src.is_some()) << 1
        | u8::from(k.eth_dst.is_some()) << 2;
    out.push(flags);
    if let Some(p) = k.in_port {
        put_varint(out, u64::from(p));
    }
    if let Some(m) = k.eth_src {
        out.extend_from_slice(&m.0);
    }
    if let Some(m) = k.eth_dst {
        out.extend_from_slice(&m.0);
    }
}

fn read_match(r: &mut Reader<'_>) -> Result<MatchKey, WireError> {
    let flags = r.u8()?;
    if flags & !0b111 != 0 {
        return Err(WireError::Malformed("unknown match flags"));
    }
    Ok(MatchKey {
        in_port: if flags & 1 != 0 { Some(r.u32()?) } else { None },
        eth_src: if flags & 2 != 0 { Some(r.mac()?) } else { None },
        eth_dst: if flags & 4 != 0 { Some(r.mac()?) } else { None },
    })
}

/// Appends `tag | body` for `msg` (no length prefix).
fn put_message(out: &mut Vec<u8>, msg: &OfMessage) {
    match msg {
        OfMessage::PacketIn { switch_id, switch_seq, buffer_id, in_port, payload } => {
            out.push(TAG_PACKET_IN);
            put_varint(out, switch_id.0);
            put_varint(out, *switch_seq);
            put_varint(out, u64::from(*buffer_id));
            put_varint(out, u64::from(*in_port));
            put_bytes(out, payload);
        }
        OfMessage::PacketOut { actions, payload } => {
            out.push(TAG_PACKET_OUT);
            put_actions(out, actions);
            put_bytes(out, payload);
        }
        OfMessage::FlowMod { match_key, actions, priority } => {
            out.push(TAG_FLOW_MOD);
            put_match(out, match_key);
            put_actions(out, actions);
            put_varint(out, u64::from(*priority));
        }
        OfMessage::BundleOpen { bundle_id } => {
            out.push(TAG_BUNDLE_OPEN);
            put_varint(out, u64::from(*bundle_id));
        }
        OfMessage::BundleAdd { bundle_id, inner } => {
            out.push(TAG_BUNDLE_ADD);
            put_varint(out, u64::from(*bundle_id));
            put_message(out, inner);
        }
        OfMessage::BundleCommit { bundle_id } => {
            out.push(TAG_BUNDLE_COMMIT);
            put_varint(out, u64::from(*bundle_id));
        }
        OfMessage::BundleReply { bundle_id, success } => {
            out.push(TAG_BUNDLE_REPLY);
            put_varint(out, u64::from(*bundle_id));
            out.push(u8::from(*success));
        }
        OfMessage::BarrierRequest { xid } => {
            out.push(TAG_BARRIER_REQUEST);
            put_varint(out, u64::from(*xid));
        }
        OfMessage::BarrierReply { xid } => {
            out.push(TAG_BARRIER_REPLY);
            put_varint(out, u64::from(*xid));
        }
        OfMessage::RoleAnnounce { controller_id, epoch } => {
            out.push(TAG_ROLE_ANNOUNCE);
            put_varint(out, u64::from(controller_id.0));
            put_varint(out, epoch.0);
        }
        OfMessage::PortStatus { switch_id, switch_seq, port, up } => {
            out.push(TAG_PORT_STATUS);
            put_varint(out, switch_id.0);
            put_varint(out, *switch_seq);
            put_varint(out, u64::from(*port));
            out.push(u8::from(*up));
        }
    }
}

fn read_message(r: &mut Reader<'_>) -> Result<OfMessage, WireError> {
    let tag = r.u8()?;
    let msg = match tag {
        TAG_PACKET_IN => OfMessage::PacketIn {
            switch_id: SwitchId(r.varint()?),
            switch_seq: r.varint()?,
            buffer_id: r.u32()?,
            in_port: r.u32()?,
            payload: r.bytes()?.to_vec(),
        },
        TAG_PACKET_OUT => {
            OfMessage::PacketOut { actions: read_actions(r)?, payload: r.bytes()?.to_vec() }
        }
        TAG_FLOW_MOD => OfMessage::FlowMod {
            match_key: read_match(r)?,
            actions: read_actions(r)?,
            priority: r.u16()?,
        },
        TAG_BUNDLE_OPEN => OfMessage::BundleOpen { bundle_id: r.u32()? },
        TAG_BUNDLE_ADD => {
            let bundle_id = r.u32()?;
            let inner = read_message(r)?;
            OfMessage::BundleAdd { bundle_id, inner: Box::new(inner) }
        }
        TAG_BUNDLE_COMMIT => OfMessage::BundleCommit { bundle_id: r.u32()? },
        TAG_BUNDLE_REPLY => OfMessage::BundleReply { bundle_id: r.u32()?, success: r.bool()? },
        TAG_BARRIER_REQUEST => OfMessage::BarrierRequest { xid: r.u32()? },
        TAG_BARRIER_REPLY => OfMessage::BarrierReply { xid: r.u32()? },
        TAG_ROLE_ANNOUNCE => OfMessage::RoleAnnounce {
            controller_id: ControllerId(r.u32()?),
            epoch: Epoch(r.varint()?),
        },
        TAG_PORT_STATUS => OfMessage::PortStatus {
            switch_id: SwitchId(r.varint()?),
            switch_seq: r.varint()?,
            port: r.u32()?,
            up: r.bool()?,
        },
        other => return Err(WireError::UnknownTag(other)),
    };
    Ok(msg)
}

/// Wraps an already-tagged body in a length prefix.
pub fn encode_frame(tagged_body: &[u8]) -> Result<Vec<u8>, WireError> {
    if tagged_body.len() > MAX_FRAME_BODY {
        return Err(WireError::Oversize(tagged_body.len()));
    }
    let mut out = Vec::with_capacity(4 + tagged_body.len());
    out.extend_from_slice(&(tagged_body.len() as u32).to_be_bytes());
    out.extend_from_slice(tagged_body);
    Ok(out)
}

/// Splits one frame off the front of `buf`. Returns the `tag | body` slice and
/// the number of bytes consumed, or `None` if the frame is not complete yet.
pub fn split_frame(buf: &[u8]) -> Result<Option<(&[u8], usize)>, WireError> {
    let Some(len_bytes) = buf.get(..4) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_BODY {
        return Err(WireError::Oversize(len));
    }
    if len == 0 {
        return Err(WireError::Malformed("empty frame"));
    }
    match buf.get(4..4 + len) {
        Some(body) => Ok(Some((body, 4 + len))),
        None => Ok(None),
    }
}

/// Encodes `msg` as one self-delimiting frame. Deterministic.
pub fn encode(msg: &OfMessage) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    let mut body = Vec::with_capacity(32);
    put_message(&mut body, msg);
    encode_frame(&body)
}

/// Decodes the first frame in `buf`.
///
/// `Ok(None)` means the frame is incomplete and more bytes are needed. On
/// success the number of consumed bytes is returned; anything after the frame
/// is left untouched.
pub fn decode(buf: &[u8]) -> Result<Option<(OfMessage, usize)>, WireError> {
    let Some((body, consumed)) = split_frame(buf)? else {
        return Ok(None);
    };
    let mut r = Reader::new(body);
    let msg = read_message(&mut r)?;
    if !r.is_empty() {
        return Err(WireError::Malformed("trailing bytes inside frame"));
    }
    msg.validate()?;
    Ok(Some((msg, consumed)))
}

/// Accumulates stream bytes and yields complete frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete OpenFlow message, if any.
    pub fn next_message(&mut self) -> Result<Option<OfMessage>, WireError> {
        match decode(&self.buf)? {
            Some((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }

    /// Next complete raw `tag | body` frame, if any.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        match split_frame(&self.buf)? {
            Some((body, used)) => {
                let body = body.to_vec();
                self.buf.drain(..used);
                Ok(Some(body))
            }
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barrier_zero_frame_bytes() {
        let f = encode(&OfMessage::BarrierRequest { xid: 0 }).unwrap();
        assert_eq!(f, vec![0, 0, 0, 2, TAG_BARRIER_REQUEST, 0]);
    }

    #[test]
    fn unknown_tag_is_protocol_error() {
        assert_eq!(decode(&[0, 0, 0, 1, 0xff]), Err(WireError::UnknownTag(0xff)));
    }

    #[test]
    fn short_buffer_needs_more() {
        assert_eq!(decode(&[0, 0]), Ok(None));
        let f = encode(&OfMessage::BundleOpen { bundle_id: 300 }).unwrap();
        assert_eq!(decode(&f[..f.len() - 1]), Ok(None));
    }

    #[test]
    fn trailing_bytes_untouched() {
        let mut f = encode(&OfMessage::BarrierReply { xid: 9 }).unwrap();
        let n = f.len();
        f.extend_from_slice(&[1, 2, 3]);
        let (m, used) = decode(&f).unwrap().unwrap();
        assert_eq!(m, OfMessage::BarrierReply { xid: 9 });
        assert_eq!(used, n);
        assert_eq!(&f[used..], &[1, 2, 3]);
    }

    #[test]
    fn oversize_payload_rejected() {
        let m = OfMessage::PacketOut { actions: vec![], payload: vec![0; MAX_FRAME_BODY + 1] };
        assert!(matches!(encode(&m), Err(WireError::Oversize(_))));
    }

    #[test]
    fn oversize_length_field_rejected() {
        let mut f = ((MAX_FRAME_BODY + 1) as u32).to_be_bytes().to_vec();
        f.push(TAG_BARRIER_REPLY);
        assert!(matches!(decode(&f), Err(WireError::Oversize(_))));
    }

    #[test]
    fn non_minimal_varint_rejected() {
        // xid 0 written as 0x80 0x00
        assert!(decode(&[0, 0, 0, 3, TAG_BARRIER_REQUEST, 0x80, 0x00]).is_err());
    }

    #[test]
    fn varint_boundaries() {
        for v in [0u64, 1, 127, 128, 16383, 16384, u64::from(u32::MAX), u64::MAX] {
            let mut out = Vec::new();
            put_varint(&mut out, v);
            let mut r = Reader::new(&out);
            assert_eq!(r.varint().unwrap(), v);
            assert!(r.is_empty());
        }
    }

    #[test]
    fn frame_decoder_handles_split_reads() {
        let a = encode(&OfMessage::BundleCommit { bundle_id: 5 }).unwrap();
        let b = encode(&OfMessage::BarrierRequest { xid: 77 }).unwrap();
        let mut all = a.clone();
        all.extend_from_slice(&b);
        let mut d = FrameDecoder::new();
        d.extend(&all[..3]);
        assert_eq!(d.next_message().unwrap(), None);
        d.extend(&all[3..]);
        assert_eq!(d.next_message().unwrap(), Some(OfMessage::BundleCommit { bundle_id: 5 }));
        assert_eq!(d.next_message().unwrap(), Some(OfMessage::BarrierRequest { xid: 77 }));
        assert_eq!(d.next_message().unwrap(), None);
        assert_eq!(d.buffered(), 0);
    }
}
