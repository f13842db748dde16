//! Timestamped observations emitted by every actor and consumed by the checker.
//!
//! One record per line when written as JSONL. Field names match the record
//! struct; optional fields are omitted when absent.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ControllerId, Epoch, EventId, Nanos, SwitchId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Controller(ControllerId),
    Switch(SwitchId),
    Coord,
    Harness,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Controller(c) => write!(f, "controller:{}", c.0),
            Actor::Switch(s) => write!(f, "switch:{}", s.0),
            Actor::Coord => f.write_str("coord"),
            Actor::Harness => f.write_str("harness"),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coord" => return Ok(Actor::Coord),
            "harness" => return Ok(Actor::Harness),
            _ => {}
        }
        let (kind, id) = s.split_once(':').ok_or_else(|| format!("bad actor {s:?}"))?;
        let bad = |_| format!("bad actor {s:?}");
        match kind {
            "controller" => Ok(Actor::Controller(ControllerId(id.parse().map_err(bad)?))),
            "switch" => Ok(Actor::Switch(SwitchId(id.parse().map_err(bad)?))),
            _ => Err(format!("bad actor {s:?}")),
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    // harness
    Scenario,
    FaultFired,
    RunEnd,
    // switch
    PacketIn,
    Executed,
    BundleDiscarded,
    BundleRejected,
    SwitchCrashed,
    // coordination service
    Logged,
    LeaderElected,
    SessionExpired,
    AppendRejected,
    // controller
    EventCollected,
    IdAssigned,
    MarkerSeen,
    Delivered,
    BundleCommitted,
    ProcessedLogged,
    RoleChanged,
    BarrierSent,
    ProbeSkip,
    ProbeResend,
    AppError,
    Crashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub kind: TraceKind,
    pub actor: Actor,
    #[serde(default)]
    pub epoch: Epoch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<EventId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_id: Option<SwitchId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_id: Option<u32>,
    pub timestamp: Nanos,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

impl TraceRecord {
    pub fn new(kind: TraceKind, actor: Actor, timestamp: Nanos) -> Self {
        TraceRecord {
            kind,
            actor,
            epoch: Epoch(0),
            event_id: None,
            switch_id: None,
            switch_seq: None,
            bundle_id: None,
            timestamp,
            detail: serde_json::Value::Null,
        }
    }

    pub fn epoch(mut self, e: Epoch) -> Self {
        self.epoch = e;
        self
    }

    pub fn event(mut self, id: EventId) -> Self {
        self.event_id = Some(id);
        self
    }

    pub fn switch(mut self, s: SwitchId) -> Self {
        self.switch_id = Some(s);
        self
    }

    pub fn seq(mut self, seq: u64) -> Self {
        self.switch_seq = Some(seq);
        self
    }

    pub fn bundle(mut self, b: u32) -> Self {
        self.bundle_id = Some(b);
        self
    }

    pub fn detail(mut self, d: serde_json::Value) -> Self {
        self.detail = d;
        self
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn to_jsonl(records: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_jsonl(&mut out, records).expect("writing to a Vec cannot fail");
    out
}

/// Parses a JSONL trace. Blank lines are skipped; line numbers are 1-based.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actor_text_round_trip() {
        for a in [Actor::Controller(ControllerId(2)), Actor::Switch(SwitchId(9)), Actor::Coord, Actor::Harness] {
            assert_eq!(a.to_string().parse::<Actor>().unwrap(), a);
        }
        assert!("router:1".parse::<Actor>().is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = to_jsonl(&[TraceRecord::new(TraceKind::RunEnd, Actor::Harness, 5)]);
        let mut text = good.clone();
        text.extend_from_slice(b"{not json}\n");
        match read_jsonl(&text[..]) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(read_jsonl(&good[..]).unwrap().len(), 1);
    }

    #[test]
    fn optional_fields_omitted() {
        let r = TraceRecord::new(TraceKind::Delivered, Actor::Controller(ControllerId(1)), 10).event(EventId(3));
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"event_id\":3"));
        assert!(!s.contains("bundle_id"));
    }
}
