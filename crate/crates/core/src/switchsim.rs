//! Simulated OpenFlow switch.
//!
//! The switch is a plain state machine: each call consumes one input (an
//! injected packet, a controller message, a disconnect) and returns the
//! effects it produces. Transports are responsible for per-connection FIFO
//! delivery; the switch processes every message to completion before the next
//! one, so a `BarrierReply` always follows everything received before it.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ofwire::{Action, MatchKey, OfMessage};
use crate::trace::{Actor, TraceKind, TraceRecord};
use crate::types::{ConnId, ControllerId, Nanos, SwitchId};

/// `in_port` used for packets the switch re-emits on behalf of a controller.
pub const PORT_CONTROLLER: u32 = 0xffff_fffd;
/// `buffer_id` meaning "not buffered".
pub const NO_BUFFER: u32 = 0xffff_ffff;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub match_key: MatchKey,
    pub actions: Vec<Action>,
    pub priority: u16,
}

/// Rules kept in priority order; among equal priorities, older rules win.
#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    rules: Vec<FlowRule>,
}

impl FlowTable {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    /// Adds a rule. A rule with identical match and priority is overwritten in place.
    pub fn insert(&mut self, rule: FlowRule) {
        if let Some(existing) = self
            .rules
            .iter_mut()
            .find(|r| r.priority == rule.priority && r.match_key == rule.match_key)
        {
            existing.actions = rule.actions;
            return;
        }
        // after every rule with priority >= new one, keeping insertion order for ties
        let pos = self.rules.partition_point(|r| r.priority >= rule.priority);
        self.rules.insert(pos, rule);
    }

    pub fn lookup(&self, in_port: u32, payload: &[u8]) -> Option<&FlowRule> {
        self.rules.iter().find(|r| r.match_key.matches(in_port, payload))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleState {
    Open,
    Committed,
    Discarded,
}

#[derive(Debug, Clone)]
pub struct StagedBundle {
    pub bundle_id: u32,
    pub owner_conn: ConnId,
    pub messages: Vec<OfMessage>,
    pub state: BundleState,
}

/// Where an executed command came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "via", rename_all = "snake_case")]
pub enum Origin {
    Bundle { conn: ConnId, bundle_id: u32 },
    Direct { conn: ConnId },
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Executed {
    pub index: u64,
    pub command: OfMessage,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SwitchEffect {
    Send { conn: ConnId, msg: OfMessage },
    /// The switch closed this connection (crash).
    Close { conn: ConnId },
    /// A packet left on a data port.
    Transmit { port: u32, payload: Vec<u8> },
    Trace(TraceRecord),
}

#[derive(Debug, Clone, Copy)]
struct Conn {
    id: ConnId,
    controller: ControllerId,
}

/// Counters read by the benchmark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchCounters {
    /// Commit requests received plus unbundled PacketOuts received.
    pub responses: u64,
    pub packet_ins: u64,
    pub commands_executed: u64,
}

#[derive(Debug)]
pub struct SwitchState {
    switch_id: SwitchId,
    flow_table: FlowTable,
    bundles: BTreeMap<(ConnId, u32), StagedBundle>,
    conns: Vec<Conn>,
    next_conn: u64,
    next_switch_seq: u64,
    executed_log: Vec<Executed>,
    crashed: bool,
    tracing: bool,
    keep_log: bool,
    counters: SwitchCounters,
}

impl SwitchState {
    pub fn new(switch_id: SwitchId) -> Self {
        SwitchState {
            switch_id,
            flow_table: FlowTable::default(),
            bundles: BTreeMap::new(),
            conns: Vec::new(),
            next_conn: 1,
            next_switch_seq: 1,
            executed_log: Vec::new(),
            crashed: false,
            tracing: true,
            keep_log: true,
            counters: SwitchCounters::default(),
        }
    }

    /// Disables trace records and the in-memory executed log (benchmarks).
    pub fn set_observability(&mut self, tracing: bool, keep_log: bool) {
        self.tracing = tracing;
        self.keep_log = keep_log;
    }

    pub fn switch_id(&self) -> SwitchId {
        self.switch_id
    }

    pub fn flow_table(&self) -> &FlowTable {
        &self.flow_table
    }

    pub fn executed_log(&self) -> &[Executed] {
        &self.executed_log
    }

    pub fn counters(&self) -> SwitchCounters {
        self.counters
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    pub fn live_conns(&self) -> Vec<ConnId> {
        self.conns.iter().map(|c| c.id).collect()
    }

    pub fn controller_of(&self, conn: ConnId) -> Option<ControllerId> {
        self.conns.iter().find(|c| c.id == conn).map(|c| c.controller)
    }

    pub fn open_bundles(&self) -> impl Iterator<Item = &StagedBundle> {
        self.bundles.values().filter(|b| b.state == BundleState::Open)
    }

    /// Registers a new controller connection instance.
    pub fn connect(&mut self, controller: ControllerId) -> ConnId {
        let id = ConnId(self.next_conn);
        self.next_conn += 1;
        if !self.crashed {
            self.conns.push(Conn { id, controller });
        }
        id
    }

    fn rec(&self, kind: TraceKind, now: Nanos) -> TraceRecord {
        TraceRecord::new(kind, Actor::Switch(self.switch_id), now).switch(self.switch_id)
    }

    /// Emits one PacketIn, with a single fresh `switch_seq`, on every live connection.
    fn emit_packet_in(&mut self, in_port: u32, buffer_id: u32, payload: Vec<u8>, source: &str, now: Nanos, fx: &mut Vec<SwitchEffect>) {
        let seq = self.next_switch_seq;
        self.next_switch_seq += 1;
        self.counters.packet_ins += 1;
        if self.tracing {
            let r = self.rec(TraceKind::PacketIn, now).seq(seq).detail(json!({
                "source": source,
                "in_port": in_port,
                "conns": self.conns.len(),
            }));
            fx.push(SwitchEffect::Trace(r));
        }
        let msg = OfMessage::PacketIn { switch_id: self.switch_id, switch_seq: seq, buffer_id, in_port, payload };
        for c in &self.conns {
            fx.push(SwitchEffect::Send { conn: c.id, msg: msg.clone() });
        }
    }

    fn record_executed(&mut self, command: OfMessage, origin: Origin, now: Nanos, fx: &mut Vec<SwitchEffect>) {
        let index = self.counters.commands_executed;
        self.counters.commands_executed += 1;
        if self.tracing {
            let controller = match origin {
                Origin::Bundle { conn, .. } | Origin::Direct { conn } => self.controller_of(conn),
                Origin::Table => None,
            };
            let mut r = self.rec(TraceKind::Executed, now).detail(json!({
                "index": index,
                "origin": origin,
                "controller": controller,
                "command": command,
            }));
            if let Origin::Bundle { bundle_id, .. } = origin {
                r = r.bundle(bundle_id);
            }
            fx.push(SwitchEffect::Trace(r));
        }
        if self.keep_log {
            self.executed_log.push(Executed { index, command, origin });
        }
    }

    fn run_actions(&mut self, actions: &[Action], payload: &[u8], now: Nanos, fx: &mut Vec<SwitchEffect>) {
        for a in actions {
            match a {
                Action::Output(port) => fx.push(SwitchEffect::Transmit { port: *port, payload: payload.to_vec() }),
                Action::OutputController => {
                    self.emit_packet_in(PORT_CONTROLLER, NO_BUFFER, payload.to_vec(), "controller", now, fx)
                }
                Action::Drop => {}
            }
        }
    }

    /// Applies one command and records it in the executed log.
    fn apply(&mut self, command: OfMessage, origin: Origin, now: Nanos, fx: &mut Vec<SwitchEffect>) {
        match &command {
            OfMessage::FlowMod { match_key, actions, priority } => {
                self.flow_table.insert(FlowRule { match_key: *match_key, actions: actions.clone(), priority: *priority });
                self.record_executed(command, origin, now, fx);
            }
            OfMessage::PacketOut { actions, payload } => {
                let (actions, payload) = (actions.clone(), payload.clone());
                // the record precedes any PacketIn the actions trigger
                self.record_executed(command, origin, now, fx);
                self.run_actions(&actions, &payload, now, fx);
            }
            _ => unreachable!("only commands are applied"),
        }
    }

    /// A packet arrives on a data port.
    pub fn inject_packet(&mut self, in_port: u32, payload: Vec<u8>, now: Nanos) -> Vec<SwitchEffect> {
        let mut fx = Vec::new();
        if self.crashed {
            return fx;
        }
        if let Some(rule) = self.flow_table.lookup(in_port, &payload) {
            let cmd = OfMessage::PacketOut { actions: rule.actions.clone(), payload };
            self.apply(cmd, Origin::Table, now, &mut fx);
        } else {
            let buffer_id = (self.next_switch_seq & 0xffff_ffff) as u32;
            self.emit_packet_in(in_port, buffer_id, payload, "miss", now, &mut fx);
        }
        fx
    }

    /// Port state change, reported to every controller.
    pub fn port_status(&mut self, port: u32, up: bool) -> Vec<SwitchEffect> {
        if self.crashed {
            return Vec::new();
        }
        let switch_seq = self.next_switch_seq;
        self.next_switch_seq += 1;
        let msg = OfMessage::PortStatus { switch_id: self.switch_id, switch_seq, port, up };
        self.conns.iter().map(|c| SwitchEffect::Send { conn: c.id, msg: msg.clone() }).collect()
    }

    fn reply(&self, conn: ConnId, bundle_id: u32, success: bool, now: Nanos, fx: &mut Vec<SwitchEffect>) {
        if !success && self.tracing {
            fx.push(SwitchEffect::Trace(self.rec(TraceKind::BundleRejected, now).bundle(bundle_id).detail(json!({ "conn": conn }))));
        }
        fx.push(SwitchEffect::Send { conn, msg: OfMessage::BundleReply { bundle_id, success } });
    }

    pub fn on_controller_msg(&mut self, conn: ConnId, msg: OfMessage, now: Nanos) -> Vec<SwitchEffect> {
        let mut fx = Vec::new();
        if self.crashed || !self.conns.iter().any(|c| c.id == conn) {
            return fx;
        }
        match msg {
            OfMessage::BundleOpen { bundle_id } => {
                match self.bundles.entry((conn, bundle_id)) {
                    Entry::Occupied(_) => self.reply(conn, bundle_id, false, now, &mut fx),
                    Entry::Vacant(v) => {
                        v.insert(StagedBundle { bundle_id, owner_conn: conn, messages: Vec::new(), state: BundleState::Open });
                    }
                }
            }
            OfMessage::BundleAdd { bundle_id, inner } => match self.bundles.get_mut(&(conn, bundle_id)) {
                Some(b) if b.state == BundleState::Open && inner.is_command() => b.messages.push(*inner),
                _ => self.reply(conn, bundle_id, false, now, &mut fx),
            },
            OfMessage::BundleCommit { bundle_id } => {
                self.counters.responses += 1;
                match self.bundles.remove(&(conn, bundle_id)) {
                    Some(b) if b.state == BundleState::Open => {
                        for m in b.messages {
                            self.apply(m, Origin::Bundle { conn, bundle_id }, now, &mut fx);
                        }
                        self.reply(conn, bundle_id, true, now, &mut fx);
                    }
                    _ => self.reply(conn, bundle_id, false, now, &mut fx),
                }
            }
            OfMessage::BarrierRequest { xid } => {
                fx.push(SwitchEffect::Send { conn, msg: OfMessage::BarrierReply { xid } });
            }
            m @ (OfMessage::PacketOut { .. } | OfMessage::FlowMod { .. }) => {
                if matches!(m, OfMessage::PacketOut { .. }) {
                    self.counters.responses += 1;
                }
                self.apply(m, Origin::Direct { conn }, now, &mut fx);
            }
            // bookkeeping only; roles do not change switch behaviour here
            OfMessage::RoleAnnounce { .. } => {}
            // switch-to-controller messages arriving from a controller are ignored
            OfMessage::PacketIn { .. }
            | OfMessage::PortStatus { .. }
            | OfMessage::BundleReply { .. }
            | OfMessage::BarrierReply { .. } => {}
        }
        fx
    }

    /// The controller behind `conn` went away. Its open bundles are discarded.
    pub fn on_controller_disconnect(&mut self, conn: ConnId, now: Nanos) -> Vec<SwitchEffect> {
        let mut fx = Vec::new();
        self.conns.retain(|c| c.id != conn);
        let keys: Vec<_> = self.bundles.keys().filter(|(c, _)| *c == conn).copied().collect();
        for key in keys {
            let b = self.bundles.remove(&key).expect("key listed");
            if self.tracing {
                fx.push(SwitchEffect::Trace(
                    self.rec(TraceKind::BundleDiscarded, now)
                        .bundle(b.bundle_id)
                        .detail(json!({ "conn": conn, "staged": b.messages.len() })),
                ));
            }
        }
        fx
    }

    /// Fail-stop crash: every connection is closed, staged state is lost.
    pub fn crash(&mut self, now: Nanos) -> Vec<SwitchEffect> {
        let mut fx = Vec::new();
        if self.crashed {
            return fx;
        }
        self.crashed = true;
        if self.tracing {
            fx.push(SwitchEffect::Trace(self.rec(TraceKind::SwitchCrashed, now)));
        }
        self.bundles.clear();
        for c in self.conns.drain(..) {
            fx.push(SwitchEffect::Close { conn: c.id });
        }
        fx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofwire::{make_commit_marker, parse_commit_marker};
    use crate::types::{Epoch, EventId, MacAddr};

    fn sends(fx: &[SwitchEffect]) -> Vec<(ConnId, OfMessage)> {
        fx.iter()
            .filter_map(|e| match e {
                SwitchEffect::Send { conn, msg } => Some((*conn, msg.clone())),
                _ => None,
            })
            .collect()
    }

    fn flowmod(port: u32) -> OfMessage {
        OfMessage::FlowMod {
            match_key: MatchKey { eth_dst: Some(MacAddr([2, 0, 0, 0, 0, 2])), ..Default::default() },
            actions: vec![Action::Output(port)],
            priority: 10,
        }
    }

    fn add(bundle_id: u32, m: OfMessage) -> OfMessage {
        OfMessage::BundleAdd { bundle_id, inner: Box::new(m) }
    }

    fn pkt_to(dst: u8) -> Vec<u8> {
        vec![2, 0, 0, 0, 0, dst, 2, 0, 0, 0, 0, 1, 8, 0]
    }

    #[test]
    fn table_miss_fans_out_one_seq() {
        let mut sw = SwitchState::new(SwitchId(1));
        let a = sw.connect(ControllerId(1));
        let b = sw.connect(ControllerId(2));
        let out = sends(&sw.inject_packet(1, pkt_to(2), 0));
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, a);
        assert_eq!(out[1].0, b);
        assert_eq!(out[0].1, out[1].1);
        assert!(matches!(out[0].1, OfMessage::PacketIn { switch_seq: 1, .. }));
    }

    #[test]
    fn fan_out_counts_live_conns_only() {
        let mut sw = SwitchState::new(SwitchId(1));
        let conns: Vec<_> = (1..=3).map(|c| sw.connect(ControllerId(c))).collect();
        sw.on_controller_disconnect(conns[1], 0);
        assert_eq!(sends(&sw.inject_packet(1, pkt_to(2), 0)).len(), 2);
    }

    #[test]
    fn table_hit_executes_locally() {
        let mut sw = SwitchState::new(SwitchId(1));
        let c = sw.connect(ControllerId(1));
        sw.on_controller_msg(c, flowmod(2), 0);
        let fx = sw.inject_packet(1, pkt_to(2), 0);
        assert!(sends(&fx).is_empty());
        assert!(fx.contains(&SwitchEffect::Transmit { port: 2, payload: pkt_to(2) }));
        assert_eq!(sw.executed_log().len(), 2);
        assert_eq!(sw.executed_log()[1].origin, Origin::Table);
    }

    #[test]
    fn bundle_commit_applies_in_order_then_replies() {
        let mut sw = SwitchState::new(SwitchId(1));
        let owner = sw.connect(ControllerId(1));
        let other = sw.connect(ControllerId(2));
        let marker = make_commit_marker(Epoch(1), &[EventId(4)]).unwrap();
        assert!(sw.on_controller_msg(owner, OfMessage::BundleOpen { bundle_id: 5 }, 0).is_empty());
        sw.on_controller_msg(owner, add(5, flowmod(3)), 0);
        sw.on_controller_msg(owner, add(5, marker.clone()), 0);
        assert!(sw.flow_table().is_empty());
        let out = sends(&sw.on_controller_msg(owner, OfMessage::BundleCommit { bundle_id: 5 }, 0));
        assert_eq!(sw.flow_table().len(), 1);
        // marker PacketIn to both controllers, then the reply to the owner only
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].0, owner);
        assert_eq!(out[1].0, other);
        let m = parse_commit_marker(&out[1].1).unwrap().unwrap();
        assert_eq!(m.event_ids, vec![EventId(4)]);
        assert_eq!(out[2], (owner, OfMessage::BundleReply { bundle_id: 5, success: true }));
        let log = sw.executed_log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].command, flowmod(3));
        assert_eq!(log[1].command, marker);
        assert!(log.iter().all(|e| e.origin == Origin::Bundle { conn: owner, bundle_id: 5 }));
    }

    #[test]
    fn commit_unknown_bundle_fails() {
        let mut sw = SwitchState::new(SwitchId(1));
        let c = sw.connect(ControllerId(1));
        let out = sends(&sw.on_controller_msg(c, OfMessage::BundleCommit { bundle_id: 99 }, 0));
        assert_eq!(out, vec![(c, OfMessage::BundleReply { bundle_id: 99, success: false })]);
        let out = sends(&sw.on_controller_msg(c, add(98, flowmod(1)), 0));
        assert_eq!(out, vec![(c, OfMessage::BundleReply { bundle_id: 98, success: false })]);
    }

    #[test]
    fn duplicate_open_is_rejected() {
        let mut sw = SwitchState::new(SwitchId(1));
        let c = sw.connect(ControllerId(1));
        sw.on_controller_msg(c, OfMessage::BundleOpen { bundle_id: 1 }, 0);
        let out = sends(&sw.on_controller_msg(c, OfMessage::BundleOpen { bundle_id: 1 }, 0));
        assert_eq!(out, vec![(c, OfMessage::BundleReply { bundle_id: 1, success: false })]);
        // same id on another connection is a different bundle
        let d = sw.connect(ControllerId(2));
        assert!(sends(&sw.on_controller_msg(d, OfMessage::BundleOpen { bundle_id: 1 }, 0)).is_empty());
    }

    #[test]
    fn barrier_does_not_wait_for_open_bundle() {
        let mut sw = SwitchState::new(SwitchId(1));
        let c = sw.connect(ControllerId(1));
        sw.on_controller_msg(c, OfMessage::BundleOpen { bundle_id: 5 }, 0);
        sw.on_controller_msg(c, add(5, flowmod(1)), 0);
        let out = sends(&sw.on_controller_msg(c, OfMessage::BarrierRequest { xid: 8 }, 0));
        assert_eq!(out, vec![(c, OfMessage::BarrierReply { xid: 8 })]);
        assert_eq!(sw.open_bundles().count(), 1);
        assert!(sw.flow_table().is_empty());
    }

    #[test]
    fn disconnect_discards_open_bundles() {
        let mut sw = SwitchState::new(SwitchId(1));
        let c = sw.connect(ControllerId(1));
        sw.on_controller_msg(c, OfMessage::BundleOpen { bundle_id: 5 }, 0);
        for p in 1..=3 {
            sw.on_controller_msg(c, add(5, flowmod(p)), 0);
        }
        sw.on_controller_disconnect(c, 0);
        assert!(sw.flow_table().is_empty());
        assert_eq!(sw.open_bundles().count(), 0);
        assert!(sw.live_conns().is_empty());
        // a commit arriving on the dead connection is ignored
        assert!(sw.on_controller_msg(c, OfMessage::BundleCommit { bundle_id: 5 }, 0).is_empty());
    }

    #[test]
    fn reconnect_gets_fresh_bundle_scope() {
        let mut sw = SwitchState::new(SwitchId(1));
        let c = sw.connect(ControllerId(1));
        sw.on_controller_msg(c, OfMessage::BundleOpen { bundle_id: 5 }, 0);
        sw.on_controller_disconnect(c, 0);
        let c2 = sw.connect(ControllerId(1));
        assert_ne!(c, c2);
        assert!(sends(&sw.on_controller_msg(c2, OfMessage::BundleOpen { bundle_id: 5 }, 0)).is_empty());
    }

    #[test]
    fn crash_closes_everything_without_reply() {
        let mut sw = SwitchState::new(SwitchId(1));
        let a = sw.connect(ControllerId(1));
        let b = sw.connect(ControllerId(2));
        sw.on_controller_msg(a, OfMessage::BundleOpen { bundle_id: 1 }, 0);
        let fx = sw.crash(0);
        assert!(sends(&fx).is_empty());
        let closed: Vec<_> = fx
            .iter()
            .filter_map(|e| if let SwitchEffect::Close { conn } = e { Some(*conn) } else { None })
            .collect();
        assert_eq!(closed, vec![a, b]);
        assert!(sw.on_controller_msg(a, OfMessage::BundleCommit { bundle_id: 1 }, 0).is_empty());
        assert!(sw.inject_packet(1, pkt_to(2), 0).is_empty());
    }

    #[test]
    fn flow_table_priority_and_ties() {
        let mut t = FlowTable::default();
        let any = MatchKey::default();
        t.insert(FlowRule { match_key: any, actions: vec![Action::Output(1)], priority: 5 });
        t.insert(FlowRule { match_key: MatchKey { in_port: Some(1), ..any }, actions: vec![Action::Output(2)], priority: 5 });
        t.insert(FlowRule { match_key: MatchKey { in_port: Some(9), ..any }, actions: vec![Action::Output(3)], priority: 7 });
        // tie at priority 5: older wins
        assert_eq!(t.lookup(1, &[]).unwrap().actions, vec![Action::Output(1)]);
        assert_eq!(t.lookup(9, &[]).unwrap().actions, vec![Action::Output(3)]);
        t.insert(FlowRule { match_key: any, actions: vec![Action::Drop], priority: 5 });
        assert_eq!(t.len(), 3);
        assert_eq!(t.lookup(1, &[]).unwrap().actions, vec![Action::Drop]);
    }
}
