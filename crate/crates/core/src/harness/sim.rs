//! Deterministic discrete-event transport.
//!
//! Every actor (controller, switch, coordination service) owns an inbox and
//! handles one message at a time; the cost model decides how long each
//! message occupies it, and outputs leave when it finishes. Channels are
//! FIFO per (sender, receiver) pair with seeded latency jitter, which is the
//! only source of cross-channel reordering. A crash lets in-flight messages
//! land before the peer sees the connection close.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::CostModel;
use super::workload;
use crate::coord::{ClientId, CoordFrontend, CoordRequest, CoordService};
use crate::ctrl::{Input, Output, Replica, ReplicaConfig, ReplicaError, Role};
use crate::switchsim::{SwitchEffect, SwitchState};
use crate::trace::{Actor, TraceKind, TraceRecord};
use crate::types::{ConnId, ControllerId, Nanos, SwitchId, MILLIS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Node {
    Ctrl(usize),
    Switch(usize),
    Coord,
}

#[derive(Debug)]
enum Item {
    Start,
    Replica(Input),
    Kill,
    FromCtrl { conn: ConnId, msg: crate::ofwire::OfMessage },
    CtrlClosed { conn: ConnId },
    Inject { in_port: u32, payload: Vec<u8> },
    CrashSwitch,
    Request { client: ClientId, req: CoordRequest },
    CoordTick,
}

#[derive(Debug)]
enum Ev {
    Arrive { to: Node, item: Item, counted: bool },
    Run(Node),
    KillMaster,
}

#[derive(Debug, Default)]
struct NodeState {
    inbox: VecDeque<(Item, bool)>,
    busy_until: Nanos,
    scheduled: bool,
}

#[derive(Debug, Clone)]
pub struct SimParams {
    pub n_switches: usize,
    pub replicas: Vec<ReplicaConfig>,
    pub cost: CostModel,
    pub seed: u64,
    pub coord_tick: Nanos,
    pub fencing: bool,
    pub tracing: bool,
    /// Replica i starts at `i * stagger`, so replica 0 is elected first.
    pub stagger: Nanos,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("no quiescence by {0} ns")]
    Timeout(Nanos),
    #[error("controller {controller}: {error}")]
    Replica { controller: ControllerId, error: ReplicaError },
}

#[derive(Debug, Clone, Copy)]
struct ClosedLoop {
    hosts: u8,
}

pub struct Sim {
    now: Nanos,
    seq: u64,
    queue: BTreeMap<(Nanos, u64), Ev>,
    rng: ChaCha8Rng,
    cost: CostModel,
    replicas: Vec<Replica>,
    dead: Vec<bool>,
    switches: Vec<SwitchState>,
    coord: CoordFrontend,
    conn: Vec<Vec<ConnId>>,
    conn_owner: BTreeMap<(usize, ConnId), usize>,
    nodes: BTreeMap<Node, NodeState>,
    channels: BTreeMap<(Node, Node), Nanos>,
    inflight: u64,
    trace: Vec<TraceRecord>,
    tracing: bool,
    coord_tick: Nanos,
    closed_loop: Option<ClosedLoop>,
    next_packet: Vec<u64>,
    responses: Vec<u64>,
    fatal: Option<SimError>,
}

impl Sim {
    pub fn new(p: SimParams) -> Self {
        let mut coord_svc = CoordService::new();
        coord_svc.set_tracing(p.tracing);
        if !p.fencing {
            coord_svc.disable_fencing();
        }
        let replicas: Vec<Replica> = p.replicas.iter().cloned().map(Replica::new).collect();
        let n_ctrl = replicas.len();
        let mut switches: Vec<SwitchState> = (0..p.n_switches).map(|s| SwitchState::new(SwitchId(s as u64 + 1))).collect();
        let mut conn = vec![Vec::new(); n_ctrl];
        let mut conn_owner = BTreeMap::new();
        for (s, sw) in switches.iter_mut().enumerate() {
            sw.set_observability(p.tracing, p.tracing);
            for (c, r) in replicas.iter().enumerate() {
                let id = sw.connect(r.id());
                conn[c].push(id);
                conn_owner.insert((s, id), c);
            }
        }
        let mut sim = Sim {
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(p.seed),
            cost: p.cost,
            dead: vec![false; n_ctrl],
            replicas,
            switches,
            coord: CoordFrontend::new(coord_svc),
            conn,
            conn_owner,
            nodes: BTreeMap::new(),
            channels: BTreeMap::new(),
            inflight: 0,
            trace: Vec::new(),
            tracing: p.tracing,
            coord_tick: p.coord_tick.max(1),
            closed_loop: None,
            next_packet: vec![0; p.n_switches],
            responses: vec![0; p.n_switches],
            fatal: None,
        };
        for c in 0..n_ctrl {
            for s in 0..p.n_switches {
                sim.schedule(0, Node::Ctrl(c), Item::Replica(Input::SwitchConnected { switch: SwitchId(s as u64 + 1) }), true);
            }
            sim.schedule(c as Nanos * p.stagger, Node::Ctrl(c), Item::Start, true);
        }
        sim.schedule(sim.coord_tick, Node::Coord, Item::CoordTick, false);
        sim
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn switches(&self) -> &[SwitchState] {
        &self.switches
    }

    pub fn coord(&self) -> &CoordService {
        self.coord.service()
    }

    pub fn is_dead(&self, ctrl: usize) -> bool {
        self.dead[ctrl]
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn push_trace(&mut self, r: TraceRecord) {
        self.trace.push(r);
    }

    /// Responses counted at all switches so far.
    pub fn responses(&self) -> u64 {
        self.switches.iter().map(|s| s.counters().responses).sum()
    }

    fn schedule(&mut self, at: Nanos, to: Node, item: Item, counted: bool) {
        if counted {
            self.inflight += 1;
        }
        self.seq += 1;
        self.queue.insert((at, self.seq), Ev::Arrive { to, item, counted });
    }

    fn latency(&self, from: Node, to: Node) -> Nanos {
        match (from, to) {
            (Node::Coord, _) | (_, Node::Coord) => self.cost.coord_latency,
            _ => self.cost.link_latency,
        }
    }

    fn send(&mut self, from: Node, to: Node, depart: Nanos, item: Item, counted: bool) {
        let jitter = if self.cost.jitter > 0 { self.rng.gen_range(0..=self.cost.jitter) } else { 0 };
        let earliest = depart + self.latency(from, to) + jitter;
        let last = self.channels.entry((from, to)).or_insert(0);
        let at = earliest.max(*last);
        *last = at;
        self.schedule(at, to, item, counted);
    }

    pub fn inject(&mut self, at: Nanos, switch: usize, in_port: u32, payload: Vec<u8>) {
        self.schedule(at, Node::Switch(switch), Item::Inject { in_port, payload }, true);
    }

    pub fn schedule_kill(&mut self, at: Nanos, ctrl: usize) {
        self.schedule(at, Node::Ctrl(ctrl), Item::Kill, true);
    }

    /// Kills whichever replica is master at `at`.
    pub fn schedule_kill_master(&mut self, at: Nanos) {
        self.inflight += 1;
        self.seq += 1;
        self.queue.insert((at, self.seq), Ev::KillMaster);
    }

    /// Index of the live master, if any.
    pub fn master(&self) -> Option<usize> {
        (0..self.replicas.len()).find(|&c| !self.dead[c] && self.replicas[c].role() == Role::Master)
    }

    fn kill_now(&mut self, c: usize) {
        if self.dead[c] {
            return;
        }
        let now = self.now;
        let outs = self.replicas[c].kill(now);
        self.dispatch_ctrl(c, now, outs);
        self.crash_ctrl(c, now, "at-time");
    }

    pub fn schedule_switch_crash(&mut self, at: Nanos, switch: usize) {
        self.schedule(at, Node::Switch(switch), Item::CrashSwitch, true);
    }

    /// Cbench-style load: each switch keeps `window` packets outstanding and
    /// injects a new one for every response it counts.
    pub fn start_closed_loop(&mut self, at: Nanos, window: u64, hosts: u8) {
        self.closed_loop = Some(ClosedLoop { hosts });
        for s in 0..self.switches.len() {
            for _ in 0..window {
                self.loop_packet(at, s);
            }
        }
    }

    fn loop_packet(&mut self, at: Nanos, s: usize) {
        let hosts = self.closed_loop.map_or(2, |c| c.hosts);
        let k = self.next_packet[s];
        self.next_packet[s] += 1;
        let (in_port, payload) = workload::packet(s as u64 + 1, k, hosts, &mut self.rng);
        self.seq += 1;
        self.queue.insert((at, self.seq), Ev::Arrive { to: Node::Switch(s), item: Item::Inject { in_port, payload }, counted: false });
    }

    /// The leader has finished failover and no protocol work is pending.
    pub fn is_quiescent(&self) -> bool {
        if self.inflight > 0 {
            return false;
        }
        let mut master = false;
        for (i, r) in self.replicas.iter().enumerate() {
            if self.dead[i] {
                continue;
            }
            if !r.is_idle() {
                return false;
            }
            master |= r.role() == Role::Master;
        }
        master || self.dead.iter().all(|d| *d)
    }

    pub fn run_until(&mut self, t: Nanos) -> Result<(), SimError> {
        while let Some((&(at, _), _)) = self.queue.first_key_value() {
            if at > t {
                break;
            }
            self.step();
            if let Some(e) = self.fatal.take() {
                return Err(e);
            }
        }
        self.now = self.now.max(t);
        Ok(())
    }

    pub fn run_to_quiescence(&mut self, deadline: Nanos) -> Result<Nanos, SimError> {
        loop {
            if let Some(e) = self.fatal.take() {
                return Err(e);
            }
            if self.is_quiescent() {
                return Ok(self.now);
            }
            match self.queue.first_key_value() {
                Some((&(at, _), _)) if at <= deadline => self.step(),
                _ => return Err(SimError::Timeout(deadline)),
            }
        }
    }

    fn step(&mut self) {
        let Some(((at, _), ev)) = self.queue.pop_first() else {
            return;
        };
        self.now = at;
        match ev {
            Ev::Arrive { to, item, counted } => {
                let node = self.nodes.entry(to).or_default();
                node.inbox.push_back((item, counted));
                if !node.scheduled {
                    node.scheduled = true;
                    let run_at = node.busy_until.max(at);
                    self.seq += 1;
                    self.queue.insert((run_at, self.seq), Ev::Run(to));
                }
            }
            Ev::KillMaster => {
                self.inflight -= 1;
                if let Some(c) = self.master() {
                    self.kill_now(c);
                }
            }
            Ev::Run(node) => {
                let Some((item, counted)) = self.nodes.get_mut(&node).and_then(|n| n.inbox.pop_front()) else {
                    return;
                };
                if counted {
                    self.inflight -= 1;
                }
                let cost = match node {
                    Node::Ctrl(c) => self.run_ctrl(c, item),
                    Node::Switch(s) => self.run_switch(s, item),
                    Node::Coord => self.run_coord(item),
                };
                let done = self.now + cost;
                let st = self.nodes.get_mut(&node).expect("node exists");
                st.busy_until = done;
                if st.inbox.is_empty() {
                    st.scheduled = false;
                } else {
                    self.seq += 1;
                    self.queue.insert((done, self.seq), Ev::Run(node));
                }
            }
        }
    }

    fn input_cost(&self, input: &Input) -> Nanos {
        let c = &self.cost;
        match input {
            Input::SwitchConnected { .. } | Input::SwitchDisconnected { .. } | Input::SwitchMessage { .. } => c.ctrl_rx_of,
            Input::Coord(r) => c.ctrl_coord_reply + c.ctrl_entry_rx * r.entry_count() as Nanos,
            Input::Tick => c.ctrl_tick,
        }
    }

    fn output_cost(&self, outs: &[Output]) -> Nanos {
        let c = &self.cost;
        outs.iter()
            .map(|o| match o {
                Output::ToSwitch { .. } => c.ctrl_tx_of,
                Output::ToCoord(req) | Output::ToCoordDelayed { req, .. } => {
                    c.ctrl_coord_request + c.ctrl_entry_tx * req.entry_count() as Nanos
                }
                _ => 0,
            })
            .sum()
    }

    fn run_ctrl(&mut self, c: usize, item: Item) -> Nanos {
        if self.dead[c] {
            return 0;
        }
        let now = self.now;
        let delivered_before = self.replicas[c].delivered().len();
        let (outs, input_cost) = match item {
            Item::Start => (self.replicas[c].start(now), 0),
            Item::Kill => {
                self.kill_now(c);
                return 0;
            }
            Item::Replica(input) => {
                let cost = self.input_cost(&input);
                match self.replicas[c].handle(input, now) {
                    Ok(outs) => (outs, cost),
                    Err(error) => {
                        self.fatal = Some(SimError::Replica { controller: self.replicas[c].id(), error });
                        return 0;
                    }
                }
            }
            _ => unreachable!("controller item"),
        };
        let delivered = (self.replicas[c].delivered().len() - delivered_before) as Nanos;
        let cost = input_cost + self.output_cost(&outs) + delivered * self.cost.ctrl_deliver;
        self.dispatch_ctrl(c, now + cost, outs);
        cost
    }

    fn dispatch_ctrl(&mut self, c: usize, depart: Nanos, outs: Vec<Output>) {
        let me = Node::Ctrl(c);
        let client = c as ClientId + 1;
        for o in outs {
            match o {
                Output::ToSwitch { switch, msg } => {
                    let s = switch.0 as usize - 1;
                    let conn = self.conn[c][s];
                    self.send(me, Node::Switch(s), depart, Item::FromCtrl { conn, msg }, true);
                }
                Output::ToCoord(req) => {
                    let counted = !matches!(req, CoordRequest::Heartbeat);
                    self.send(me, Node::Coord, depart, Item::Request { client, req }, counted);
                }
                Output::ToCoordDelayed { req, delay } => {
                    let at = depart + self.cost.coord_latency + delay;
                    self.schedule(at, Node::Coord, Item::Request { client, req }, true);
                }
                Output::Trace(r) => self.trace.push(r),
                Output::WakeAt(t) => self.schedule(t.max(depart), me, Item::Replica(Input::Tick), false),
                Output::Crash => self.crash_ctrl(c, depart, "hook"),
            }
        }
    }

    fn crash_ctrl(&mut self, c: usize, at: Nanos, cause: &str) {
        if self.dead[c] {
            return;
        }
        self.dead[c] = true;
        self.trace.push(
            TraceRecord::new(TraceKind::FaultFired, Actor::Harness, at)
                .detail(json!({ "target": Actor::Controller(self.replicas[c].id()), "cause": cause })),
        );
        if let Some(node) = self.nodes.get_mut(&Node::Ctrl(c)) {
            let dropped = node.inbox.iter().filter(|(_, counted)| *counted).count() as u64;
            self.inflight -= dropped;
            node.inbox.clear();
        }
        for s in 0..self.switches.len() {
            let conn = self.conn[c][s];
            self.send(Node::Ctrl(c), Node::Switch(s), at, Item::CtrlClosed { conn }, true);
        }
    }

    fn run_switch(&mut self, s: usize, item: Item) -> Nanos {
        let now = self.now;
        let fx = match item {
            Item::FromCtrl { conn, msg } => self.switches[s].on_controller_msg(conn, msg, now),
            Item::CtrlClosed { conn } => self.switches[s].on_controller_disconnect(conn, now),
            Item::Inject { in_port, payload } => self.switches[s].inject_packet(in_port, payload, now),
            Item::CrashSwitch => {
                self.trace.push(
                    TraceRecord::new(TraceKind::FaultFired, Actor::Harness, now)
                        .detail(json!({ "target": Actor::Switch(SwitchId(s as u64 + 1)), "cause": "at-time" })),
                );
                self.switches[s].crash(now)
            }
            _ => unreachable!("switch item"),
        };
        let cost = self.cost.switch_msg;
        let depart = now + cost;
        let switch = SwitchId(s as u64 + 1);
        for e in fx {
            match e {
                SwitchEffect::Send { conn, msg } => {
                    let c = self.conn_owner[&(s, conn)];
                    self.send(Node::Switch(s), Node::Ctrl(c), depart, Item::Replica(Input::SwitchMessage { switch, msg }), true);
                }
                SwitchEffect::Close { conn } => {
                    let c = self.conn_owner[&(s, conn)];
                    self.send(Node::Switch(s), Node::Ctrl(c), depart, Item::Replica(Input::SwitchDisconnected { switch }), true);
                }
                SwitchEffect::Transmit { .. } => {}
                SwitchEffect::Trace(r) => self.trace.push(r),
            }
        }
        if self.closed_loop.is_some() {
            let total = self.switches[s].counters().responses;
            for _ in self.responses[s]..total {
                self.loop_packet(depart, s);
            }
            self.responses[s] = total;
        }
        cost
    }

    fn run_coord(&mut self, item: Item) -> Nanos {
        let now = self.now;
        let (replies, cost) = match item {
            Item::Request { client, req } => {
                let cost = self.cost.coord_request + self.cost.coord_entry * req.entry_count() as Nanos;
                (self.coord.handle(client, req, now), cost)
            }
            Item::CoordTick => {
                let next = now + self.coord_tick;
                self.schedule(next, Node::Coord, Item::CoordTick, false);
                (self.coord.tick(now), self.cost.switch_msg)
            }
            _ => unreachable!("coord item"),
        };
        if self.tracing {
            let t = self.coord.service_mut().drain_trace();
            self.trace.extend(t);
        }
        let depart = now + cost;
        for (client, reply) in replies {
            let c = client as usize - 1;
            self.send(Node::Coord, Node::Ctrl(c), depart, Item::Replica(Input::Coord(reply)), true);
        }
        cost
    }
}

/// Default spacing between replica start times.
pub const STAGGER: Nanos = MILLIS;
