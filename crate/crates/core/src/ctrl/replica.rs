use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;
use thiserror::Error;

use super::bundle::BundleManager;
use super::config::{ConsistencyMode, FaultPoint, ProtocolBug, ReplicaConfig};
use super::event::{EventMessage, PendingEvent, RamaEvent};
use crate::apps::{build_app, run_apps, App, AppContext};
use crate::coord::{CoordError, CoordReply, CoordRequest, LogBody, LogEntry};
use crate::ofwire::{parse_commit_marker, OfMessage};
use crate::trace::{Actor, TraceKind, TraceRecord};
use crate::types::{ControllerId, Epoch, EventId, Nanos, SessionId, SwitchId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// No leadership decision seen yet; behaves as a slave.
    Starting,
    Slave,
    /// Elected, finishing the previous master's work.
    Promoting,
    Master,
    /// Our session expired; the replica is out of the protocol.
    Fenced,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    SwitchConnected { switch: SwitchId },
    SwitchMessage { switch: SwitchId, msg: OfMessage },
    SwitchDisconnected { switch: SwitchId },
    Coord(CoordReply),
    /// A timer requested through [`Output::WakeAt`] is due.
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    ToSwitch { switch: SwitchId, msg: OfMessage },
    ToCoord(CoordRequest),
    /// Like `ToCoord`, but held in transit for `delay` (fault injection only).
    ToCoordDelayed { req: CoordRequest, delay: Nanos },
    Trace(TraceRecord),
    WakeAt(Nanos),
    /// A fault hook fired: the replica stopped right here.
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplicaError {
    #[error("log has Processed({0}) with no matching event")]
    UnknownProcessed(EventId),
    #[error("switch {switch} rejected bundle {bundle_id}")]
    BundleRejected { switch: SwitchId, bundle_id: u32 },
}

enum Halt {
    Crashed,
    Fatal(ReplicaError),
}

impl From<ReplicaError> for Halt {
    fn from(e: ReplicaError) -> Self {
        Halt::Fatal(e)
    }
}

type Step = Result<(), Halt>;

type Commands = BTreeMap<SwitchId, Vec<OfMessage>>;

#[derive(Debug, Default)]
struct Probe {
    barriers: BTreeMap<u32, SwitchId>,
    held: BTreeMap<EventId, Commands>,
}

/// One controller replica, as a sans-IO state machine.
pub struct Replica {
    cfg: ReplicaConfig,
    apps: Vec<Box<dyn App>>,
    ctx: AppContext,
    role: Role,
    epoch: Epoch,
    leader: Option<ControllerId>,
    session: Option<SessionId>,
    crashed: bool,

    // mirror of the shared log
    applied_seq: u64,
    events: BTreeMap<EventId, RamaEvent>,
    keys: BTreeMap<(SwitchId, u64), EventId>,
    order: Vec<EventId>,
    processed: BTreeSet<EventId>,
    max_logged: EventId,

    next_deliver: usize,
    delivered: Vec<EventId>,

    // unordered events, by arrival
    buffer: BTreeMap<u64, PendingEvent>,
    buffered_keys: BTreeMap<(SwitchId, u64), u64>,
    arrivals: u64,
    processed_at_switch: BTreeMap<(EventId, SwitchId), Epoch>,

    // master side
    next_id: EventId,
    pending_events: Vec<RamaEvent>,
    pending_processed: Vec<EventId>,
    batch_started: Option<Nanos>,
    inflight: BTreeSet<u64>,
    next_req: u64,
    bundles: BundleManager,
    probe: Option<Probe>,
    next_xid: u32,

    switches: BTreeMap<SwitchId, u64>,
    last_seen: BTreeMap<SwitchId, u64>,
    next_heartbeat: Nanos,
    out: Vec<Output>,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("id", &self.cfg.id)
            .field("role", &self.role)
            .field("epoch", &self.epoch)
            .field("logged", &self.order.len())
            .field("delivered", &self.delivered.len())
            .finish_non_exhaustive()
    }
}

impl Replica {
    pub fn new(cfg: ReplicaConfig) -> Self {
        let apps = vec![build_app(cfg.app, &cfg.ports)];
        Self::with_apps(cfg, apps)
    }

    pub fn with_apps(cfg: ReplicaConfig, apps: Vec<Box<dyn App>>) -> Self {
        Replica {
            cfg,
            apps,
            ctx: AppContext::idle(),
            role: Role::Starting,
            epoch: Epoch(0),
            leader: None,
            session: None,
            crashed: false,
            applied_seq: 0,
            events: BTreeMap::new(),
            keys: BTreeMap::new(),
            order: Vec::new(),
            processed: BTreeSet::new(),
            max_logged: EventId(0),
            next_deliver: 0,
            delivered: Vec::new(),
            buffer: BTreeMap::new(),
            buffered_keys: BTreeMap::new(),
            arrivals: 0,
            processed_at_switch: BTreeMap::new(),
            next_id: EventId(1),
            pending_events: Vec::new(),
            pending_processed: Vec::new(),
            batch_started: None,
            inflight: BTreeSet::new(),
            next_req: 1,
            bundles: BundleManager::default(),
            probe: None,
            next_xid: 1,
            switches: BTreeMap::new(),
            last_seen: BTreeMap::new(),
            next_heartbeat: 0,
            out: Vec::new(),
        }
    }

    pub fn id(&self) -> ControllerId {
        self.cfg.id
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn leader(&self) -> Option<ControllerId> {
        self.leader
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    /// Event ids handed to the applications, in delivery order.
    pub fn delivered(&self) -> &[EventId] {
        &self.delivered
    }

    pub fn logged_events(&self) -> usize {
        self.order.len()
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn processed_at_switch(&self, event: EventId, switch: SwitchId) -> bool {
        self.processed_at_switch.contains_key(&(event, switch))
    }

    /// No protocol work outstanding: nothing to replicate, no replies owed,
    /// no failover in progress. Timers for heartbeats do not count.
    pub fn is_idle(&self) -> bool {
        self.crashed
            || (self.pending_events.is_empty()
                && self.pending_processed.is_empty()
                && self.inflight.is_empty()
                && self.bundles.is_empty()
                && self.probe.is_none()
                && self.role != Role::Promoting)
    }

    /// First outputs: open the coordination session and arm the heartbeat.
    pub fn start(&mut self, now: Nanos) -> Vec<Output> {
        self.out.push(Output::ToCoord(CoordRequest::OpenSession { owner: self.cfg.id, timeout: self.cfg.session_timeout }));
        self.next_heartbeat = now + self.cfg.heartbeat;
        self.out.push(Output::WakeAt(self.next_heartbeat));
        std::mem::take(&mut self.out)
    }

    /// Externally imposed fail-stop crash.
    pub fn kill(&mut self, now: Nanos) -> Vec<Output> {
        if !self.crashed {
            self.crashed = true;
            self.trace(self.rec(TraceKind::Crashed, now).detail(json!({ "cause": "killed" })));
        }
        std::mem::take(&mut self.out)
    }

    pub fn handle(&mut self, input: Input, now: Nanos) -> Result<Vec<Output>, ReplicaError> {
        if self.crashed {
            return Ok(Vec::new());
        }
        let step = match input {
            Input::SwitchConnected { switch } => {
                self.switches.insert(switch, 0);
                Ok(())
            }
            Input::SwitchMessage { switch, msg } => self.on_switch_msg(switch, msg, now),
            Input::SwitchDisconnected { switch } => self.on_switch_down(switch, now),
            Input::Coord(reply) => self.on_coord(reply, now),
            Input::Tick => self.on_tick(now),
        };
        let out = std::mem::take(&mut self.out);
        match step {
            Ok(()) | Err(Halt::Crashed) => Ok(out),
            Err(Halt::Fatal(e)) => Err(e),
        }
    }

    fn rec(&self, kind: TraceKind, now: Nanos) -> TraceRecord {
        TraceRecord::new(kind, Actor::Controller(self.cfg.id), now).epoch(self.epoch)
    }

    fn trace(&mut self, r: TraceRecord) {
        if self.cfg.tracing {
            self.out.push(Output::Trace(r));
        }
    }

    fn send(&mut self, switch: SwitchId, msg: OfMessage) {
        self.out.push(Output::ToSwitch { switch, msg });
    }

    fn set_role(&mut self, role: Role, now: Nanos, reason: &str) {
        self.role = role;
        self.trace(self.rec(TraceKind::RoleChanged, now).detail(json!({ "role": role, "reason": reason })));
    }

    fn fire(&mut self, point: FaultPoint, event: EventId, now: Nanos) -> Step {
        self.trace(self.rec(TraceKind::Crashed, now).event(event).detail(json!({ "cause": "fault", "point": point })));
        self.out.push(Output::Crash);
        self.crashed = true;
        Err(Halt::Crashed)
    }

    fn hook_armed(&self, point: FaultPoint, event: EventId) -> bool {
        self.role == Role::Master && self.cfg.fault.is_some_and(|h| h.point == point && h.event == event)
    }

    // ---- switch side ----

    fn on_switch_msg(&mut self, switch: SwitchId, msg: OfMessage, now: Nanos) -> Step {
        match &msg {
            OfMessage::PacketIn { switch_seq, .. } | OfMessage::PortStatus { switch_seq, .. } => {
                let seen = self.last_seen.entry(switch).or_default();
                *seen = (*seen).max(*switch_seq);
            }
            _ => {}
        }
        match msg {
            OfMessage::PacketIn { .. } => match parse_commit_marker(&msg) {
                Ok(Some(marker)) => {
                    for &e in &marker.event_ids {
                        let slot = self.processed_at_switch.entry((e, switch)).or_insert(marker.master_epoch);
                        *slot = (*slot).max(marker.master_epoch);
                    }
                    if self.cfg.tracing {
                        let r = self.rec(TraceKind::MarkerSeen, now).switch(switch).detail(json!({
                            "events": marker.event_ids,
                            "marker_epoch": marker.master_epoch,
                        }));
                        self.trace(r);
                    }
                    Ok(())
                }
                Ok(None) => self.on_event(PendingEvent::from_switch(msg, now).expect("packet-in"), now),
                Err(e) => {
                    self.trace(self.rec(TraceKind::AppError, now).switch(switch).detail(json!({ "marker": e.to_string() })));
                    Ok(())
                }
            },
            OfMessage::PortStatus { .. } => self.on_event(PendingEvent::from_switch(msg, now).expect("port-status"), now),
            OfMessage::BundleReply { bundle_id, success } => {
                if !success {
                    return Err(ReplicaError::BundleRejected { switch, bundle_id }.into());
                }
                if matches!(self.role, Role::Master | Role::Promoting) {
                    if let Some(e) = self.bundles.on_reply(switch, bundle_id) {
                        self.event_done(e, now)?;
                    }
                }
                Ok(())
            }
            OfMessage::BarrierReply { xid } => self.on_barrier_reply(switch, xid, now),
            _ => Ok(()),
        }
    }

    fn on_switch_down(&mut self, switch: SwitchId, now: Nanos) -> Step {
        if self.switches.remove(&switch).is_none() {
            return Ok(());
        }
        let seq = self.last_seen.get(&switch).copied().unwrap_or(0) + 1;
        self.last_seen.insert(switch, seq);
        let pe = PendingEvent { switch_id: switch, switch_seq: seq, message: EventMessage::SwitchDown, arrived: now };
        self.on_event(pe, now)?;
        if matches!(self.role, Role::Master | Role::Promoting) {
            if let Some(probe) = self.probe.as_mut() {
                probe.barriers.retain(|_, s| *s != switch);
                for cmds in probe.held.values_mut() {
                    cmds.remove(&switch);
                }
            }
            for e in self.bundles.on_switch_down(switch) {
                self.event_done(e, now)?;
            }
            if self.probe.is_some() {
                self.settle_probe(now)?;
            }
        }
        Ok(())
    }

    fn on_event(&mut self, pe: PendingEvent, now: Nanos) -> Step {
        if self.cfg.tracing {
            let r = self.rec(TraceKind::EventCollected, now).switch(pe.switch_id).seq(pe.switch_seq);
            self.trace(r);
        }
        if self.cfg.mode == ConsistencyMode::CommandsOnly {
            if self.role != Role::Master {
                return Ok(());
            }
            let id = self.next_id;
            self.next_id = id.next();
            let ev = pe.with_id(id);
            self.record_event(ev);
            return self.pump_master(now);
        }
        if self.keys.contains_key(&pe.key()) {
            return Ok(());
        }
        match self.role {
            Role::Master => self.assign(pe, now),
            Role::Fenced => Ok(()),
            Role::Starting | Role::Slave | Role::Promoting => {
                if !self.buffered_keys.contains_key(&pe.key()) {
                    self.arrivals += 1;
                    self.buffered_keys.insert(pe.key(), self.arrivals);
                    self.buffer.insert(self.arrivals, pe);
                }
                Ok(())
            }
        }
    }

    // ---- ordering and replication ----

    fn assign(&mut self, pe: PendingEvent, now: Nanos) -> Step {
        let id = self.next_id;
        self.next_id = id.next();
        if self.cfg.tracing {
            let r = self.rec(TraceKind::IdAssigned, now).event(id).switch(pe.switch_id).seq(pe.switch_seq);
            self.trace(r);
        }
        self.pending_events.push(pe.with_id(id));
        self.arm_batch(now);
        self.maybe_flush(now)
    }

    fn arm_batch(&mut self, now: Nanos) {
        if self.batch_started.is_none() {
            self.batch_started = Some(now);
            self.out.push(Output::WakeAt(now + self.cfg.batch_time));
        }
    }

    fn maybe_flush(&mut self, now: Nanos) -> Step {
        let n = self.pending_events.len() + self.pending_processed.len();
        if n == 0 {
            return Ok(());
        }
        let due = self.batch_started.is_some_and(|t| now >= t + self.cfg.batch_time);
        if n >= self.cfg.batch_size.max(1) || due {
            self.flush(now)?;
        }
        Ok(())
    }

    fn flush(&mut self, now: Nanos) -> Step {
        self.batch_started = None;
        let mut bodies: Vec<LogBody> = self.pending_processed.drain(..).map(|event_id| LogBody::Processed { event_id }).collect();
        let events = std::mem::take(&mut self.pending_events);
        let target = events.iter().map(|e| e.event_id).find(|&id| self.hook_armed(FaultPoint::F1, id));
        bodies.extend(events.into_iter().map(LogBody::Event));
        let req_id = self.next_req;
        self.next_req += 1;
        let req = CoordRequest::Append { req_id, epoch: self.epoch, bodies };
        if let Some(id) = target {
            if self.cfg.has_bug(ProtocolBug::StaleEpochAppend) {
                self.out.push(Output::ToCoordDelayed { req, delay: self.cfg.stale_delay });
            }
            return self.fire(FaultPoint::F1, id, now);
        }
        self.inflight.insert(req_id);
        self.out.push(Output::ToCoord(req));
        Ok(())
    }

    fn event_done(&mut self, e: EventId, now: Nanos) -> Step {
        match self.cfg.mode {
            ConsistencyMode::CommandsOnly => Ok(()),
            _ => {
                self.pending_processed.push(e);
                self.arm_batch(now);
                self.maybe_flush(now)
            }
        }
    }

    // ---- coordination service ----

    fn on_coord(&mut self, reply: CoordReply, now: Nanos) -> Step {
        match reply {
            CoordReply::SessionOpened { session } => {
                self.session = Some(session);
                if self.cfg.mode != ConsistencyMode::CommandsOnly {
                    self.out.push(Output::ToCoord(CoordRequest::Watch { from_seq: self.applied_seq + 1 }));
                }
                self.out.push(Output::ToCoord(CoordRequest::Elect));
                Ok(())
            }
            CoordReply::Appended { req_id, result } => {
                self.inflight.remove(&req_id);
                match result {
                    Ok(_) => Ok(()),
                    Err(e) => self.on_coord_error(e, now),
                }
            }
            CoordReply::Entries { entries } => self.on_entries(entries, now),
            CoordReply::Leadership { epoch, leader, is_leader } => {
                self.leader = leader;
                if is_leader {
                    if matches!(self.role, Role::Master | Role::Promoting) && epoch == self.epoch {
                        return Ok(());
                    }
                    self.promote(epoch, now)
                } else {
                    let was = self.role;
                    self.epoch = self.epoch.max(epoch);
                    match was {
                        Role::Master | Role::Promoting => self.step_down(now, "deposed"),
                        Role::Starting => {
                            self.set_role(Role::Slave, now, "follower");
                            Ok(())
                        }
                        _ => Ok(()),
                    }
                }
            }
            CoordReply::SessionExpired { session, .. } => {
                if Some(session) == self.session {
                    self.fence(now);
                }
                Ok(())
            }
            CoordReply::Error { error } => self.on_coord_error(error, now),
        }
    }

    fn on_coord_error(&mut self, e: CoordError, now: Nanos) -> Step {
        match e {
            CoordError::SessionExpired | CoordError::UnknownSession | CoordError::NoSession => {
                self.fence(now);
                Ok(())
            }
            CoordError::NotLeader if matches!(self.role, Role::Master | Role::Promoting) => self.step_down(now, "not-leader"),
            _ => Ok(()),
        }
    }

    fn fence(&mut self, now: Nanos) {
        if self.role != Role::Fenced {
            self.drop_master_state(now);
            self.set_role(Role::Fenced, now, "session-expired");
        }
    }

    fn drop_master_state(&mut self, now: Nanos) {
        // unlogged ids are meaningless; the occurrences go back to the buffer
        for ev in std::mem::take(&mut self.pending_events) {
            let pe = PendingEvent { switch_id: ev.switch_id, switch_seq: ev.switch_seq, message: ev.message, arrived: now };
            if !self.keys.contains_key(&pe.key()) && !self.buffered_keys.contains_key(&pe.key()) {
                self.arrivals += 1;
                self.buffered_keys.insert(pe.key(), self.arrivals);
                self.buffer.insert(self.arrivals, pe);
            }
        }
        self.pending_processed.clear();
        self.batch_started = None;
        self.inflight.clear();
        self.bundles.clear();
        self.probe = None;
    }

    fn step_down(&mut self, now: Nanos, reason: &str) -> Step {
        self.drop_master_state(now);
        self.set_role(Role::Slave, now, reason);
        self.pump_slave(now)
    }

    fn on_entries(&mut self, entries: Vec<LogEntry>, now: Nanos) -> Step {
        for entry in entries {
            if entry.seq <= self.applied_seq {
                continue;
            }
            self.applied_seq = entry.seq;
            match entry.body {
                LogBody::Event(ev) => {
                    if self.events.contains_key(&ev.event_id) || self.keys.contains_key(&ev.key()) {
                        // only reachable when fencing is off
                        self.trace(self.rec(TraceKind::AppError, now).event(ev.event_id).detail(json!({ "duplicate_log_entry": entry.seq })));
                        continue;
                    }
                    if let Some(arrival) = self.buffered_keys.remove(&ev.key()) {
                        self.buffer.remove(&arrival);
                    }
                    self.record_event(ev);
                }
                LogBody::Processed { event_id } => {
                    if !self.events.contains_key(&event_id) {
                        return Err(ReplicaError::UnknownProcessed(event_id).into());
                    }
                    if self.processed.insert(event_id) && self.role == Role::Master {
                        self.trace(self.rec(TraceKind::ProcessedLogged, now).event(event_id).detail(json!({ "seq": entry.seq })));
                    }
                }
            }
        }
        match self.role {
            Role::Master => self.pump_master(now),
            Role::Promoting => Ok(()),
            _ => self.pump_slave(now),
        }
    }

    fn record_event(&mut self, ev: RamaEvent) {
        self.max_logged = self.max_logged.max(ev.event_id);
        self.keys.insert(ev.key(), ev.event_id);
        self.order.push(ev.event_id);
        self.events.insert(ev.event_id, ev);
    }

    // ---- application pipeline ----

    fn deliver(&mut self, e: EventId, discard: bool, now: Nanos) -> Vec<(SwitchId, OfMessage)> {
        let event = self.events.get(&e).expect("delivered events are logged").clone();
        let writes = match run_apps(&mut self.apps, &event, &mut self.ctx) {
            Ok(w) => w,
            Err(err) => {
                self.trace(self.rec(TraceKind::AppError, now).event(e).detail(json!({ "error": err.to_string() })));
                Vec::new()
            }
        };
        self.delivered.push(e);
        if self.cfg.tracing {
            let r = self
                .rec(TraceKind::Delivered, now)
                .event(e)
                .switch(event.switch_id)
                .seq(event.switch_seq)
                .detail(json!({ "commands": writes.len(), "discarded": discard }));
            self.trace(r);
        }
        writes
    }

    fn pump_slave(&mut self, now: Nanos) -> Step {
        while let Some(&e) = self.order.get(self.next_deliver) {
            if !self.processed.contains(&e) {
                break;
            }
            self.next_deliver += 1;
            let first = self.delivered.is_empty();
            self.deliver(e, true, now);
            if first && self.cfg.has_bug(ProtocolBug::DoubleDelivery) {
                self.deliver(e, true, now);
            }
        }
        Ok(())
    }

    fn pump_master(&mut self, now: Nanos) -> Step {
        if self.cfg.has_bug(ProtocolBug::NonFifoDelivery) && self.delivered.is_empty() && self.order.len() >= 2 {
            let (a, b) = (self.order[0], self.order[1]);
            self.next_deliver = 2;
            for e in [b, a] {
                let w = self.deliver(e, false, now);
                self.finalize(e, w, now)?;
            }
        }
        while let Some(&e) = self.order.get(self.next_deliver) {
            self.next_deliver += 1;
            let discard = self.processed.contains(&e);
            let writes = self.deliver(e, discard, now);
            if !discard {
                self.finalize(e, writes, now)?;
            }
        }
        Ok(())
    }

    fn group(writes: Vec<(SwitchId, OfMessage)>) -> Commands {
        let mut by_switch: Commands = BTreeMap::new();
        for (s, m) in writes {
            by_switch.entry(s).or_default().push(m);
        }
        by_switch
    }

    fn send_bundle(&mut self, e: EventId, s: SwitchId, cmds: &[OfMessage], resend: bool, now: Nanos) -> Step {
        let copies = if self.cfg.has_bug(ProtocolBug::DuplicateCommit) { 2 } else { 1 };
        for _ in 0..copies {
            let marker = !self.cfg.has_bug(ProtocolBug::SkipMarker);
            let (bundle_id, mut msgs) = self.bundles.build(self.epoch, e, s, cmds, marker);
            let commit = msgs.pop().expect("commit");
            for m in msgs {
                self.send(s, m);
            }
            if !resend && self.hook_armed(FaultPoint::F2, e) {
                return self.fire(FaultPoint::F2, e, now);
            }
            self.send(s, commit);
            if self.cfg.tracing {
                let r = self
                    .rec(TraceKind::BundleCommitted, now)
                    .event(e)
                    .switch(s)
                    .bundle(bundle_id)
                    .detail(json!({ "commands": cmds.len(), "resend": resend }));
                self.trace(r);
            }
        }
        Ok(())
    }

    fn finalize(&mut self, e: EventId, writes: Vec<(SwitchId, OfMessage)>, now: Nanos) -> Step {
        let by_switch = Self::group(writes);
        if self.cfg.mode == ConsistencyMode::EventsOnly {
            for (s, cmds) in by_switch {
                if self.switches.contains_key(&s) {
                    for m in cmds {
                        self.send(s, m);
                    }
                }
            }
            return self.event_done(e, now);
        }
        for (s, cmds) in by_switch {
            // commands for a failed switch are dropped with the switch
            if self.switches.contains_key(&s) {
                self.send_bundle(e, s, &cmds, false, now)?;
            }
        }
        if self.hook_armed(FaultPoint::F3, e) {
            return self.fire(FaultPoint::F3, e, now);
        }
        if self.hook_armed(FaultPoint::F2, e) {
            // nothing was bundled, so there is no commit to withhold
            return self.fire(FaultPoint::F2, e, now);
        }
        if !self.bundles.is_awaiting(e) {
            self.event_done(e, now)?;
        }
        Ok(())
    }

    // ---- failover ----

    fn promote(&mut self, epoch: Epoch, now: Nanos) -> Step {
        self.drop_master_state(now);
        self.epoch = epoch;
        self.set_role(Role::Promoting, now, "elected");
        if self.cfg.mode == ConsistencyMode::CommandsOnly {
            self.buffer.clear();
            self.buffered_keys.clear();
            return self.finish_promotion(now);
        }

        // 1. catch up on everything the previous master logged
        let mut held: BTreeMap<EventId, Commands> = BTreeMap::new();
        while let Some(&e) = self.order.get(self.next_deliver) {
            self.next_deliver += 1;
            let discard = self.processed.contains(&e);
            let writes = self.deliver(e, discard, now);
            if !discard {
                held.insert(e, Self::group(writes));
            }
        }

        // 2. probe switches for events whose transaction never finished
        let ignore_markers = self.cfg.has_bug(ProtocolBug::IgnoreMarkers);
        let mut probed: BTreeSet<SwitchId> = BTreeSet::new();
        for (&e, cmds) in held.iter_mut() {
            let switches: Vec<SwitchId> = cmds.keys().copied().collect();
            for s in switches {
                if !self.switches.contains_key(&s) {
                    cmds.remove(&s);
                } else if !ignore_markers && self.processed_at_switch.contains_key(&(e, s)) {
                    cmds.remove(&s);
                    if self.cfg.tracing {
                        self.out.push(Output::Trace(
                            TraceRecord::new(TraceKind::ProbeSkip, Actor::Controller(self.cfg.id), now)
                                .epoch(epoch)
                                .event(e)
                                .switch(s)
                                .detail(json!({ "when": "catch-up" })),
                        ));
                    }
                } else {
                    probed.insert(s);
                }
            }
        }
        let mut probe = Probe { barriers: BTreeMap::new(), held };
        for s in probed {
            let xid = self.next_xid;
            self.next_xid += 1;
            probe.barriers.insert(xid, s);
            self.send(s, OfMessage::BarrierRequest { xid });
            self.trace(self.rec(TraceKind::BarrierSent, now).switch(s).detail(json!({ "xid": xid })));
        }
        self.probe = Some(probe);
        self.settle_probe(now)
    }

    fn on_barrier_reply(&mut self, switch: SwitchId, xid: u32, now: Nanos) -> Step {
        let Some(probe) = self.probe.as_mut() else {
            return Ok(());
        };
        if probe.barriers.remove(&xid) != Some(switch) {
            return Ok(());
        }
        let ignore_markers = self.cfg.has_bug(ProtocolBug::IgnoreMarkers);
        let mut resend = Vec::new();
        let mut skip = Vec::new();
        for (&e, cmds) in probe.held.iter_mut() {
            if let Some(c) = cmds.remove(&switch) {
                if !ignore_markers && self.processed_at_switch.contains_key(&(e, switch)) {
                    skip.push(e);
                } else {
                    resend.push((e, c));
                }
            }
        }
        for e in skip {
            self.trace(self.rec(TraceKind::ProbeSkip, now).event(e).switch(switch).detail(json!({ "when": "barrier" })));
        }
        for (e, cmds) in resend {
            self.trace(self.rec(TraceKind::ProbeResend, now).event(e).switch(switch).detail(json!({ "commands": cmds.len() })));
            self.send_bundle(e, switch, &cmds, true, now)?;
        }
        self.settle_probe(now)
    }

    /// Closes out held events with nothing left to probe, and finishes the
    /// promotion once every barrier has been answered.
    fn settle_probe(&mut self, now: Nanos) -> Step {
        let Some(probe) = self.probe.as_mut() else {
            return Ok(());
        };
        let settled: Vec<EventId> = probe.held.iter().filter(|(_, c)| c.is_empty()).map(|(e, _)| *e).collect();
        for e in &settled {
            probe.held.remove(e);
        }
        let finished = probe.barriers.is_empty();
        for e in settled {
            if !self.bundles.is_awaiting(e) {
                self.event_done(e, now)?;
            }
        }
        if finished {
            self.probe = None;
            self.finish_promotion(now)?;
        }
        Ok(())
    }

    fn finish_promotion(&mut self, now: Nanos) -> Step {
        // 3. order whatever only this replica saw
        self.next_id = self.next_id.max(self.max_logged.next());
        self.set_role(Role::Master, now, "promoted");
        let buffered: Vec<PendingEvent> = std::mem::take(&mut self.buffer).into_values().collect();
        self.buffered_keys.clear();
        let skip = usize::from(self.cfg.has_bug(ProtocolBug::LostBufferedEvent) && !buffered.is_empty());
        for pe in buffered.into_iter().skip(skip) {
            if !self.keys.contains_key(&pe.key()) {
                self.assign(pe, now)?;
            }
        }
        // 4. announce
        let switches: Vec<SwitchId> = self.switches.keys().copied().collect();
        for s in switches {
            self.send(s, OfMessage::RoleAnnounce { controller_id: self.cfg.id, epoch: self.epoch });
        }
        self.pump_master(now)?;
        self.maybe_flush(now)
    }

    fn on_tick(&mut self, now: Nanos) -> Step {
        if self.session.is_some() && self.role != Role::Fenced && now >= self.next_heartbeat {
            self.out.push(Output::ToCoord(CoordRequest::Heartbeat));
            self.next_heartbeat = now + self.cfg.heartbeat;
            self.out.push(Output::WakeAt(self.next_heartbeat));
        } else if self.session.is_none() && now >= self.next_heartbeat {
            self.next_heartbeat = now + self.cfg.heartbeat;
            self.out.push(Output::WakeAt(self.next_heartbeat));
        }
        if matches!(self.role, Role::Master | Role::Promoting) {
            self.maybe_flush(now)?;
        }
        Ok(())
    }
}
