//! Coordination service: a single serializer offering an append-only shared
//! log, watches, sessions with timeout-based failure detection, and leader
//! election with fenced leadership epochs.
//!
//! The service stands in for a replicated ensemble. Every request is applied
//! atomically in arrival order and all observers see the same entry at every
//! sequence number. Notifications produced by a request are queued in an
//! outbox and drained by the transport, in order, per recipient.

mod protocol;

pub use protocol::{decode_reply, decode_request, encode_reply, encode_request, ClientId, CoordFrontend, CoordReply, CoordRequest};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::ctrl::RamaEvent;
use crate::trace::{Actor, TraceKind, TraceRecord};
use crate::types::{ControllerId, Epoch, EventId, Nanos, SessionId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LogBody {
    Event(RamaEvent),
    Processed { event_id: EventId },
}

impl LogBody {
    pub fn event_id(&self) -> EventId {
        match self {
            LogBody::Event(e) => e.event_id,
            LogBody::Processed { event_id } => *event_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Dense, starting at 1.
    pub seq: u64,
    /// Leadership epoch under which the entry was appended.
    pub epoch: Epoch,
    pub body: LogBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqRange {
    pub first: u64,
    pub last: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CoordError {
    #[error("session expired")]
    SessionExpired,
    #[error("unknown session")]
    UnknownSession,
    #[error("caller is not the current leader")]
    NotLeader,
    #[error("empty batch rejected")]
    EmptyBatch,
    #[error("session is already a candidate")]
    DuplicateCandidate,
    #[error("no session opened on this connection")]
    NoSession,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: SessionId,
    pub owner: ControllerId,
    pub timeout: Nanos,
    pub last_heartbeat: Nanos,
    pub expired: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Election {
    /// Arrival order; the head is the leader.
    candidates: Vec<(ControllerId, SessionId)>,
    epoch: Epoch,
}

impl Election {
    pub fn leader(&self) -> Option<(ControllerId, SessionId)> {
        self.candidates.first().copied()
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn candidates(&self) -> &[(ControllerId, SessionId)] {
        &self.candidates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Notification {
    Entries { to: SessionId, entries: Vec<LogEntry> },
    Leadership { to: SessionId, epoch: Epoch, leader: Option<ControllerId>, is_leader: bool },
    SessionExpired { to: SessionId, expired: SessionId, owner: ControllerId },
}

impl Notification {
    pub fn recipient(&self) -> SessionId {
        match self {
            Notification::Entries { to, .. }
            | Notification::Leadership { to, .. }
            | Notification::SessionExpired { to, .. } => *to,
        }
    }
}

#[derive(Debug)]
pub struct CoordService {
    log: Vec<LogEntry>,
    sessions: BTreeMap<SessionId, Session>,
    election: Election,
    /// Next sequence number each watcher has not been sent yet.
    watchers: BTreeMap<SessionId, u64>,
    next_session: u64,
    fencing: bool,
    tracing: bool,
    outbox: Vec<Notification>,
    trace: Vec<TraceRecord>,
    now: Nanos,
}

impl Default for CoordService {
    fn default() -> Self {
        Self::new()
    }
}

impl CoordService {
    pub fn new() -> Self {
        CoordService {
            log: Vec::new(),
            sessions: BTreeMap::new(),
            election: Election::default(),
            watchers: BTreeMap::new(),
            next_session: 1,
            fencing: true,
            tracing: true,
            outbox: Vec::new(),
            trace: Vec::new(),
            now: 0,
        }
    }

    /// Turns append fencing off. Only used to demonstrate what fencing prevents.
    pub fn disable_fencing(&mut self) {
        self.fencing = false;
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn election(&self) -> &Election {
        &self.election
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn drain_notifications(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.outbox)
    }

    pub fn drain_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    fn record(&mut self, r: TraceRecord) {
        if self.tracing {
            self.trace.push(r);
        }
    }

    pub fn open_session(&mut self, owner: ControllerId, timeout: Nanos, now: Nanos) -> SessionId {
        self.now = self.now.max(now);
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(id, Session { session_id: id, owner, timeout, last_heartbeat: now, expired: false });
        id
    }

    fn live_session(&mut self, id: SessionId, now: Nanos) -> Result<&mut Session, CoordError> {
        let s = self.sessions.get_mut(&id).ok_or(CoordError::UnknownSession)?;
        // a session past its deadline is dead even if the tick has not run yet
        if s.expired || now.saturating_sub(s.last_heartbeat) > s.timeout {
            return Err(CoordError::SessionExpired);
        }
        s.last_heartbeat = s.last_heartbeat.max(now);
        Ok(s)
    }

    pub fn heartbeat(&mut self, session: SessionId, now: Nanos) -> Result<(), CoordError> {
        self.now = self.now.max(now);
        self.live_session(session, now).map(|_| ())
    }

    /// Appends `bodies` contiguously and atomically. Leader-only under the
    /// current epoch; a deposed leader's append is refused.
    pub fn append_batch(
        &mut self,
        session: SessionId,
        epoch: Epoch,
        bodies: Vec<LogBody>,
        now: Nanos,
    ) -> Result<SeqRange, CoordError> {
        self.now = self.now.max(now);
        let result = self.try_append(session, epoch, bodies, now);
        if let Err(e) = result {
            self.record(
                TraceRecord::new(TraceKind::AppendRejected, Actor::Coord, now)
                    .epoch(epoch)
                    .detail(json!({ "session": session, "error": e.to_string() })),
            );
        }
        result
    }

    fn try_append(&mut self, session: SessionId, epoch: Epoch, bodies: Vec<LogBody>, now: Nanos) -> Result<SeqRange, CoordError> {
        if self.fencing {
            self.live_session(session, now)?;
            let leader = self.election.leader().map(|(_, s)| s);
            if leader != Some(session) || epoch != self.election.epoch {
                return Err(CoordError::NotLeader);
            }
        } else if let Some(s) = self.sessions.get_mut(&session) {
            s.last_heartbeat = s.last_heartbeat.max(now);
        }
        if bodies.is_empty() {
            return Err(CoordError::EmptyBatch);
        }
        let first = self.log.len() as u64 + 1;
        for body in bodies {
            let seq = self.log.len() as u64 + 1;
            if self.tracing {
                let mut r = TraceRecord::new(TraceKind::Logged, Actor::Coord, now)
                    .epoch(epoch)
                    .event(body.event_id())
                    .detail(json!({ "seq": seq, "body": body, "leader_epoch": self.election.epoch }));
                if let LogBody::Event(e) = &body {
                    r = r.switch(e.switch_id).seq(e.switch_seq);
                }
                self.trace.push(r);
            }
            self.log.push(LogEntry { seq, epoch, body });
        }
        let last = self.log.len() as u64;
        self.pump_watchers();
        Ok(SeqRange { first, last })
    }

    fn pump_watchers(&mut self) {
        let len = self.log.len() as u64;
        for (sid, cursor) in self.watchers.iter_mut() {
            if *cursor <= len {
                let entries = self.log[(*cursor - 1) as usize..].to_vec();
                *cursor = len + 1;
                self.outbox.push(Notification::Entries { to: *sid, entries });
            }
        }
    }

    /// Subscribes `session` to every entry with `seq >= from_seq`, starting
    /// with a catch-up of the existing log.
    pub fn watch(&mut self, session: SessionId, from_seq: u64, now: Nanos) -> Result<(), CoordError> {
        self.live_session(session, now)?;
        self.watchers.insert(session, from_seq.max(1));
        self.pump_watchers();
        Ok(())
    }

    pub fn elect(&mut self, session: SessionId, now: Nanos) -> Result<(), CoordError> {
        self.now = self.now.max(now);
        let owner = self.live_session(session, now)?.owner;
        if self.election.candidates.iter().any(|(_, s)| *s == session) {
            return Err(CoordError::DuplicateCandidate);
        }
        self.election.candidates.push((owner, session));
        if self.election.candidates.len() == 1 {
            self.leader_changed(now);
        } else {
            let leader = self.election.leader().map(|(c, _)| c);
            self.outbox.push(Notification::Leadership { to: session, epoch: self.election.epoch, leader, is_leader: false });
        }
        Ok(())
    }

    pub fn resign(&mut self, session: SessionId, now: Nanos) {
        self.remove_candidate(session, now);
    }

    fn remove_candidate(&mut self, session: SessionId, now: Nanos) {
        let was_leader = self.election.leader().map(|(_, s)| s) == Some(session);
        self.election.candidates.retain(|(_, s)| *s != session);
        if was_leader {
            self.leader_changed(now);
        }
    }

    fn leader_changed(&mut self, now: Nanos) {
        let Some((leader, _)) = self.election.leader() else {
            return;
        };
        self.election.epoch = Epoch(self.election.epoch.0 + 1);
        let epoch = self.election.epoch;
        self.record(
            TraceRecord::new(TraceKind::LeaderElected, Actor::Coord, now)
                .epoch(epoch)
                .detail(json!({ "leader": leader })),
        );
        for (i, (_, s)) in self.election.candidates.iter().enumerate() {
            self.outbox.push(Notification::Leadership { to: *s, epoch, leader: Some(leader), is_leader: i == 0 });
        }
    }

    /// Clock tick: expires every session whose last heartbeat is more than its
    /// timeout in the past. Expiry is irrevocable.
    pub fn tick(&mut self, now: Nanos) {
        self.now = self.now.max(now);
        let expired: Vec<(SessionId, ControllerId)> = self
            .sessions
            .values()
            .filter(|s| !s.expired && now.saturating_sub(s.last_heartbeat) > s.timeout)
            .map(|s| (s.session_id, s.owner))
            .collect();
        for (sid, owner) in expired {
            self.sessions.get_mut(&sid).expect("listed").expired = true;
            self.watchers.remove(&sid);
            self.record(
                TraceRecord::new(TraceKind::SessionExpired, Actor::Coord, now)
                    .detail(json!({ "session": sid, "owner": owner })),
            );
            let live: Vec<SessionId> = self.sessions.values().filter(|s| !s.expired).map(|s| s.session_id).collect();
            for to in live {
                self.outbox.push(Notification::SessionExpired { to, expired: sid, owner });
            }
            self.remove_candidate(sid, now);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrl::EventMessage;
    use crate::types::SwitchId;

    const T: Nanos = 500;

    fn ev(id: u64) -> LogBody {
        LogBody::Event(RamaEvent {
            event_id: EventId(id),
            switch_id: SwitchId(1),
            switch_seq: id,
            message: EventMessage::PortStatus { port: 1, up: true },
        })
    }

    fn leader_session(svc: &mut CoordService) -> SessionId {
        let s = svc.open_session(ControllerId(1), T, 0);
        svc.elect(s, 0).unwrap();
        s
    }

    fn entries_for(n: &[Notification], who: SessionId) -> Vec<u64> {
        n.iter()
            .filter_map(|x| match x {
                Notification::Entries { to, entries } if *to == who => Some(entries.iter().map(|e| e.seq).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    #[test]
    fn leader_append_is_contiguous() {
        let mut svc = CoordService::new();
        let s = leader_session(&mut svc);
        let r = svc.append_batch(s, Epoch(1), vec![ev(1), ev(2), ev(3)], 1).unwrap();
        assert_eq!(r, SeqRange { first: 1, last: 3 });
        let r = svc.append_batch(s, Epoch(1), vec![ev(4)], 2).unwrap();
        assert_eq!(r, SeqRange { first: 4, last: 4 });
    }

    #[test]
    fn batch_is_delivered_as_one_notification() {
        let mut svc = CoordService::new();
        let s = leader_session(&mut svc);
        let reader = svc.open_session(ControllerId(2), T, 0);
        svc.watch(reader, 1, 0).unwrap();
        svc.drain_notifications();
        svc.append_batch(s, Epoch(1), vec![ev(1), ev(2), ev(3)], 1).unwrap();
        let n = svc.drain_notifications();
        let batches: Vec<_> = n.iter().filter(|x| x.recipient() == reader).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(entries_for(&n, reader), vec![1, 2, 3]);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut svc = CoordService::new();
        let s = leader_session(&mut svc);
        assert_eq!(svc.append_batch(s, Epoch(1), vec![], 0), Err(CoordError::EmptyBatch));
    }

    #[test]
    fn deposed_leader_is_fenced() {
        let mut svc = CoordService::new();
        let a = svc.open_session(ControllerId(1), T, 0);
        let b = svc.open_session(ControllerId(2), T, 0);
        svc.elect(a, 0).unwrap();
        svc.elect(b, 0).unwrap();
        svc.append_batch(a, Epoch(1), vec![ev(1)], 10).unwrap();
        // b keeps heartbeating, a goes silent
        svc.heartbeat(b, 400).unwrap();
        svc.tick(T + 11);
        assert_eq!(svc.election().leader(), Some((ControllerId(2), b)));
        assert_eq!(svc.election().epoch(), Epoch(2));
        assert_eq!(svc.append_batch(a, Epoch(1), vec![ev(2)], T + 12), Err(CoordError::SessionExpired));
        assert_eq!(svc.append_batch(b, Epoch(1), vec![ev(2)], T + 12), Err(CoordError::NotLeader));
        assert_eq!(svc.log().len(), 1);
        svc.append_batch(b, Epoch(2), vec![ev(2)], T + 12).unwrap();
        assert_eq!(svc.log().len(), 2);
    }

    #[test]
    fn follower_cannot_append() {
        let mut svc = CoordService::new();
        let _a = leader_session(&mut svc);
        let b = svc.open_session(ControllerId(2), T, 0);
        svc.elect(b, 0).unwrap();
        assert_eq!(svc.append_batch(b, Epoch(1), vec![ev(1)], 0), Err(CoordError::NotLeader));
    }

    #[test]
    fn watch_catches_up_then_tails() {
        let mut svc = CoordService::new();
        let s = leader_session(&mut svc);
        for i in 1..=5 {
            svc.append_batch(s, Epoch(1), vec![ev(i)], i).unwrap();
        }
        let r = svc.open_session(ControllerId(2), T, 0);
        svc.drain_notifications();
        svc.watch(r, 1, 10).unwrap();
        svc.append_batch(s, Epoch(1), vec![ev(6)], 11).unwrap();
        let n = svc.drain_notifications();
        assert_eq!(entries_for(&n, r), vec![1, 2, 3, 4, 5, 6]);
        // partial catch-up
        let r2 = svc.open_session(ControllerId(3), T, 0);
        svc.watch(r2, 4, 12).unwrap();
        assert_eq!(entries_for(&svc.drain_notifications(), r2), vec![4, 5, 6]);
    }

    #[test]
    fn two_subscribers_see_identical_streams() {
        let mut svc = CoordService::new();
        let s = leader_session(&mut svc);
        let r1 = svc.open_session(ControllerId(2), T, 0);
        let r2 = svc.open_session(ControllerId(3), T, 0);
        svc.watch(r1, 1, 0).unwrap();
        let mut all = Vec::new();
        for i in 1..=4 {
            svc.append_batch(s, Epoch(1), vec![ev(i * 2 - 1), ev(i * 2)], i).unwrap();
            if i == 2 {
                svc.watch(r2, 1, i).unwrap();
            }
            all.extend(svc.drain_notifications());
        }
        let a = entries_for(&all, r1);
        assert_eq!(a, (1..=8).collect::<Vec<_>>());
        assert_eq!(a, entries_for(&all, r2));
    }

    #[test]
    fn expiry_fires_once_after_timeout() {
        let mut svc = CoordService::new();
        let a = svc.open_session(ControllerId(1), T, 0);
        let b = svc.open_session(ControllerId(2), 10 * T, 0);
        svc.tick(T);
        assert!(!svc.session(a).unwrap().expired);
        svc.tick(T + 1);
        svc.tick(T + 2);
        let n = svc.drain_notifications();
        let expiries: Vec<_> = n.iter().filter(|x| matches!(x, Notification::SessionExpired { expired, .. } if *expired == a)).collect();
        assert_eq!(expiries.len(), 1);
        assert_eq!(expiries[0].recipient(), b);
        assert_eq!(svc.heartbeat(a, T + 3), Err(CoordError::SessionExpired));
    }

    #[test]
    fn regular_heartbeats_never_expire() {
        let mut svc = CoordService::new();
        let a = svc.open_session(ControllerId(1), 300, 0);
        for tick in 1..=100u64 {
            let now = tick * 100;
            svc.heartbeat(a, now).unwrap();
            svc.tick(now);
        }
        assert!(!svc.session(a).unwrap().expired);
    }

    #[test]
    fn first_candidate_leads_and_succession_is_arrival_order() {
        let mut svc = CoordService::new();
        let s: Vec<_> = (1..=3).map(|c| svc.open_session(ControllerId(c), T, 0)).collect();
        for x in &s {
            svc.elect(*x, 0).unwrap();
        }
        let n = svc.drain_notifications();
        assert!(n.contains(&Notification::Leadership { to: s[0], epoch: Epoch(1), leader: Some(ControllerId(1)), is_leader: true }));
        svc.heartbeat(s[1], T).unwrap();
        svc.heartbeat(s[2], T).unwrap();
        svc.tick(T + 1);
        assert_eq!(svc.election().leader(), Some((ControllerId(2), s[1])));
        let n = svc.drain_notifications();
        assert!(n.contains(&Notification::Leadership { to: s[1], epoch: Epoch(2), leader: Some(ControllerId(2)), is_leader: true }));
        assert!(n.contains(&Notification::Leadership { to: s[2], epoch: Epoch(2), leader: Some(ControllerId(2)), is_leader: false }));
        assert_eq!(svc.election().candidates().len(), 2);
    }

    #[test]
    fn duplicate_candidacy_rejected() {
        let mut svc = CoordService::new();
        let s = leader_session(&mut svc);
        assert_eq!(svc.elect(s, 1), Err(CoordError::DuplicateCandidate));
    }

    #[test]
    fn unfenced_service_accepts_stale_epoch() {
        let mut svc = CoordService::new();
        svc.disable_fencing();
        let a = leader_session(&mut svc);
        svc.tick(T + 1);
        assert!(svc.append_batch(a, Epoch(1), vec![ev(1)], T + 2).is_ok());
    }
}
