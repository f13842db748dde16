//! Controller replica.
//!
//! The master orders switch events by assigning event ids, replicates them
//! to the shared log in batches, feeds them to the applications in log
//! order and commits each event's commands per switch as one bundle closed by
//! a commit marker. Once every affected switch has replied, it logs that the
//! event was processed. Slaves buffer events until they appear in the log and
//! replay only processed events, discarding the commands.
//!
//! A slave that is elected finishes the previous master's work before taking
//! new events: it replays unprocessed logged events, probes each affected
//! switch with a barrier and resends only where no marker was observed, then
//! logs whatever it alone had buffered.

mod bundle;
mod config;
mod event;
mod replica;

pub use bundle::BundleManager;
pub use config::{ConsistencyMode, FaultHook, FaultPoint, ProtocolBug, ReplicaConfig};
pub use event::{EventMessage, PendingEvent, RamaEvent};
pub use replica::{Input, Output, Replica, ReplicaError, Role};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::{App, AppContext, AppError};
    use crate::coord::{CoordReply, CoordRequest, LogBody, LogEntry, SeqRange};
    use crate::ofwire::{make_commit_marker, Action, OfMessage};
    use crate::types::{ControllerId, Epoch, EventId, SessionId, SwitchId, MILLIS};

    fn pin(sw: u64, seq: u64) -> OfMessage {
        OfMessage::PacketIn { switch_id: SwitchId(sw), switch_seq: seq, buffer_id: 0, in_port: 1, payload: vec![2, 0, 0, 0, 0, 9] }
    }

    fn cfg(batch: usize) -> ReplicaConfig {
        let mut c = ReplicaConfig::new(ControllerId(1));
        c.batch_size = batch;
        c.batch_time = 50 * MILLIS;
        c.tracing = false;
        c
    }

    fn boot(r: &mut Replica, leader: bool) {
        r.start(0);
        r.handle(Input::Coord(CoordReply::SessionOpened { session: SessionId(1) }), 0).unwrap();
        r.handle(Input::SwitchConnected { switch: SwitchId(1) }, 0).unwrap();
        r.handle(Input::SwitchConnected { switch: SwitchId(2) }, 0).unwrap();
        let out = r
            .handle(Input::Coord(CoordReply::Leadership { epoch: Epoch(1), leader: Some(ControllerId(1)), is_leader: leader }), 0)
            .unwrap();
        if leader {
            assert!(out.iter().any(|o| matches!(o, Output::ToSwitch { msg: OfMessage::RoleAnnounce { .. }, .. })));
        }
    }

    fn appends(out: &[Output]) -> Vec<Vec<LogBody>> {
        out.iter()
            .filter_map(|o| match o {
                Output::ToCoord(CoordRequest::Append { bodies, .. }) => Some(bodies.clone()),
                _ => None,
            })
            .collect()
    }

    fn to_switch(out: &[Output]) -> Vec<(SwitchId, OfMessage)> {
        out.iter()
            .filter_map(|o| match o {
                Output::ToSwitch { switch, msg } => Some((*switch, msg.clone())),
                _ => None,
            })
            .collect()
    }

    fn entries(bodies: Vec<LogBody>, first_seq: u64) -> CoordReply {
        CoordReply::Entries {
            entries: bodies.into_iter().enumerate().map(|(i, body)| LogEntry { seq: first_seq + i as u64, epoch: Epoch(1), body }).collect(),
        }
    }

    #[test]
    fn master_assigns_consecutive_ids_per_switch() {
        let mut r = Replica::new(cfg(2));
        boot(&mut r, true);
        assert!(appends(&r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 1) }, 1).unwrap()).is_empty());
        let out = r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 2) }, 2).unwrap();
        let a = appends(&out);
        assert_eq!(a.len(), 1);
        let ids: Vec<_> = a[0].iter().map(|b| b.event_id()).collect();
        assert_eq!(ids, vec![EventId(1), EventId(2)]);
        let seqs: Vec<_> = a[0]
            .iter()
            .map(|b| match b {
                LogBody::Event(e) => e.switch_seq,
                _ => panic!(),
            })
            .collect();
        assert_eq!(seqs, vec![1, 2]);
    }

    #[test]
    fn size_trigger_sends_one_append() {
        let mut r = Replica::new(cfg(3));
        boot(&mut r, true);
        let mut all = Vec::new();
        for i in 1..=3 {
            all.extend(r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, i) }, i).unwrap());
        }
        let a = appends(&all);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].len(), 3);
    }

    #[test]
    fn time_trigger_flushes_single_event() {
        let mut r = Replica::new(cfg(1000));
        boot(&mut r, true);
        let out = r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 1) }, 0).unwrap();
        assert!(out.contains(&Output::WakeAt(50 * MILLIS)));
        assert!(appends(&r.handle(Input::Tick, 49 * MILLIS).unwrap()).is_empty());
        let a = appends(&r.handle(Input::Tick, 50 * MILLIS).unwrap());
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].len(), 1);
    }

    #[test]
    fn logged_event_is_bundled_then_processed_after_reply() {
        let mut r = Replica::new(cfg(1));
        boot(&mut r, true);
        let a = appends(&r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 1) }, 0).unwrap());
        r.handle(Input::Coord(CoordReply::Appended { req_id: 1, result: Ok(SeqRange { first: 1, last: 1 }) }), 1).unwrap();
        let out = r.handle(Input::Coord(entries(a[0].clone(), 1)), 1).unwrap();
        let sent = to_switch(&out);
        assert_eq!(sent.len(), 4);
        let bundle_id = match sent[0].1 {
            OfMessage::BundleOpen { bundle_id } => bundle_id,
            ref m => panic!("{m:?}"),
        };
        assert!(matches!(&sent[1].1, OfMessage::BundleAdd { inner, .. } if matches!(**inner, OfMessage::PacketOut { ref actions, .. } if actions == &vec![Action::Output(2)])));
        assert_eq!(sent[3].1, OfMessage::BundleCommit { bundle_id });
        assert!(appends(&out).is_empty());
        assert!(!r.is_idle());
        let out = r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: OfMessage::BundleReply { bundle_id, success: true } }, 2).unwrap();
        assert_eq!(appends(&out), vec![vec![LogBody::Processed { event_id: EventId(1) }]]);
    }

    #[test]
    fn rejected_bundle_is_fatal() {
        let mut r = Replica::new(cfg(1));
        boot(&mut r, true);
        let err = r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: OfMessage::BundleReply { bundle_id: 4, success: false } }, 0);
        assert_eq!(err, Err(ReplicaError::BundleRejected { switch: SwitchId(1), bundle_id: 4 }));
    }

    #[test]
    fn slave_records_marker_without_buffering() {
        let mut r = Replica::new(cfg(1));
        boot(&mut r, false);
        let OfMessage::PacketOut { payload, .. } = make_commit_marker(Epoch(1), &[EventId(7)]).unwrap() else { panic!() };
        let marker_in = OfMessage::PacketIn { switch_id: SwitchId(1), switch_seq: 3, buffer_id: 0, in_port: 0, payload };
        r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: marker_in }, 0).unwrap();
        assert!(r.processed_at_switch(EventId(7), SwitchId(1)));
        assert_eq!(r.buffered(), 0);
    }

    #[test]
    fn slave_filters_and_replays_without_commands() {
        let mut r = Replica::new(cfg(1));
        boot(&mut r, false);
        r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 1) }, 0).unwrap();
        assert_eq!(r.buffered(), 1);
        let ev = RamaEvent {
            event_id: EventId(5),
            switch_id: SwitchId(1),
            switch_seq: 1,
            message: EventMessage::PacketIn { in_port: 1, buffer_id: 0, payload: vec![2, 0, 0, 0, 0, 9] },
        };
        r.handle(Input::Coord(entries(vec![LogBody::Event(ev)], 1)), 1).unwrap();
        assert_eq!(r.buffered(), 0);
        assert!(r.delivered().is_empty());
        let out = r.handle(Input::Coord(entries(vec![LogBody::Processed { event_id: EventId(5) }], 2)), 2).unwrap();
        assert_eq!(r.delivered(), &[EventId(5)]);
        assert!(to_switch(&out).is_empty());
    }

    #[test]
    fn processed_for_unknown_event_is_fatal() {
        let mut r = Replica::new(cfg(1));
        boot(&mut r, false);
        let res = r.handle(Input::Coord(entries(vec![LogBody::Processed { event_id: EventId(9) }], 1)), 0);
        assert_eq!(res, Err(ReplicaError::UnknownProcessed(EventId(9))));
    }

    struct TwoSwitches;

    impl App for TwoSwitches {
        fn name(&self) -> &str {
            "two"
        }

        fn on_event(&mut self, _e: &RamaEvent, ctx: &mut AppContext) -> Result<(), AppError> {
            for s in [2, 1] {
                ctx.write(SwitchId(s), OfMessage::PacketOut { actions: vec![Action::Output(3)], payload: vec![s as u8] })?;
            }
            Ok(())
        }
    }

    struct Silent;

    impl App for Silent {
        fn name(&self) -> &str {
            "silent"
        }

        fn on_event(&mut self, _e: &RamaEvent, _ctx: &mut AppContext) -> Result<(), AppError> {
            Ok(())
        }
    }

    #[test]
    fn writes_to_two_switches_make_two_bundles() {
        let mut r = Replica::with_apps(cfg(1), vec![Box::new(TwoSwitches)]);
        boot(&mut r, true);
        let a = appends(&r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 1) }, 0).unwrap());
        let out = r.handle(Input::Coord(entries(a[0].clone(), 1)), 1).unwrap();
        let commits: Vec<_> = to_switch(&out)
            .into_iter()
            .filter_map(|(s, m)| matches!(m, OfMessage::BundleCommit { .. }).then_some(s))
            .collect();
        assert_eq!(commits, vec![SwitchId(1), SwitchId(2)]);
    }

    #[test]
    fn zero_commands_logs_processed_at_once() {
        let mut r = Replica::with_apps(cfg(1), vec![Box::new(Silent)]);
        boot(&mut r, true);
        let a = appends(&r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 1) }, 0).unwrap());
        let out = r.handle(Input::Coord(entries(a[0].clone(), 1)), 1).unwrap();
        assert!(to_switch(&out).is_empty());
        assert_eq!(appends(&out), vec![vec![LogBody::Processed { event_id: EventId(1) }]]);
    }

    #[test]
    fn switch_failure_releases_pending_event() {
        let mut r = Replica::new(cfg(1));
        boot(&mut r, true);
        let a = appends(&r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: pin(1, 1) }, 0).unwrap());
        r.handle(Input::Coord(entries(a[0].clone(), 1)), 1).unwrap();
        let out = r.handle(Input::SwitchDisconnected { switch: SwitchId(1) }, 2).unwrap();
        let bodies: Vec<_> = appends(&out).into_iter().flatten().collect();
        assert!(bodies.contains(&LogBody::Processed { event_id: EventId(1) }));
        assert!(bodies.iter().any(|b| matches!(b, LogBody::Event(e) if e.message == EventMessage::SwitchDown && e.switch_seq == 2)));
    }

    #[test]
    fn promotion_resends_only_without_marker() {
        let mut r = Replica::new(cfg(1));
        boot(&mut r, false);
        let ev = |id: u64, sw: u64| {
            LogBody::Event(RamaEvent {
                event_id: EventId(id),
                switch_id: SwitchId(sw),
                switch_seq: 1,
                message: EventMessage::PacketIn { in_port: 1, buffer_id: 0, payload: vec![2, 0, 0, 0, 0, 9] },
            })
        };
        r.handle(Input::Coord(entries(vec![ev(1, 1), ev(2, 2)], 1)), 0).unwrap();
        // the marker for event 1 reached us, the one for event 2 did not
        let OfMessage::PacketOut { payload, .. } = make_commit_marker(Epoch(1), &[EventId(1)]).unwrap() else { panic!() };
        r.handle(Input::SwitchMessage { switch: SwitchId(1), msg: OfMessage::PacketIn { switch_id: SwitchId(1), switch_seq: 2, buffer_id: 0, in_port: 0, payload } }, 0).unwrap();

        let out = r.handle(Input::Coord(CoordReply::Leadership { epoch: Epoch(2), leader: Some(ControllerId(1)), is_leader: true }), 10).unwrap();
        assert_eq!(r.role(), Role::Promoting);
        assert_eq!(r.delivered(), &[EventId(1), EventId(2)]);
        let sent = to_switch(&out);
        assert_eq!(sent, vec![(SwitchId(2), OfMessage::BarrierRequest { xid: 1 })]);
        // event 1 needs nothing more
        assert_eq!(appends(&out), vec![vec![LogBody::Processed { event_id: EventId(1) }]]);

        let out = r.handle(Input::SwitchMessage { switch: SwitchId(2), msg: OfMessage::BarrierReply { xid: 1 } }, 11).unwrap();
        let sent = to_switch(&out);
        assert!(sent.iter().any(|(s, m)| *s == SwitchId(2) && matches!(m, OfMessage::BundleCommit { .. })));
        assert!(!sent.iter().any(|(s, m)| *s == SwitchId(1) && matches!(m, OfMessage::BundleCommit { .. })));
        assert_eq!(r.role(), Role::Master);
        assert!(appends(&out).is_empty());
    }
}
