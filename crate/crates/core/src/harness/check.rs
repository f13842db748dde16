//! Offline trace checker.
//!
//! Verifies a finished run against five properties:
//!
//! * `total_order`: every replica's delivery sequence is a prefix of the
//!   shared log order, so any two are prefixes of one another.
//! * `events_exactly_once`: each switch event is logged under exactly one id,
//!   processed, and delivered at most once per replica; survivors deliver
//!   everything processed.
//! * `commands_exactly_once`: each (event, switch) pair with commands was
//!   executed as exactly one contiguous, marker-terminated bundle whose
//!   contents match an independent replay of the applications.
//! * `switch_fifo`: per switch, event ids follow switch sequence numbers.
//! * `epoch_fencing`: every log append carried the current leadership epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use crate::apps::{build_app, run_apps, AppContext};
use crate::coord::LogBody;
use crate::ctrl::RamaEvent;
use crate::ofwire::{parse_commit_marker, OfMessage};
use crate::switchsim::Origin;
use crate::trace::{Actor, TraceKind, TraceRecord};
use crate::types::{ConnId, ControllerId, EventId, SwitchId};

const MAX_COUNTEREXAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    /// Indices into the trace of the offending records.
    pub counterexample: Vec<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckStats {
    pub records: usize,
    pub events_logged: usize,
    pub processed_logged: usize,
    pub bundles: usize,
    pub commands_executed: usize,
    pub delivered: BTreeMap<ControllerId, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub properties: Vec<PropertyResult>,
    pub stats: CheckStats,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.pass)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.properties.iter().filter(|p| !p.pass).map(|p| p.name.as_str()).collect()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            let verdict = if p.pass { "PASS" } else { "FAIL" };
            write!(f, "{verdict} {}", p.name)?;
            if !p.pass {
                write!(f, ": {} (records {:?})", p.message, p.counterexample)?;
            }
            writeln!(f)?;
        }
        let s = &self.stats;
        write!(
            f,
            "{} records, {} events logged, {} processed, {} bundles, {} commands executed",
            s.records, s.events_logged, s.processed_logged, s.bundles, s.commands_executed
        )
    }
}

/// Accumulates failures for one property.
struct Prop {
    name: &'static str,
    bad: Vec<usize>,
    message: Option<String>,
}

impl Prop {
    fn new(name: &'static str) -> Self {
        Prop { name, bad: Vec::new(), message: None }
    }

    fn fail(&mut self, idx: Option<usize>, msg: impl Into<String>) {
        if self.message.is_none() {
            self.message = Some(msg.into());
        }
        if let Some(i) = idx {
            if self.bad.len() < MAX_COUNTEREXAMPLES {
                self.bad.push(i);
            }
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name.to_string(),
            pass: self.message.is_none(),
            counterexample: self.bad,
            message: self.message.unwrap_or_default(),
        }
    }
}

struct Logged {
    idx: usize,
    seq: u64,
    event: RamaEvent,
}

/// First record index of a bundle and its commands before the marker.
type BundleBody = (usize, Vec<OfMessage>);

struct ExecutedCmd {
    idx: usize,
    index: u64,
    command: OfMessage,
}

/// Everything the properties need, pulled out of the raw records.
#[derive(Default)]
struct Facts {
    config: ScenarioConfig,
    events: Vec<Logged>,
    processed: BTreeMap<EventId, usize>,
    delivered: BTreeMap<ControllerId, Vec<(usize, EventId)>>,
    crashed_ctrl: BTreeSet<ControllerId>,
    crashed_switch: BTreeSet<SwitchId>,
    misses: Vec<(usize, SwitchId, u64)>,
    bundles: BTreeMap<(SwitchId, ConnId, u32), Vec<ExecutedCmd>>,
    direct: Vec<usize>,
    appends: Vec<(usize, u64, u64)>,
}

fn gather(trace: &[TraceRecord]) -> Facts {
    let mut f = Facts::default();
    for (idx, r) in trace.iter().enumerate() {
        match (r.kind, r.actor) {
            (TraceKind::Scenario, _) => {
                if let Some(cfg) = r.detail.get("config").and_then(|c| serde_json::from_value(c.clone()).ok()) {
                    f.config = cfg;
                }
            }
            (TraceKind::Logged, _) => {
                let leader_epoch = r.detail.get("leader_epoch").and_then(|v| v.as_u64()).unwrap_or(r.epoch.0);
                f.appends.push((idx, r.epoch.0, leader_epoch));
                let seq = r.detail.get("seq").and_then(|v| v.as_u64()).unwrap_or(0);
                match r.detail.get("body").and_then(|b| serde_json::from_value::<LogBody>(b.clone()).ok()) {
                    Some(LogBody::Event(event)) => f.events.push(Logged { idx, seq, event }),
                    Some(LogBody::Processed { event_id }) => {
                        f.processed.entry(event_id).or_insert(idx);
                    }
                    None => {}
                }
            }
            (TraceKind::Delivered, Actor::Controller(c)) => {
                if let Some(e) = r.event_id {
                    f.delivered.entry(c).or_default().push((idx, e));
                }
            }
            (TraceKind::Crashed, Actor::Controller(c)) => {
                f.crashed_ctrl.insert(c);
            }
            (TraceKind::SwitchCrashed, Actor::Switch(s)) => {
                f.crashed_switch.insert(s);
            }
            (TraceKind::PacketIn, Actor::Switch(s)) => {
                let miss = r.detail.get("source").and_then(|v| v.as_str()) == Some("miss");
                let conns = r.detail.get("conns").and_then(|v| v.as_u64()).unwrap_or(1);
                if miss && conns > 0 {
                    f.misses.push((idx, s, r.switch_seq.unwrap_or(0)));
                }
            }
            (TraceKind::Executed, Actor::Switch(s)) => {
                let origin = r.detail.get("origin").and_then(|o| serde_json::from_value::<Origin>(o.clone()).ok());
                let command = r.detail.get("command").and_then(|c| serde_json::from_value::<OfMessage>(c.clone()).ok());
                let index = r.detail.get("index").and_then(|v| v.as_u64()).unwrap_or(0);
                match (origin, command) {
                    (Some(Origin::Bundle { conn, bundle_id }), Some(command)) => {
                        f.bundles.entry((s, conn, bundle_id)).or_default().push(ExecutedCmd { idx, index, command });
                    }
                    (Some(Origin::Direct { .. }), _) => f.direct.push(idx),
                    _ => {}
                }
            }
            _ => {}
        }
    }
    f.events.sort_by_key(|l| l.seq);
    f
}

fn total_order(f: &Facts) -> PropertyResult {
    let mut p = Prop::new("total_order");
    let order: Vec<EventId> = f.events.iter().map(|l| l.event.event_id).collect();
    for (c, seq) in &f.delivered {
        for (i, (idx, e)) in seq.iter().enumerate() {
            if order.get(i) != Some(e) {
                p.fail(Some(*idx), format!("{c} delivered {e} at position {} where the log has {:?}", i + 1, order.get(i)));
                break;
            }
        }
    }
    let ctrls: Vec<_> = f.delivered.iter().collect();
    for (i, (a, sa)) in ctrls.iter().enumerate() {
        for (b, sb) in &ctrls[i + 1..] {
            if let Some(k) = (0..sa.len().min(sb.len())).find(|&k| sa[k].1 != sb[k].1) {
                p.fail(Some(sa[k].0), format!("{a} and {b} diverge at position {}", k + 1));
                p.fail(Some(sb[k].0), "");
            }
        }
    }
    p.finish()
}

fn events_exactly_once(f: &Facts) -> PropertyResult {
    let mut p = Prop::new("events_exactly_once");
    let mut by_key: BTreeMap<(SwitchId, u64), &Logged> = BTreeMap::new();
    let mut by_id: BTreeMap<EventId, &Logged> = BTreeMap::new();
    for l in &f.events {
        if let Some(prev) = by_key.insert(l.event.key(), l) {
            p.fail(Some(l.idx), format!("switch event {:?} logged as {} and {}", l.event.key(), prev.event.event_id, l.event.event_id));
        }
        if let Some(prev) = by_id.insert(l.event.event_id, l) {
            if prev.event.key() != l.event.key() {
                p.fail(Some(l.idx), format!("{} reused for two switch events", l.event.event_id));
            }
        }
    }
    for &(idx, s, seq) in &f.misses {
        if !by_key.contains_key(&(s, seq)) {
            p.fail(Some(idx), format!("packet-in {s}#{seq} was never logged"));
        }
    }
    for l in &f.events {
        if !f.processed.contains_key(&l.event.event_id) {
            p.fail(Some(l.idx), format!("{} logged but never processed", l.event.event_id));
        }
    }
    for (c, seq) in &f.delivered {
        let mut seen = BTreeSet::new();
        for &(idx, e) in seq {
            if !seen.insert(e) {
                p.fail(Some(idx), format!("{c} delivered {e} twice"));
            }
        }
        if f.crashed_ctrl.contains(c) {
            continue;
        }
        for e in f.processed.keys() {
            if !seen.contains(e) {
                p.fail(f.processed.get(e).copied(), format!("surviving {c} never delivered processed {e}"));
            }
        }
    }
    p.finish()
}

fn commands_exactly_once(f: &Facts) -> PropertyResult {
    let mut p = Prop::new("commands_exactly_once");
    for &idx in &f.direct {
        p.fail(Some(idx), "command executed outside a bundle");
    }

    // independent replay of the applications over the log order
    let mut apps = vec![build_app(f.config.app, &f.config.ports)];
    let mut expected: BTreeMap<(EventId, SwitchId), Vec<OfMessage>> = BTreeMap::new();
    let mut event_at: BTreeMap<EventId, usize> = BTreeMap::new();
    let mut replayed = BTreeSet::new();
    for l in &f.events {
        if !replayed.insert(l.event.event_id) {
            continue;
        }
        event_at.insert(l.event.event_id, l.idx);
        let mut ctx = AppContext::idle();
        ctx.begin(l.event.event_id);
        let writes = run_apps(&mut apps, &l.event, &mut ctx).unwrap_or_default();
        for (s, cmd) in writes {
            expected.entry((l.event.event_id, s)).or_default().push(cmd);
        }
    }

    let mut seen: BTreeMap<(EventId, SwitchId), Vec<BundleBody>> = BTreeMap::new();
    for ((s, _, bundle), cmds) in &f.bundles {
        let first = cmds[0].idx;
        let marker = cmds.last().and_then(|c| parse_commit_marker(&c.command).ok().flatten());
        let Some(marker) = marker.filter(|m| m.event_ids.len() == 1) else {
            p.fail(Some(first), format!("bundle {bundle} at {s} is unattributed: it does not end with a commit marker"));
            continue;
        };
        if cmds.windows(2).any(|w| w[1].index != w[0].index + 1) {
            p.fail(Some(first), format!("bundle {bundle} at {s} executed non-contiguously"));
        }
        let body = cmds[..cmds.len() - 1].iter().map(|c| c.command.clone()).collect();
        seen.entry((marker.event_ids[0], *s)).or_default().push((first, body));
    }

    for (key @ (e, s), want) in &expected {
        let got = seen.get(key).map(Vec::as_slice).unwrap_or(&[]);
        let allowed = if f.crashed_switch.contains(s) { 0..=1 } else { 1..=1 };
        if !allowed.contains(&got.len()) {
            let idx = got.get(1).map(|g| g.0).or(event_at.get(e).copied());
            p.fail(idx, format!("{e} at {s}: {} bundles executed, expected one", got.len()));
        }
        for (idx, body) in got {
            if body != want {
                p.fail(Some(*idx), format!("{e} at {s}: executed commands differ from the replay"));
            }
        }
    }
    for ((e, s), got) in &seen {
        if !expected.contains_key(&(*e, *s)) {
            p.fail(Some(got[0].0), format!("bundle for {e} at {s}, which has no commands"));
        }
    }
    p.finish()
}

fn switch_fifo(f: &Facts) -> PropertyResult {
    let mut p = Prop::new("switch_fifo");
    let mut per_switch: BTreeMap<SwitchId, BTreeMap<EventId, (u64, usize)>> = BTreeMap::new();
    for l in &f.events {
        per_switch.entry(l.event.switch_id).or_default().insert(l.event.event_id, (l.event.switch_seq, l.idx));
    }
    for (s, evs) in &per_switch {
        let mut last: Option<(EventId, u64)> = None;
        for (e, &(seq, idx)) in evs {
            if let Some((pe, ps)) = last {
                if seq <= ps {
                    p.fail(Some(idx), format!("at {s}, {e} has seq {seq} but earlier {pe} has seq {ps}"));
                }
            }
            last = Some((*e, seq));
        }
    }
    p.finish()
}

fn epoch_fencing(f: &Facts) -> PropertyResult {
    let mut p = Prop::new("epoch_fencing");
    for &(idx, epoch, leader) in &f.appends {
        if epoch != leader {
            p.fail(Some(idx), format!("entry appended under epoch {epoch} while the leader epoch was {leader}"));
        }
    }
    p.finish()
}

pub fn check_trace(trace: &[TraceRecord]) -> CheckReport {
    let f = gather(trace);
    let properties = vec![total_order(&f), events_exactly_once(&f), commands_exactly_once(&f), switch_fifo(&f), epoch_fencing(&f)];
    let stats = CheckStats {
        records: trace.len(),
        events_logged: f.events.len(),
        processed_logged: f.processed.len(),
        bundles: f.bundles.len(),
        commands_executed: f.bundles.values().map(|b| b.len()).sum(),
        delivered: f.delivered.iter().map(|(c, d)| (*c, d.len())).collect(),
    };
    CheckReport { properties, stats }
}
