//! Bundle manager: wraps one event's commands for one switch into a bundle
//! closed by a commit marker, and tracks which switches still owe a reply.

use std::collections::{BTreeMap, BTreeSet};

use crate::ofwire::{make_commit_marker, OfMessage};
use crate::types::{Epoch, EventId, SwitchId};

#[derive(Debug, Default)]
pub struct BundleManager {
    next_bundle: u32,
    owner: BTreeMap<(SwitchId, u32), EventId>,
    awaiting: BTreeMap<EventId, BTreeSet<SwitchId>>,
}

impl BundleManager {
    /// Builds `Open, Add*, Add(marker), Commit` for `(event, switch)`.
    /// The Commit is always the last message.
    pub fn build(
        &mut self,
        epoch: Epoch,
        event: EventId,
        switch: SwitchId,
        commands: &[OfMessage],
        with_marker: bool,
    ) -> (u32, Vec<OfMessage>) {
        self.next_bundle = self.next_bundle.wrapping_add(1).max(1);
        let bundle_id = self.next_bundle;
        let mut msgs = Vec::with_capacity(commands.len() + 3);
        msgs.push(OfMessage::BundleOpen { bundle_id });
        for c in commands {
            msgs.push(OfMessage::BundleAdd { bundle_id, inner: Box::new(c.clone()) });
        }
        if with_marker {
            let marker = make_commit_marker(epoch, &[event]).expect("one event id");
            msgs.push(OfMessage::BundleAdd { bundle_id, inner: Box::new(marker) });
        }
        msgs.push(OfMessage::BundleCommit { bundle_id });
        self.owner.insert((switch, bundle_id), event);
        self.awaiting.entry(event).or_default().insert(switch);
        (bundle_id, msgs)
    }

    /// Event now waiting on no switch, if any.
    pub fn on_reply(&mut self, switch: SwitchId, bundle_id: u32) -> Option<EventId> {
        let event = self.owner.remove(&(switch, bundle_id))?;
        let done = match self.awaiting.get_mut(&event) {
            Some(set) => {
                // a duplicated bundle keeps the switch owed until its last reply
                if !self.owner.iter().any(|(&(s, _), &e)| s == switch && e == event) {
                    set.remove(&switch);
                }
                set.is_empty()
            }
            None => false,
        };
        if done {
            self.awaiting.remove(&event);
            Some(event)
        } else {
            None
        }
    }

    /// The switch failed: nothing more is owed by it. Returns completed events.
    pub fn on_switch_down(&mut self, switch: SwitchId) -> Vec<EventId> {
        self.owner.retain(|(s, _), _| *s != switch);
        let mut done = Vec::new();
        self.awaiting.retain(|e, set| {
            set.remove(&switch);
            if set.is_empty() {
                done.push(*e);
                false
            } else {
                true
            }
        });
        done
    }

    pub fn is_awaiting(&self, event: EventId) -> bool {
        self.awaiting.contains_key(&event)
    }

    pub fn is_empty(&self) -> bool {
        self.awaiting.is_empty()
    }

    pub fn clear(&mut self) {
        self.owner.clear();
        self.awaiting.clear();
    }
}
