//! Controller applications and the context they write commands through.
//!
//! Applications see events in delivery order and issue commands with
//! [`AppContext::write`]. They know nothing about replication: whatever the
//! runtime does with the writes (bundling, discarding on a slave) is invisible
//! to them. Applications must be deterministic functions of the delivered
//! event sequence.

mod forwarding;
mod learning;

pub use forwarding::{ForwardingApp, StaticPortMap};
pub use learning::LearningSwitch;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctrl::RamaEvent;
use crate::ofwire::OfMessage;
use crate::types::{EventId, SwitchId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppError {
    #[error("write outside an event callback")]
    NotInEvent,
    #[error("applications may only write PacketOut or FlowMod, got {0}")]
    NotACommand(&'static str),
    #[error("invalid command: {0}")]
    Invalid(String),
    #[error("application failure: {0}")]
    Failed(String),
}

/// Write sink handed to applications for the duration of one event.
#[derive(Debug, Default)]
pub struct AppContext {
    current: Option<EventId>,
    writes: Vec<(SwitchId, OfMessage)>,
}

impl AppContext {
    pub fn idle() -> Self {
        AppContext::default()
    }

    pub(crate) fn begin(&mut self, event: EventId) {
        self.current = Some(event);
        self.writes.clear();
    }

    pub(crate) fn finish(&mut self) -> Vec<(SwitchId, OfMessage)> {
        self.current = None;
        std::mem::take(&mut self.writes)
    }

    pub fn current_event(&self) -> Option<EventId> {
        self.current
    }

    pub fn write(&mut self, switch: SwitchId, msg: OfMessage) -> Result<(), AppError> {
        if self.current.is_none() {
            return Err(AppError::NotInEvent);
        }
        if !msg.is_command() {
            return Err(AppError::NotACommand(msg.name()));
        }
        msg.validate().map_err(|e| AppError::Invalid(e.to_string()))?;
        self.writes.push((switch, msg));
        Ok(())
    }
}

pub trait App: Send {
    fn name(&self) -> &str;

    fn on_event(&mut self, event: &RamaEvent, ctx: &mut AppContext) -> Result<(), AppError>;
}

/// Application selection as it appears in scenario configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    #[default]
    Forwarding,
    Learning,
}

impl std::str::FromStr for AppKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forwarding" => Ok(AppKind::Forwarding),
            "learning" => Ok(AppKind::Learning),
            _ => Err(format!("unknown app {s:?}")),
        }
    }
}

pub fn build_app(kind: AppKind, ports: &StaticPortMap) -> Box<dyn App> {
    match kind {
        AppKind::Forwarding => Box::new(ForwardingApp::new(ports.clone())),
        AppKind::Learning => Box::new(LearningSwitch::new()),
    }
}

/// Runs `apps` over one event and returns the writes it produced.
pub fn run_apps(apps: &mut [Box<dyn App>], event: &RamaEvent, ctx: &mut AppContext) -> Result<Vec<(SwitchId, OfMessage)>, AppError> {
    ctx.begin(event.event_id);
    let mut result = Ok(());
    for app in apps.iter_mut() {
        if let Err(e) = app.on_event(event, ctx) {
            result = Err(e);
            break;
        }
    }
    let writes = ctx.finish();
    result.map(|_| writes)
}
