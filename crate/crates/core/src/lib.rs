//! Fault-tolerant SDN control with exactly-once events and commands.
//!
//! Controller replicas ([`ctrl`]) order switch events through a shared log
//! ([`coord`]) and commit commands to simulated switches ([`switchsim`]) in
//! bundles. [`harness`] runs scenarios, injects faults and checks traces.

pub mod apps;
pub mod coord;
pub mod ctrl;
pub mod harness;
pub mod ofwire;
pub mod switchsim;
pub mod trace;
pub mod types;

pub use types::{ConnId, ControllerId, Epoch, EventId, MacAddr, Nanos, SessionId, SwitchId, MICROS, MILLIS};
