//! Request/reply surface of the coordination service.
//!
//! [`CoordFrontend`] binds transport-level clients to sessions and turns
//! service notifications into per-client replies. In socket mode requests and
//! replies travel as frames `len | tag | json`, using the same length prefix as
//! the OpenFlow framing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CoordError, CoordService, LogBody, LogEntry, Notification, SeqRange};
use crate::ofwire::{encode_frame, WireError};
use crate::types::{ControllerId, Epoch, Nanos, SessionId};

/// Transport-level identity of a connected client.
pub type ClientId = u64;

const TAG_REQUEST: u8 = 0x40;
const TAG_REPLY: u8 = 0x41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CoordRequest {
    OpenSession { owner: ControllerId, timeout: Nanos },
    Heartbeat,
    Append { req_id: u64, epoch: Epoch, bodies: Vec<LogBody> },
    Watch { from_seq: u64 },
    Elect,
    Resign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CoordReply {
    SessionOpened { session: SessionId },
    Appended { req_id: u64, result: Result<SeqRange, CoordError> },
    Entries { entries: Vec<LogEntry> },
    Leadership { epoch: Epoch, leader: Option<ControllerId>, is_leader: bool },
    SessionExpired { session: SessionId, owner: ControllerId },
    Error { error: CoordError },
}

impl CoordRequest {
    /// Number of log entries carried, zero for control requests.
    pub fn entry_count(&self) -> usize {
        match self {
            CoordRequest::Append { bodies, .. } => bodies.len(),
            _ => 0,
        }
    }
}

impl CoordReply {
    pub fn entry_count(&self) -> usize {
        match self {
            CoordReply::Entries { entries } => entries.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct CoordFrontend {
    service: CoordService,
    session_of: BTreeMap<ClientId, SessionId>,
    client_of: BTreeMap<SessionId, ClientId>,
}

impl CoordFrontend {
    pub fn new(service: CoordService) -> Self {
        CoordFrontend { service, ..Default::default() }
    }

    pub fn service(&self) -> &CoordService {
        &self.service
    }

    pub fn service_mut(&mut self) -> &mut CoordService {
        &mut self.service
    }

    fn route(&mut self, out: &mut Vec<(ClientId, CoordReply)>) {
        for n in self.service.drain_notifications() {
            let Some(&client) = self.client_of.get(&n.recipient()) else {
                continue;
            };
            let reply = match n {
                Notification::Entries { entries, .. } => CoordReply::Entries { entries },
                Notification::Leadership { epoch, leader, is_leader, .. } => {
                    CoordReply::Leadership { epoch, leader, is_leader }
                }
                Notification::SessionExpired { expired, owner, .. } => {
                    CoordReply::SessionExpired { session: expired, owner }
                }
            };
            out.push((client, reply));
        }
    }

    pub fn handle(&mut self, client: ClientId, req: CoordRequest, now: Nanos) -> Vec<(ClientId, CoordReply)> {
        let mut out = Vec::new();
        if let CoordRequest::OpenSession { owner, timeout } = req {
            let session = self.service.open_session(owner, timeout, now);
            self.session_of.insert(client, session);
            self.client_of.insert(session, client);
            out.push((client, CoordReply::SessionOpened { session }));
            return out;
        }
        let Some(&session) = self.session_of.get(&client) else {
            out.push((client, CoordReply::Error { error: CoordError::NoSession }));
            return out;
        };
        let err = match req {
            CoordRequest::OpenSession { .. } => unreachable!(),
            CoordRequest::Heartbeat => self.service.heartbeat(session, now).err(),
            CoordRequest::Append { req_id, epoch, bodies } => {
                let result = self.service.append_batch(session, epoch, bodies, now);
                // the ack precedes the watch notifications carrying the same entries
                out.push((client, CoordReply::Appended { req_id, result }));
                None
            }
            CoordRequest::Watch { from_seq } => self.service.watch(session, from_seq, now).err(),
            CoordRequest::Elect => self.service.elect(session, now).err(),
            CoordRequest::Resign => {
                self.service.resign(session, now);
                None
            }
        };
        if let Some(error) = err {
            out.push((client, CoordReply::Error { error }));
        }
        self.route(&mut out);
        out
    }

    pub fn tick(&mut self, now: Nanos) -> Vec<(ClientId, CoordReply)> {
        self.service.tick(now);
        let mut out = Vec::new();
        self.route(&mut out);
        out
    }
}

fn encode_json<T: Serialize>(tag: u8, v: &T) -> Result<Vec<u8>, WireError> {
    let mut body = vec![tag];
    serde_json::to_writer(&mut body, v).map_err(|_| WireError::Malformed("json encode"))?;
    encode_frame(&body)
}

fn decode_json<T: for<'de> Deserialize<'de>>(tag: u8, tagged_body: &[u8]) -> Result<T, WireError> {
    match tagged_body.split_first() {
        Some((t, json)) if *t == tag => serde_json::from_slice(json).map_err(|_| WireError::Malformed("json body")),
        Some((t, _)) => Err(WireError::UnknownTag(*t)),
        None => Err(WireError::Malformed("empty frame")),
    }
}

pub fn encode_request(req: &CoordRequest) -> Result<Vec<u8>, WireError> {
    encode_json(TAG_REQUEST, req)
}

pub fn encode_reply(reply: &CoordReply) -> Result<Vec<u8>, WireError> {
    encode_json(TAG_REPLY, reply)
}

/// Decodes a `tag | body` slice as produced by [`crate::ofwire::split_frame`].
pub fn decode_request(tagged_body: &[u8]) -> Result<CoordRequest, WireError> {
    decode_json(TAG_REQUEST, tagged_body)
}

pub fn decode_reply(tagged_body: &[u8]) -> Result<CoordReply, WireError> {
    decode_json(TAG_REPLY, tagged_body)
}
