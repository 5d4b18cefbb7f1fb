//! Wire messages exchanged between the server and client agents.
//!
//! Every message is one ASCII line, tokens separated by single spaces and
//! terminated by `\n`:
//!
//! ```text
//! HEARTBEAT_MSG <host_id> <availability>
//! LAUNCH <app_id> [<replica_id>]
//! INVOKE_REPLICA <app_id> [<replica_id>]
//! SUSPEND <replica_id>
//! ACTIVATE <replica_id>
//! MIGRATE <replica_id> <target_host>
//! DATABASE_DONE_MSG <replica_id>
//! ```
//!
//! Replicas reach the record server over the same connection with the
//! [`DataRequest`] / [`DataReply`] lines. Payloads in those lines use the
//! escaping in [`escape`].

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod escape;

/// Default server port.
pub const DEFAULT_PORT: u16 = 7070;

/// Number of missed heartbeat periods after which a host leaves the pool.
pub const STALE_PERIODS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u64);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Percentage of a host's CPU that the middleware may exploit, 0..=100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Availability(u8);

impl Availability {
    pub const FULL: Availability = Availability(100);
    pub const ZERO: Availability = Availability(0);

    pub fn new(percent: u8) -> Option<Self> {
        (percent <= 100).then_some(Availability(percent))
    }

    /// Clamps to 100.
    pub fn saturating(percent: u32) -> Self {
        Availability(percent.min(100) as u8)
    }

    pub fn percent(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Availability {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Availability::new(v).ok_or_else(|| format!("availability {v} exceeds 100"))
    }
}

impl From<Availability> for u8 {
    fn from(a: Availability) -> u8 {
        a.0
    }
}

impl fmt::Display for Availability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A host's entry in the server's pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStatus {
    pub host_id: HostId,
    pub availability: Availability,
    pub active_replicas: u32,
    pub suspended_replicas: u32,
    /// Monotonic timestamp of the last heartbeat, in milliseconds.
    pub last_seen: u64,
}

impl HostStatus {
    pub fn new(host_id: HostId, availability: Availability, last_seen: u64) -> Self {
        HostStatus { host_id, availability, active_replicas: 0, suspended_replicas: 0, last_seen }
    }
}

/// Heartbeat payload as it travels on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub host_id: HostId,
    pub availability: Availability,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Heartbeat(Heartbeat),
    /// Start the application on the origin host.
    Launch { app_id: String, replica: Option<ReplicaId> },
    /// Start a new replica of the application on a client host.
    InvokeReplica { app_id: String, replica: Option<ReplicaId> },
    Suspend(ReplicaId),
    Activate(ReplicaId),
    Migrate { replica: ReplicaId, target: HostId },
    DatabaseDone(ReplicaId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed message: {reason}: {line:?}")]
    MalformedMessage { line: String, reason: &'static str },
}

fn malformed(line: &str, reason: &'static str) -> ProtocolError {
    ProtocolError::MalformedMessage { line: line.trim_end_matches('\n').to_string(), reason }
}

/// An app id must be one non-empty token of printable ASCII.
pub fn valid_app_id(app_id: &str) -> bool {
    !app_id.is_empty() && app_id.bytes().all(|b| b.is_ascii_graphic())
}

impl Message {
    pub fn tag(&self) -> &'static str {
        match self {
            Message::Heartbeat(_) => "HEARTBEAT_MSG",
            Message::Launch { .. } => "LAUNCH",
            Message::InvokeReplica { .. } => "INVOKE_REPLICA",
            Message::Suspend(_) => "SUSPEND",
            Message::Activate(_) => "ACTIVATE",
            Message::Migrate { .. } => "MIGRATE",
            Message::DatabaseDone(_) => "DATABASE_DONE_MSG",
        }
    }

    /// Encodes the message as one newline-terminated line.
    ///
    /// Panics if an app id is not a single printable token; construct
    /// launch messages from ids checked with [`valid_app_id`].
    pub fn encode(&self) -> String {
        let body = match self {
            Message::Heartbeat(hb) => format!("{} {}", hb.host_id, hb.availability),
            Message::Launch { app_id, replica } | Message::InvokeReplica { app_id, replica } => {
                assert!(valid_app_id(app_id), "app id {app_id:?} is not a single token");
                match replica {
                    Some(r) => format!("{app_id} {r}"),
                    None => app_id.clone(),
                }
            }
            Message::Suspend(r) | Message::Activate(r) | Message::DatabaseDone(r) => r.to_string(),
            Message::Migrate { replica, target } => format!("{replica} {target}"),
        };
        format!("{} {}\n", self.tag(), body)
    }

    pub fn decode(line: &str) -> Result<Message, ProtocolError> {
        let body = line.strip_suffix('\n').unwrap_or(line);
        let body = body.strip_suffix('\r').unwrap_or(body);
        let tokens: Vec<&str> = body.split(' ').collect();
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(malformed(line, "empty token"));
        }
        let (tag, args) = tokens.split_first().ok_or_else(|| malformed(line, "empty line"))?;

        let num = |s: &str| -> Result<u64, ProtocolError> {
            // u64::from_str accepts a leading '+', which would break round-tripping.
            if !s.bytes().all(|b| b.is_ascii_digit()) {
                return Err(malformed(line, "non-numeric field"));
            }
            s.parse::<u64>().map_err(|_| malformed(line, "non-numeric field"))
        };
        let replica = |s: &str| num(s).map(ReplicaId);
        let host = |s: &str| -> Result<HostId, ProtocolError> {
            u32::try_from(num(s)?).map(HostId).map_err(|_| malformed(line, "host id out of range"))
        };
        let arity = |n: usize| -> Result<(), ProtocolError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(malformed(line, "wrong arity"))
            }
        };

        match *tag {
            "HEARTBEAT_MSG" => {
                arity(2)?;
                let availability = u8::try_from(num(args[1])?)
                    .ok()
                    .and_then(Availability::new)
                    .ok_or_else(|| malformed(line, "availability out of range"))?;
                Ok(Message::Heartbeat(Heartbeat { host_id: host(args[0])?, availability }))
            }
            "LAUNCH" | "INVOKE_REPLICA" => {
                if args.is_empty() || args.len() > 2 {
                    return Err(malformed(line, "wrong arity"));
                }
                if !valid_app_id(args[0]) {
                    return Err(malformed(line, "invalid app id"));
                }
                let app_id = args[0].to_string();
                let replica = args.get(1).map(|s| replica(s)).transpose()?;
                Ok(if *tag == "LAUNCH" {
                    Message::Launch { app_id, replica }
                } else {
                    Message::InvokeReplica { app_id, replica }
                })
            }
            "SUSPEND" => {
                arity(1)?;
                Ok(Message::Suspend(replica(args[0])?))
            }
            "ACTIVATE" => {
                arity(1)?;
                Ok(Message::Activate(replica(args[0])?))
            }
            "MIGRATE" => {
                arity(2)?;
                Ok(Message::Migrate { replica: replica(args[0])?, target: host(args[1])? })
            }
            "DATABASE_DONE_MSG" => {
                arity(1)?;
                Ok(Message::DatabaseDone(replica(args[0])?))
            }
            _ => Err(malformed(line, "unknown tag")),
        }
    }
}

impl FromStr for Message {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Message::decode(s)
    }
}

/// Requests a replica's wrapper sends to the record server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataRequest {
    Open(ReplicaId),
    Read { replica: ReplicaId, size: u64 },
    Write { replica: ReplicaId, payload: Vec<u8> },
    Close(ReplicaId),
}

/// Server answers to [`DataRequest`]s. Every reply names the replica so an
/// agent can route it to the right session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataReply {
    Opened(ReplicaId),
    Record { replica: ReplicaId, payload: Vec<u8> },
    EndOfData(ReplicaId),
    Ack(ReplicaId),
    Closed(ReplicaId),
    Error { replica: ReplicaId, reason: String },
}

impl DataRequest {
    pub fn replica(&self) -> ReplicaId {
        match self {
            DataRequest::Open(r) | DataRequest::Close(r) => *r,
            DataRequest::Read { replica, .. } | DataRequest::Write { replica, .. } => *replica,
        }
    }

    pub fn encode(&self) -> String {
        match self {
            DataRequest::Open(r) => format!("DATA_OPEN {r}\n"),
            DataRequest::Read { replica, size } => format!("DATA_READ {replica} {size}\n"),
            DataRequest::Write { replica, payload } => {
                format!("DATA_WRITE {replica} {}\n", escape::escape(payload))
            }
            DataRequest::Close(r) => format!("DATA_CLOSE {r}\n"),
        }
    }

    pub fn decode(line: &str) -> Result<DataRequest, ProtocolError> {
        let body = line.strip_suffix('\n').unwrap_or(line);
        let t: Vec<&str> = body.split(' ').collect();
        let num = |s: &str| s.parse::<u64>().map_err(|_| malformed(line, "non-numeric field"));
        match t.as_slice() {
            ["DATA_OPEN", r] => Ok(DataRequest::Open(ReplicaId(num(r)?))),
            ["DATA_READ", r, size] => Ok(DataRequest::Read { replica: ReplicaId(num(r)?), size: num(size)? }),
            ["DATA_WRITE", r, payload] => Ok(DataRequest::Write {
                replica: ReplicaId(num(r)?),
                payload: escape::unescape(payload).map_err(|_| malformed(line, "bad escape"))?,
            }),
            ["DATA_CLOSE", r] => Ok(DataRequest::Close(ReplicaId(num(r)?))),
            _ => Err(malformed(line, "unknown data request")),
        }
    }
}

impl DataReply {
    pub fn replica(&self) -> ReplicaId {
        match self {
            DataReply::Opened(r)
            | DataReply::EndOfData(r)
            | DataReply::Ack(r)
            | DataReply::Closed(r)
            | DataReply::Record { replica: r, .. }
            | DataReply::Error { replica: r, .. } => *r,
        }
    }

    pub fn encode(&self) -> String {
        match self {
            DataReply::Opened(r) => format!("DATA_OPENED {r}\n"),
            DataReply::Record { replica, payload } => {
                format!("DATA_RECORD {replica} {}\n", escape::escape(payload))
            }
            DataReply::EndOfData(r) => format!("DATA_EOD {r}\n"),
            DataReply::Ack(r) => format!("DATA_ACK {r}\n"),
            DataReply::Closed(r) => format!("DATA_CLOSED {r}\n"),
            DataReply::Error { replica, reason } => {
                format!("DATA_ERROR {replica} {}\n", escape::escape(reason.as_bytes()))
            }
        }
    }

    pub fn decode(line: &str) -> Result<DataReply, ProtocolError> {
        let body = line.strip_suffix('\n').unwrap_or(line);
        let t: Vec<&str> = body.split(' ').collect();
        let r = |s: &str| s.parse::<u64>().map(ReplicaId).map_err(|_| malformed(line, "non-numeric field"));
        let bytes = |s: &str| escape::unescape(s).map_err(|_| malformed(line, "bad escape"));
        match t.as_slice() {
            ["DATA_OPENED", id] => Ok(DataReply::Opened(r(id)?)),
            ["DATA_RECORD", id, p] => Ok(DataReply::Record { replica: r(id)?, payload: bytes(p)? }),
            ["DATA_EOD", id] => Ok(DataReply::EndOfData(r(id)?)),
            ["DATA_ACK", id] => Ok(DataReply::Ack(r(id)?)),
            ["DATA_CLOSED", id] => Ok(DataReply::Closed(r(id)?)),
            ["DATA_ERROR", id, reason] => Ok(DataReply::Error {
                replica: r(id)?,
                reason: String::from_utf8_lossy(&bytes(reason)?).into_owned(),
            }),
            _ => Err(malformed(line, "unknown data reply")),
        }
    }
}

/// Anything that arrives on an agent connection at the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    Control(Message),
    Data(DataRequest),
}

impl Inbound {
    pub fn decode(line: &str) -> Result<Inbound, ProtocolError> {
        if line.starts_with("DATA_") {
            DataRequest::decode(line).map(Inbound::Data)
        } else {
            Message::decode(line).map(Inbound::Control)
        }
    }
}

/// Anything the server sends down to an agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    Control(Message),
    Data(DataReply),
}

impl Outbound {
    pub fn decode(line: &str) -> Result<Outbound, ProtocolError> {
        if line.starts_with("DATA_") {
            DataReply::decode(line).map(Outbound::Data)
        } else {
            Message::decode(line).map(Outbound::Control)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("heartbeat sink unavailable: {0}")]
pub struct SinkUnavailable(pub String);

/// Where heartbeats go. Implementations must tolerate calls from several
/// hosts' loops at once when shared.
pub trait HeartbeatSink {
    fn send(&mut self, heartbeat: Heartbeat) -> Result<(), SinkUnavailable>;
}

/// Paces the heartbeat loop. `wait` returns `false` once the loop should stop.
pub trait Ticker {
    fn wait(&mut self, period: Duration) -> bool;
}

/// Emits one heartbeat per period carrying the latest status until the
/// ticker signals shutdown. A failed send is dropped, not queued; the next
/// period sends fresh status. Returns the number of heartbeats delivered.
pub fn heartbeat_loop<S, K, T>(mut status_source: S, sink: &mut K, period: Duration, ticker: &mut T) -> u64
where
    S: FnMut() -> Heartbeat,
    K: HeartbeatSink + ?Sized,
    T: Ticker + ?Sized,
{
    assert!(!period.is_zero(), "heartbeat period must be positive");
    let mut delivered = 0;
    while ticker.wait(period) {
        match sink.send(status_source()) {
            Ok(()) => delivered += 1,
            Err(e) => log::warn!("{e}; retrying next period"),
        }
    }
    delivered
}

/// Wall-clock ticker that can be stopped from another thread.
#[derive(Debug, Clone, Default)]
pub struct StopFlag {
    inner: std::sync::Arc<(std::sync::Mutex<bool>, std::sync::Condvar)>,
}

impl StopFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        let (lock, cv) = &*self.inner;
        *lock.lock().unwrap() = true;
        cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        *self.inner.0.lock().unwrap()
    }
}

impl Ticker for StopFlag {
    fn wait(&mut self, period: Duration) -> bool {
        let (lock, cv) = &*self.inner;
        let guard = lock.lock().unwrap();
        let (guard, _) = cv.wait_timeout_while(guard, period, |stopped| !*stopped).unwrap();
        !*guard
    }
}
