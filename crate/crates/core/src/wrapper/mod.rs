//! Interposition layer between a replica and the record server.
//!
//! A [`ReplicaSession`] consumes the replica's data-access events. Reads on
//! descriptors bound to the observed store are answered with records from
//! the server, writes are forwarded to it, and everything else passes
//! through untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Message, ReplicaId};
use crate::record_server::{ReadOutcome, RecordStore, StoreError};

mod trace;

pub use trace::{format_event, parse_event, trace_replay_source, TraceError, TraceReplay};

/// One observed data-access event of a replica process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessEvent {
    pub pid: u32,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    /// `fd` is the descriptor the call returned when the tracer knows it;
    /// otherwise the lowest free descriptor from 3 up is assumed.
    Open { path: String, fd: Option<i32> },
    Read { fd: i32, size: u64 },
    Write { fd: i32, payload: Vec<u8> },
    Mmap { length: u64 },
    Fork { child: u32 },
    Close { fd: i32 },
    Exit { status: i32 },
}

impl ProcessEvent {
    pub fn new(pid: u32, kind: EventKind) -> Self {
        ProcessEvent { pid, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessPattern {
    /// Every read asks for exactly one record.
    PerRecord,
    /// Reads pull a chunk of this many bytes that the process then shares
    /// internally.
    Chunked(u64),
}

/// Decides how a replica reads its store from the first read on it.
pub fn classify_pattern(first_read_size: u64, record_bytes: u64, mmap_seen: bool) -> AccessPattern {
    if first_read_size == record_bytes && !mmap_seen {
        AccessPattern::PerRecord
    } else {
        AccessPattern::Chunked(first_read_size)
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("record server unreachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What a session needs from the record server.
pub trait DataServer {
    fn open_store(&self, replica: ReplicaId) -> Result<(), ServerError>;
    fn read_next(&self, replica: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError>;
    fn write_back(&self, replica: ReplicaId, payload: &[u8]) -> Result<(), ServerError>;
    fn close_store(&self, replica: ReplicaId) -> Result<(), ServerError>;
}

impl DataServer for RecordStore {
    fn open_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        RecordStore::open_store(self, replica).map(drop).map_err(Into::into)
    }
    fn read_next(&self, replica: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError> {
        RecordStore::read_next(self, replica, size).map_err(Into::into)
    }
    fn write_back(&self, replica: ReplicaId, payload: &[u8]) -> Result<(), ServerError> {
        RecordStore::write_back(self, replica, payload).map_err(Into::into)
    }
    fn close_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        RecordStore::close_store(self, replica).map(drop).map_err(Into::into)
    }
}

impl<T: DataServer + ?Sized> DataServer for &T {
    fn open_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        (**self).open_store(replica)
    }
    fn read_next(&self, replica: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError> {
        (**self).read_next(replica, size)
    }
    fn write_back(&self, replica: ReplicaId, payload: &[u8]) -> Result<(), ServerError> {
        (**self).write_back(replica, payload)
    }
    fn close_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        (**self).close_store(replica)
    }
}

impl<T: DataServer + ?Sized> DataServer for Arc<T> {
    fn open_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        (**self).open_store(replica)
    }
    fn read_next(&self, replica: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError> {
        (**self).read_next(replica, size)
    }
    fn write_back(&self, replica: ReplicaId, payload: &[u8]) -> Result<(), ServerError> {
        (**self).write_back(replica, payload)
    }
    fn close_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        (**self).close_store(replica)
    }
}

#[derive(Debug, Error)]
pub enum WrapperError {
    /// The replica should be treated as suspended; the failed event is kept
    /// and retried by the next `run_session` / `retry_pending` call.
    #[error("record server unreachable, replica suspended: {0}")]
    ServerUnreachable(String),
    /// The store is dynamic and has no record yet; retry later.
    #[error("no record available yet")]
    DataPending,
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What the wrapper did with one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    PassThrough,
    Opened { fd: i32, tracked: bool },
    /// The read result was replaced with server data. An empty payload
    /// means end of data. `database_done` is set on the event that first
    /// saw end of data.
    Substituted { payload: Vec<u8>, records: u64, database_done: bool },
    /// A write was forwarded to the server.
    Redirected,
    Closed { fd: i32, tracked: bool },
    /// Bookkeeping only (mmap, fork, child exit).
    Observed,
    Exited { status: i32 },
}

/// Which observed files a session redirects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub replica: ReplicaId,
    /// Path of the store as the replica sees it.
    pub input_path: String,
    /// Result file as the replica sees it, when different from the input.
    pub output_path: Option<String>,
    /// Record size for fixed-size stores; drives pattern classification.
    pub record_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Input,
    Output,
    Both,
    Untracked,
}

impl Role {
    fn reads_store(self) -> bool {
        matches!(self, Role::Input | Role::Both)
    }
    fn tracked(self) -> bool {
        self != Role::Untracked
    }
}

#[derive(Debug, Clone, Default)]
struct PartialFill {
    payload: Vec<u8>,
    records: u64,
}

/// Per-replica interposition state.
#[derive(Debug, Clone)]
pub struct ReplicaSession {
    config: SessionConfig,
    fds: BTreeMap<i32, Role>,
    root_pid: Option<u32>,
    child_pids: BTreeSet<u32>,
    mmap_seen: bool,
    pattern: Option<AccessPattern>,
    records_consumed: u64,
    database_done: bool,
    exit_status: Option<i32>,
    pending: Option<ProcessEvent>,
    partial: Option<PartialFill>,
}

/// Summary of a completed session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub replica: ReplicaId,
    pub records_consumed: u64,
    /// The root process exited.
    pub clean_exit: bool,
    pub exit_status: Option<i32>,
    pub database_done: bool,
    pub pattern: Option<AccessPattern>,
}

impl ReplicaSession {
    pub fn new(config: SessionConfig) -> Self {
        ReplicaSession {
            config,
            fds: BTreeMap::new(),
            root_pid: None,
            child_pids: BTreeSet::new(),
            mmap_seen: false,
            pattern: None,
            records_consumed: 0,
            database_done: false,
            exit_status: None,
            pending: None,
            partial: None,
        }
    }

    pub fn replica(&self) -> ReplicaId {
        self.config.replica
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn records_consumed(&self) -> u64 {
        self.records_consumed
    }

    pub fn pattern(&self) -> Option<AccessPattern> {
        self.pattern
    }

    pub fn database_done(&self) -> bool {
        self.database_done
    }

    pub fn child_pids(&self) -> &BTreeSet<u32> {
        &self.child_pids
    }

    pub fn has_exited(&self) -> bool {
        self.exit_status.is_some()
    }

    /// Descriptors bound to the observed store or result file.
    pub fn tracked_fds(&self) -> BTreeSet<i32> {
        self.fds.iter().filter(|(_, r)| r.tracked()).map(|(fd, _)| *fd).collect()
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn report(&self) -> SessionReport {
        SessionReport {
            replica: self.config.replica,
            records_consumed: self.records_consumed,
            clean_exit: self.exit_status.is_some(),
            exit_status: self.exit_status,
            database_done: self.database_done,
            pattern: self.pattern,
        }
    }

    fn role_for(&self, path: &str) -> Role {
        let is_in = path == self.config.input_path;
        let is_out = self.config.output_path.as_deref() == Some(path);
        match (is_in, is_out) {
            (true, true) => Role::Both,
            (true, false) => Role::Input,
            (false, true) => Role::Output,
            (false, false) => Role::Untracked,
        }
    }

    fn lowest_free_fd(&self) -> i32 {
        (3..).find(|fd| !self.fds.contains_key(fd)).expect("descriptor space exhausted")
    }

    fn role_of(&self, fd: i32) -> Result<Role, WrapperError> {
        match self.fds.get(&fd) {
            Some(r) => Ok(*r),
            None if (0..=2).contains(&fd) => Ok(Role::Untracked),
            None => Err(WrapperError::MalformedTrace(format!("fd {fd} used before open"))),
        }
    }

    fn check_pid(&mut self, event: &ProcessEvent) -> Result<(), WrapperError> {
        if self.exit_status.is_some() {
            return Err(WrapperError::MalformedTrace(format!("event from pid {} after exit", event.pid)));
        }
        match self.root_pid {
            None => {
                self.root_pid = Some(event.pid);
                Ok(())
            }
            Some(root) if root == event.pid || self.child_pids.contains(&event.pid) => Ok(()),
            Some(_) => Err(WrapperError::MalformedTrace(format!("event from untraced pid {}", event.pid))),
        }
    }

    /// Retries the event that last failed with `ServerUnreachable` or
    /// `DataPending`, if any.
    pub fn retry_pending<S: DataServer + ?Sized>(&mut self, server: &S) -> Option<Result<Action, WrapperError>> {
        let event = self.pending.take()?;
        Some(self.handle_event(event, server))
    }

    /// Applies one event. Blocks on the server for redirected calls.
    pub fn handle_event<S: DataServer + ?Sized>(&mut self, event: ProcessEvent, server: &S) -> Result<Action, WrapperError> {
        self.check_pid(&event)?;
        let unreachable = |this: &mut Self, ev: ProcessEvent, msg: String| {
            this.pending = Some(ev);
            WrapperError::ServerUnreachable(msg)
        };
        match &event.kind {
            EventKind::Open { path, fd } => {
                let role = self.role_for(path);
                let fd = match fd {
                    Some(fd) if self.fds.contains_key(fd) => {
                        return Err(WrapperError::MalformedTrace(format!("open returned fd {fd} which is already open")));
                    }
                    Some(fd) => *fd,
                    None => self.lowest_free_fd(),
                };
                if role.reads_store() {
                    match server.open_store(self.config.replica) {
                        Ok(()) => {}
                        Err(ServerError::Unreachable(m)) => return Err(unreachable(self, event, m)),
                        Err(ServerError::Store(e)) => return Err(e.into()),
                    }
                }
                self.fds.insert(fd, role);
                Ok(Action::Opened { fd, tracked: role.tracked() })
            }
            EventKind::Read { fd, size } => {
                let (fd, size) = (*fd, *size);
                let role = self.role_of(fd)?;
                if !role.reads_store() {
                    return Ok(Action::PassThrough);
                }
                let pattern = *self.pattern.get_or_insert_with(|| match self.config.record_bytes {
                    Some(rb) => classify_pattern(size, rb, self.mmap_seen),
                    None if self.mmap_seen => AccessPattern::Chunked(size),
                    None => AccessPattern::PerRecord,
                });
                let wanted = match (pattern, self.config.record_bytes) {
                    (AccessPattern::PerRecord, _) => 1,
                    (AccessPattern::Chunked(_), Some(rb)) => size.div_ceil(rb).max(1),
                    // Variable-size records: one record per chunked read.
                    (AccessPattern::Chunked(_), None) => 1,
                };
                let mut fill = self.partial.take().unwrap_or_default();
                let mut end_of_data = false;
                while fill.records < wanted {
                    match server.read_next(self.config.replica, size) {
                        Ok(ReadOutcome::Record(bytes)) => {
                            fill.payload.extend_from_slice(&bytes);
                            fill.records += 1;
                            self.records_consumed += 1;
                        }
                        Ok(ReadOutcome::EndOfData) => {
                            end_of_data = true;
                            break;
                        }
                        Ok(ReadOutcome::Pending) if fill.records > 0 => break,
                        Ok(ReadOutcome::Pending) => {
                            self.pending = Some(event);
                            return Err(WrapperError::DataPending);
                        }
                        Err(ServerError::Unreachable(m)) => {
                            self.partial = Some(fill);
                            return Err(unreachable(self, event, m));
                        }
                        Err(ServerError::Store(e)) => {
                            self.partial = Some(fill);
                            return Err(e.into());
                        }
                    }
                }
                let database_done = end_of_data && !self.database_done;
                self.database_done |= end_of_data;
                Ok(Action::Substituted { payload: fill.payload, records: fill.records, database_done })
            }
            EventKind::Write { fd, payload } => {
                if !self.role_of(*fd)?.tracked() {
                    return Ok(Action::PassThrough);
                }
                match server.write_back(self.config.replica, payload) {
                    Ok(()) => Ok(Action::Redirected),
                    Err(ServerError::Unreachable(m)) => Err(unreachable(self, event, m)),
                    Err(ServerError::Store(e)) => Err(e.into()),
                }
            }
            EventKind::Mmap { .. } => {
                self.mmap_seen = true;
                Ok(Action::Observed)
            }
            EventKind::Fork { child } => {
                self.child_pids.insert(*child);
                Ok(Action::Observed)
            }
            EventKind::Close { fd } => {
                let fd = *fd;
                let role = self.role_of(fd)?;
                if role.reads_store() {
                    match server.close_store(self.config.replica) {
                        Ok(()) => {}
                        Err(ServerError::Unreachable(m)) => return Err(unreachable(self, event, m)),
                        Err(ServerError::Store(e)) => return Err(e.into()),
                    }
                }
                self.fds.remove(&fd);
                Ok(Action::Closed { fd, tracked: role.tracked() })
            }
            EventKind::Exit { status } => {
                if Some(event.pid) == self.root_pid {
                    self.exit_status = Some(*status);
                    Ok(Action::Exited { status: *status })
                } else {
                    self.child_pids.remove(&event.pid);
                    Ok(Action::Observed)
                }
            }
        }
    }
}

/// Produces a replica's events. Interactive sources may look at the
/// wrapper's answer to the previous event.
pub trait EventSource {
    fn next_event(&mut self, last: Option<&Action>) -> Option<Result<ProcessEvent, TraceError>>;
}

/// Drives a session to the root process's exit. A `DatabaseDone` message
/// goes to `notify` the first time the store runs dry.
///
/// On `ServerUnreachable` the failed event stays in the session; calling
/// `run_session` again with a reconnected server resumes from it.
pub fn run_session<E, S, N>(session: &mut ReplicaSession, source: &mut E, server: &S, notify: &mut N) -> Result<SessionReport, WrapperError>
where
    E: EventSource + ?Sized,
    S: DataServer + ?Sized,
    N: FnMut(Message),
{
    let mut last: Option<Action> = None;
    if let Some(result) = session.retry_pending(server) {
        last = Some(emit(session, result?, notify));
    }
    while !session.has_exited() {
        let Some(event) = source.next_event(last.as_ref()) else { break };
        let event = event?;
        if session.root_pid.is_none() && !matches!(event.kind, EventKind::Open { .. }) {
            return Err(WrapperError::MalformedTrace("stream must start with open".into()));
        }
        let action = session.handle_event(event, server)?;
        last = Some(emit(session, action, notify));
    }
    Ok(session.report())
}

fn emit<N: FnMut(Message)>(session: &ReplicaSession, action: Action, notify: &mut N) -> Action {
    if let Action::Substituted { database_done: true, .. } = action {
        notify(Message::DatabaseDone(session.replica()));
    }
    action
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record_server::{RecordLayout, StoreOptions};
    use std::cell::{Cell, RefCell};

    fn balances(range: std::ops::RangeInclusive<u32>) -> Vec<u8> {
        range.flat_map(|n| format!("{n}\n").into_bytes()).collect()
    }

    fn store(bytes: Vec<u8>) -> RecordStore {
        RecordStore::in_memory(bytes, RecordLayout::FixedSize(4), StoreOptions::default()).unwrap()
    }

    fn config(replica: u64) -> SessionConfig {
        SessionConfig {
            replica: ReplicaId(replica),
            input_path: "accounts".into(),
            output_path: Some("accounts.new".into()),
            record_bytes: Some(4),
        }
    }

    fn ev(pid: u32, kind: EventKind) -> ProcessEvent {
        ProcessEvent::new(pid, kind)
    }

    fn open(path: &str) -> EventKind {
        EventKind::Open { path: path.into(), fd: None }
    }

    #[test]
    fn classifies_access_patterns() {
        assert_eq!(classify_pattern(4, 4, false), AccessPattern::PerRecord);
        assert_eq!(classify_pattern(8192, 4, false), AccessPattern::Chunked(8192));
        assert_eq!(classify_pattern(4, 4, true), AccessPattern::Chunked(4));
    }

    #[test]
    fn per_record_read_is_substituted() {
        let server = store(balances(230..=231));
        let mut s = ReplicaSession::new(config(0));
        assert_eq!(s.handle_event(ev(1, open("accounts")), &server).unwrap(), Action::Opened { fd: 3, tracked: true });
        let a = s.handle_event(ev(1, EventKind::Read { fd: 3, size: 4 }), &server).unwrap();
        assert_eq!(a, Action::Substituted { payload: b"230\n".to_vec(), records: 1, database_done: false });
        assert_eq!(s.pattern(), Some(AccessPattern::PerRecord));
    }

    #[test]
    fn exhausted_store_substitutes_empty_and_signals_done_once() {
        let server = store(Vec::new());
        let mut s = ReplicaSession::new(config(5));
        s.handle_event(ev(1, open("accounts")), &server).unwrap();
        let a = s.handle_event(ev(1, EventKind::Read { fd: 3, size: 4 }), &server).unwrap();
        assert_eq!(a, Action::Substituted { payload: vec![], records: 0, database_done: true });
        let a = s.handle_event(ev(1, EventKind::Read { fd: 3, size: 4 }), &server).unwrap();
        assert_eq!(a, Action::Substituted { payload: vec![], records: 0, database_done: false });
    }

    #[test]
    fn write_on_output_goes_to_server() {
        let server = store(balances(230..=230));
        let mut s = ReplicaSession::new(config(0));
        s.handle_event(ev(1, open("accounts")), &server).unwrap();
        assert_eq!(s.handle_event(ev(1, open("accounts.new")), &server).unwrap(), Action::Opened { fd: 4, tracked: true });
        s.handle_event(ev(1, EventKind::Read { fd: 3, size: 4 }), &server).unwrap();
        let a = s.handle_event(ev(1, EventKind::Write { fd: 4, payload: b"231\n".to_vec() }), &server).unwrap();
        assert_eq!(a, Action::Redirected);
        assert_eq!(server.output_bytes().unwrap(), b"231\n");
    }

    #[test]
    fn chunked_read_fills_from_several_records() {
        let server = store(balances(101..=105));
        let mut s = ReplicaSession::new(config(0));
        s.handle_event(ev(846, open("accounts")), &server).unwrap();
        let a = s.handle_event(ev(846, EventKind::Read { fd: 3, size: 8192 }), &server).unwrap();
        assert_eq!(a, Action::Substituted { payload: b"101\n102\n103\n104\n105\n".to_vec(), records: 5, database_done: true });
        assert_eq!(s.pattern(), Some(AccessPattern::Chunked(8192)));
        assert_eq!(s.records_consumed(), 5);
    }

    #[test]
    fn chunk_size_bounds_the_fill() {
        let server = store(balances(101..=110));
        let mut s = ReplicaSession::new(config(0));
        s.handle_event(ev(1, open("accounts")), &server).unwrap();
        let a = s.handle_event(ev(1, EventKind::Read { fd: 3, size: 10 }), &server).unwrap();
        // ceil(10 / 4) = 3 records
        assert_eq!(a, Action::Substituted { payload: b"101\n102\n103\n".to_vec(), records: 3, database_done: false });
    }

    #[test]
    fn untracked_fds_pass_through() {
        let server = store(balances(101..=102));
        let mut s = ReplicaSession::new(config(0));
        s.handle_event(ev(1, open("accounts")), &server).unwrap();
        s.handle_event(ev(1, open("Foo.class")), &server).unwrap();
        assert_eq!(s.handle_event(ev(1, EventKind::Read { fd: 4, size: 1902 }), &server).unwrap(), Action::PassThrough);
        assert_eq!(s.handle_event(ev(1, EventKind::Write { fd: 1, payload: b"Data Access".to_vec() }), &server).unwrap(), Action::PassThrough);
        assert_eq!(server.dispensed(), 0);
        assert_eq!(s.tracked_fds(), BTreeSet::from([3]));
    }

    #[test]
    fn unknown_fd_is_malformed() {
        let server = store(vec![]);
        let mut s = ReplicaSession::new(config(0));
        let err = s.handle_event(ev(1, EventKind::Read { fd: 9, size: 4 }), &server).unwrap_err();
        assert!(matches!(err, WrapperError::MalformedTrace(_)));
    }

    #[test]
    fn forked_children_share_the_session() {
        let server = store(balances(101..=102));
        let mut s = ReplicaSession::new(config(0));
        s.handle_event(ev(1, open("accounts")), &server).unwrap();
        s.handle_event(ev(1, EventKind::Fork { child: 2 }), &server).unwrap();
        s.handle_event(ev(2, EventKind::Read { fd: 3, size: 4 }), &server).unwrap();
        s.handle_event(ev(1, EventKind::Read { fd: 3, size: 4 }), &server).unwrap();
        assert_eq!(s.records_consumed(), 2);
        assert_eq!(s.handle_event(ev(2, EventKind::Exit { status: 0 }), &server).unwrap(), Action::Observed);
        assert!(s.handle_event(ev(7, EventKind::Read { fd: 3, size: 4 }), &server).is_err());
        assert_eq!(s.handle_event(ev(1, EventKind::Exit { status: 0 }), &server).unwrap(), Action::Exited { status: 0 });
        assert!(s.has_exited());
    }

    /// Fails the first `down` calls, then delegates.
    struct Flaky<'a> {
        inner: &'a RecordStore,
        down: Cell<u32>,
    }
    impl Flaky<'_> {
        fn gate(&self) -> Result<(), ServerError> {
            if self.down.get() > 0 {
                self.down.set(self.down.get() - 1);
                return Err(ServerError::Unreachable("link down".into()));
            }
            Ok(())
        }
    }
    impl DataServer for Flaky<'_> {
        fn open_store(&self, r: ReplicaId) -> Result<(), ServerError> {
            self.gate()?;
            DataServer::open_store(self.inner, r)
        }
        fn read_next(&self, r: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError> {
            self.gate()?;
            DataServer::read_next(self.inner, r, size)
        }
        fn write_back(&self, r: ReplicaId, p: &[u8]) -> Result<(), ServerError> {
            self.gate()?;
            DataServer::write_back(self.inner, r, p)
        }
        fn close_store(&self, r: ReplicaId) -> Result<(), ServerError> {
            self.gate()?;
            DataServer::close_store(self.inner, r)
        }
    }

    #[test]
    fn unreachable_server_suspends_and_retries_the_event() {
        let backing = store(balances(101..=103));
        let mut s = ReplicaSession::new(config(0));
        let trace = "1 open accounts\n1 read 3 4\n1 read 3 4\n1 close 3\n1 exit 0\n";
        let mut src = TraceReplay::from_text(trace);
        let flaky = Flaky { inner: &backing, down: Cell::new(0) };
        s.handle_event(src.next().unwrap().unwrap(), &flaky).unwrap();
        flaky.down.set(1);
        let err = s.handle_event(src.next().unwrap().unwrap(), &flaky).unwrap_err();
        assert!(matches!(err, WrapperError::ServerUnreachable(_)));
        assert!(s.has_pending());
        let report = run_session(&mut s, &mut src, &flaky, &mut |_| {}).unwrap();
        assert_eq!(report.records_consumed, 2);
        assert!(report.clean_exit);
    }

    #[test]
    fn unreachable_mid_chunk_keeps_the_partial_fill() {
        let backing = store(balances(101..=104));
        let mut s = ReplicaSession::new(config(0));
        let flaky = Flaky { inner: &backing, down: Cell::new(0) };
        s.handle_event(ev(1, open("accounts")), &flaky).unwrap();
        // Let one record through, then fail.
        struct OneThenDown<'a>(&'a Flaky<'a>, Cell<u32>);
        impl DataServer for OneThenDown<'_> {
            fn open_store(&self, r: ReplicaId) -> Result<(), ServerError> { self.0.open_store(r) }
            fn read_next(&self, r: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError> {
                self.1.set(self.1.get() + 1);
                if self.1.get() == 2 { return Err(ServerError::Unreachable("x".into())); }
                self.0.read_next(r, size)
            }
            fn write_back(&self, r: ReplicaId, p: &[u8]) -> Result<(), ServerError> { self.0.write_back(r, p) }
            fn close_store(&self, r: ReplicaId) -> Result<(), ServerError> { self.0.close_store(r) }
        }
        let srv = OneThenDown(&flaky, Cell::new(0));
        assert!(s.handle_event(ev(1, EventKind::Read { fd: 3, size: 12 }), &srv).is_err());
        let a = s.retry_pending(&srv).unwrap().unwrap();
        assert_eq!(a, Action::Substituted { payload: b"101\n102\n103\n".to_vec(), records: 3, database_done: false });
    }

    #[test]
    fn run_session_over_a_trace() {
        let server = store(balances(101..=103));
        let mut trace = String::from("10 open accounts\n10 open accounts.new\n");
        for n in 102..=104 {
            trace.push_str(&format!("10 read 3 4\n10 write 4 4 {n}\\n\n"));
        }
        trace.push_str("10 close 3\n10 close 4\n10 exit 0\n");
        let mut s = ReplicaSession::new(config(3));
        let report = run_session(&mut s, &mut TraceReplay::from_text(&trace), &server, &mut |_| {}).unwrap();
        assert_eq!(report.records_consumed, 3);
        assert!(report.clean_exit);
        assert_eq!(report.records_consumed, server.dispensed_by(ReplicaId(3)));
        assert!(!server.is_open());
    }

    #[test]
    fn run_session_empty_trace() {
        let server = store(balances(101..=103));
        let mut s = ReplicaSession::new(config(3));
        let report = run_session(&mut s, &mut TraceReplay::from_text("1 open accounts\n1 close 3\n1 exit 0\n"), &server, &mut |_| {}).unwrap();
        assert_eq!(report.records_consumed, 0);
        assert!(report.clean_exit);
    }

    #[test]
    fn run_session_rejects_read_before_open() {
        let server = store(balances(101..=103));
        let mut s = ReplicaSession::new(config(3));
        let err = run_session(&mut s, &mut TraceReplay::from_text("1 read 3 4\n"), &server, &mut |_| {}).unwrap_err();
        assert!(matches!(err, WrapperError::MalformedTrace(_)));
    }

    #[test]
    fn run_session_emits_database_done_once() {
        let server = store(balances(101..=101));
        let trace = "1 open accounts\n1 read 3 4\n1 read 3 4\n1 read 3 4\n1 close 3\n1 exit 0\n";
        let sent = RefCell::new(Vec::new());
        let mut s = ReplicaSession::new(config(9));
        run_session(&mut s, &mut TraceReplay::from_text(trace), &server, &mut |m| sent.borrow_mut().push(m)).unwrap();
        assert_eq!(sent.into_inner(), vec![Message::DatabaseDone(ReplicaId(9))]);
    }

    /// Counts calls so tests can check that untracked events never reach
    /// the server.
    #[derive(Default)]
    pub(crate) struct Counting {
        pub inner: Option<RecordStore>,
        pub calls: Cell<u32>,
    }
    impl DataServer for Counting {
        fn open_store(&self, r: ReplicaId) -> Result<(), ServerError> {
            self.calls.set(self.calls.get() + 1);
            DataServer::open_store(self.inner.as_ref().unwrap(), r)
        }
        fn read_next(&self, r: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError> {
            self.calls.set(self.calls.get() + 1);
            DataServer::read_next(self.inner.as_ref().unwrap(), r, size)
        }
        fn write_back(&self, r: ReplicaId, p: &[u8]) -> Result<(), ServerError> {
            self.calls.set(self.calls.get() + 1);
            DataServer::write_back(self.inner.as_ref().unwrap(), r, p)
        }
        fn close_store(&self, r: ReplicaId) -> Result<(), ServerError> {
            self.calls.set(self.calls.get() + 1);
            DataServer::close_store(self.inner.as_ref().unwrap(), r)
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn untracked_event() -> impl Strategy<Value = EventKind> {
            prop_oneof![
                (1u64..9000).prop_map(|size| EventKind::Read { fd: 4, size }),
                (0i32..3, 1u64..100).prop_map(|(fd, size)| EventKind::Read { fd, size }),
                proptest::collection::vec(any::<u8>(), 1..8).prop_map(|payload| EventKind::Write { fd: 1, payload }),
                proptest::collection::vec(any::<u8>(), 1..8).prop_map(|payload| EventKind::Write { fd: 4, payload }),
                (1u64..1_000_000).prop_map(|length| EventKind::Mmap { length }),
            ]
        }

        proptest! {
            #[test]
            fn untracked_events_make_no_server_calls(events in proptest::collection::vec(untracked_event(), 0..40)) {
                let server = Counting { inner: Some(store(balances(101..=120))), calls: Cell::new(0) };
                let mut s = ReplicaSession::new(config(0));
                s.handle_event(ev(1, open("unrelated.log")), &server).unwrap();
                s.handle_event(ev(1, open("also-unrelated")), &server).unwrap();
                for kind in events {
                    let _ = s.handle_event(ev(1, kind), &server).unwrap();
                }
                prop_assert_eq!(server.calls.get(), 0);
            }

            #[test]
            fn chunking_does_not_change_what_is_consumed(records in 0u32..40, chunk in 1u64..64, mmap in any::<bool>()) {
                let input = if records == 0 { vec![] } else { balances(100..=99 + records) };
                let drain = |size: u64, mmap: bool| {
                    let server = store(input.clone());
                    let mut s = ReplicaSession::new(config(0));
                    s.handle_event(ev(1, open("accounts")), &server).unwrap();
                    if mmap { s.handle_event(ev(1, EventKind::Mmap { length: 4096 }), &server).unwrap(); }
                    let mut got = Vec::new();
                    loop {
                        match s.handle_event(ev(1, EventKind::Read { fd: 3, size }), &server).unwrap() {
                            Action::Substituted { payload, records: 0, .. } => { prop_assert!(payload.is_empty()); break }
                            Action::Substituted { payload, .. } => got.extend(payload),
                            other => prop_assert!(false, "{other:?}"),
                        }
                    }
                    prop_assert_eq!(s.records_consumed(), records as u64);
                    Ok(got)
                };
                let per_record = drain(4, false)?;
                let chunked = drain(chunk, mmap)?;
                prop_assert_eq!(&per_record, &input);
                prop_assert_eq!(chunked, input);
            }
        }
    }
}
