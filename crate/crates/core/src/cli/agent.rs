//! The agent process: heartbeats plus one wrapper session per replica the
//! server places on this host.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::CliError;
use crate::protocol::{
    heartbeat_loop, Availability, DataReply, DataRequest, Heartbeat, HeartbeatSink, HostId, Message, Outbound, ReplicaId,
    SinkUnavailable, StopFlag,
};
use crate::record_server::{ReadOutcome, StoreError};
use crate::workload::{BankReplica, INPUT_PATH, OUTPUT_PATH};
use crate::wrapper::{run_session, Action, DataServer, EventSource, ProcessEvent, ReplicaSession, ServerError, SessionConfig, TraceError, WrapperError};

const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub host_id: HostId,
    pub availability: Availability,
    pub heartbeat: Duration,
    /// Compute time of one record at full availability.
    pub compute: Duration,
    /// Bytes each replica read asks for.
    pub read_size: u64,
    /// Record size of the served store, when known.
    pub record_bytes: Option<u64>,
}

impl Default for AgentOptions {
    fn default() -> Self {
        AgentOptions {
            host_id: HostId(0),
            availability: Availability::FULL,
            heartbeat: Duration::from_secs(1),
            compute: Duration::from_millis(1),
            read_size: 64,
            record_bytes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AgentReport {
    pub replicas: u64,
    /// Records computed by replicas on this host.
    pub records: u64,
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(w: &Writer, line: &str) -> bool {
    w.lock().unwrap().write_all(line.as_bytes()).is_ok()
}

struct StreamSink(Writer);

impl HeartbeatSink for StreamSink {
    fn send(&mut self, hb: Heartbeat) -> Result<(), SinkUnavailable> {
        if send(&self.0, &Message::Heartbeat(hb).encode()) {
            Ok(())
        } else {
            Err(SinkUnavailable("server connection closed".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Run {
    Running,
    Suspended,
    /// Migrated away or shut down; the replica stops at its next read.
    Gone,
}

struct Control {
    run: Mutex<Run>,
    cv: Condvar,
}

impl Control {
    fn set(&self, run: Run) {
        let mut r = self.run.lock().unwrap();
        if *r != Run::Gone {
            *r = run;
        }
        self.cv.notify_all();
    }

    fn wait_runnable(&self) -> Run {
        let guard = self.run.lock().unwrap();
        *self.cv.wait_while(guard, |r| *r == Run::Suspended).unwrap()
    }
}

struct Slot {
    control: Arc<Control>,
    replies: Sender<DataReply>,
}

/// The record server as seen from a replica: requests go over the agent's
/// connection and replies come back through the reader.
struct RemoteServer {
    control: Arc<Control>,
    replies: Mutex<Receiver<DataReply>>,
    writer: Writer,
}

impl RemoteServer {
    fn call(&self, req: DataRequest) -> Result<DataReply, ServerError> {
        if !send(&self.writer, &req.encode()) {
            return Err(ServerError::Unreachable("server connection closed".into()));
        }
        match self.replies.lock().unwrap().recv_timeout(REPLY_TIMEOUT) {
            Ok(DataReply::Error { reason, .. }) => Err(ServerError::Store(StoreError::IoFailure(reason))),
            Ok(reply) => Ok(reply),
            Err(RecvTimeoutError::Timeout) => Err(ServerError::Unreachable("no reply from server".into())),
            Err(RecvTimeoutError::Disconnected) => Err(ServerError::Unreachable("agent shutting down".into())),
        }
    }
}

fn unexpected(reply: DataReply) -> ServerError {
    ServerError::Unreachable(format!("unexpected reply {}", reply.encode().trim_end()))
}

impl DataServer for RemoteServer {
    fn open_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        match self.call(DataRequest::Open(replica))? {
            DataReply::Opened(_) => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn read_next(&self, replica: ReplicaId, size: u64) -> Result<ReadOutcome, ServerError> {
        // Suspension takes effect between records.
        if self.control.wait_runnable() == Run::Gone {
            return Err(ServerError::Unreachable("replica left this host".into()));
        }
        match self.call(DataRequest::Read { replica, size })? {
            DataReply::Record { payload, .. } => Ok(ReadOutcome::Record(payload)),
            DataReply::EndOfData(_) => Ok(ReadOutcome::EndOfData),
            other => Err(unexpected(other)),
        }
    }

    fn write_back(&self, replica: ReplicaId, payload: &[u8]) -> Result<(), ServerError> {
        match self.call(DataRequest::Write { replica, payload: payload.to_vec() })? {
            DataReply::Ack(_) => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn close_store(&self, replica: ReplicaId) -> Result<(), ServerError> {
        match self.call(DataRequest::Close(replica))? {
            DataReply::Closed(_) => Ok(()),
            other => Err(unexpected(other)),
        }
    }
}

/// Spends the compute time of each record the replica receives.
struct Paced {
    inner: BankReplica,
    per_record: Duration,
}

impl EventSource for Paced {
    fn next_event(&mut self, last: Option<&Action>) -> Option<Result<ProcessEvent, TraceError>> {
        if let Some(Action::Substituted { records, .. }) = last {
            thread::sleep(self.per_record * *records as u32);
        }
        self.inner.next_event(last)
    }
}

struct Agent {
    opts: AgentOptions,
    writer: Writer,
    slots: Arc<Mutex<HashMap<ReplicaId, Slot>>>,
    threads: Vec<JoinHandle<u64>>,
}

impl Agent {
    fn start_replica(&mut self, id: ReplicaId) {
        let (tx, rx) = mpsc::channel();
        let control = Arc::new(Control { run: Mutex::new(Run::Running), cv: Condvar::new() });
        if let Some(old) = self.slots.lock().unwrap().insert(id, Slot { control: Arc::clone(&control), replies: tx }) {
            old.control.set(Run::Gone);
        }
        let server = RemoteServer { control: Arc::clone(&control), replies: Mutex::new(rx), writer: Arc::clone(&self.writer) };
        let pct = self.opts.availability.percent().max(1) as u32;
        let per_record = self.opts.compute * 100 / pct;
        let cfg = SessionConfig {
            replica: id,
            input_path: INPUT_PATH.into(),
            output_path: Some(OUTPUT_PATH.into()),
            record_bytes: self.opts.record_bytes,
        };
        let read_size = self.opts.record_bytes.unwrap_or(self.opts.read_size);
        let slots = Arc::clone(&self.slots);
        let writer = Arc::clone(&self.writer);
        let host = self.opts.host_id;
        self.threads.push(thread::spawn(move || {
            let mut session = ReplicaSession::new(cfg);
            let mut source = Paced { inner: BankReplica::new(1000 + id.0 as u32, read_size), per_record };
            let mut notify = |m: Message| {
                send(&writer, &m.encode());
            };
            match run_session(&mut session, &mut source, &server, &mut notify) {
                Ok(report) => log::info!("replica {id} on host {host} exited after {} records", report.records_consumed),
                Err(WrapperError::ServerUnreachable(why)) => log::info!("replica {id} stopped on host {host}: {why}"),
                Err(e) => log::error!("replica {id} failed: {e}"),
            }
            let mut slots = slots.lock().unwrap();
            if slots.get(&id).is_some_and(|s| Arc::ptr_eq(&s.control, &control)) {
                slots.remove(&id);
            }
            source.inner.processed
        }));
    }

    fn control(&self, id: ReplicaId) -> Option<Arc<Control>> {
        self.slots.lock().unwrap().get(&id).map(|s| Arc::clone(&s.control))
    }

    fn on_control(&mut self, msg: Message) {
        match msg {
            Message::Launch { replica: Some(r), .. } | Message::InvokeReplica { replica: Some(r), .. } => {
                log::info!("starting replica {r}");
                self.start_replica(r);
            }
            Message::Suspend(r) => match self.control(r) {
                Some(c) => c.set(Run::Suspended),
                None => log::warn!("suspend for unknown replica {r}"),
            },
            Message::Activate(r) => match self.control(r).filter(|c| *c.run.lock().unwrap() != Run::Gone) {
                Some(c) => c.set(Run::Running),
                None => {
                    log::info!("replica {r} arrives on this host");
                    self.start_replica(r);
                }
            },
            Message::Migrate { replica, target } => {
                log::info!("replica {replica} moves to host {target}");
                // The slot stays until the replica stops so replies to a
                // write still in flight reach it.
                if let Some(c) = self.control(replica) {
                    c.set(Run::Gone);
                }
            }
            other => log::warn!("ignoring {}", other.tag()),
        }
    }

    fn on_data(&self, reply: DataReply) {
        let id = reply.replica();
        match self.slots.lock().unwrap().get(&id) {
            Some(slot) => {
                let _ = slot.replies.send(reply);
            }
            None => log::debug!("reply for replica {id} which is not here"),
        }
    }

    fn shutdown(self) -> AgentReport {
        for (_, slot) in self.slots.lock().unwrap().drain() {
            slot.control.set(Run::Gone);
        }
        let replicas = self.threads.len() as u64;
        let records = self.threads.into_iter().map(|t| t.join().unwrap_or(0)).sum();
        AgentReport { replicas, records }
    }
}

/// Connects to the server and serves it until it closes the connection.
pub fn run_agent(addr: impl ToSocketAddrs, opts: AgentOptions) -> Result<AgentReport, CliError> {
    let stream = TcpStream::connect(addr).map_err(|e| CliError::ConnectFailed(e.to_string()))?;
    let _ = stream.set_nodelay(true);
    let read_half = stream.try_clone()?;
    let writer: Writer = Arc::new(Mutex::new(stream));
    let hb = Heartbeat { host_id: opts.host_id, availability: opts.availability };
    if !send(&writer, &Message::Heartbeat(hb).encode()) {
        return Err(CliError::ConnectFailed("server closed the connection".into()));
    }
    let stop = StopFlag::new();
    let beats = {
        let (mut sink, mut ticker, period) = (StreamSink(Arc::clone(&writer)), stop.clone(), opts.heartbeat);
        thread::spawn(move || heartbeat_loop(|| hb, &mut sink, period, &mut ticker))
    };
    let mut agent = Agent { opts, writer, slots: Arc::new(Mutex::new(HashMap::new())), threads: Vec::new() };
    for line in BufReader::new(read_half).lines() {
        let Ok(line) = line else { break };
        match Outbound::decode(&line) {
            Ok(Outbound::Control(m)) => agent.on_control(m),
            Ok(Outbound::Data(reply)) => agent.on_data(reply),
            Err(e) => log::warn!("{e}"),
        }
    }
    log::info!("server closed the connection");
    stop.stop();
    let _ = beats.join();
    Ok(agent.shutdown())
}
