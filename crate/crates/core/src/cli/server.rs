//! The server process: record store, scheduler and a TCP listener.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::CliError;
use crate::protocol::{DataReply, DataRequest, HostId, Inbound, Message, ReplicaId};
use crate::record_server::{write_stats_log, ReadOutcome, RecordStore};
use crate::scheduler::{Command, ReplicaState, SchedulerConfig, SchedulerState};

/// The server keeps the store open under this id for the whole run, so the
/// record count is known before any replica asks and the output is flushed
/// only once every replica is done.
const SERVER_HOLD: ReplicaId = ReplicaId(u64::MAX);

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub scheduler: SchedulerConfig,
    pub app_id: String,
    /// Directory for the per-host `host<N>.log` statistics.
    pub stats_dir: Option<PathBuf>,
    /// Give up when the run takes longer than this.
    pub deadline: Option<Duration>,
    /// Hosts that must have joined before the run may finish.
    pub min_hosts: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions { scheduler: SchedulerConfig::default(), app_id: "bank".into(), stats_dir: None, deadline: None, min_hosts: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerSummary {
    pub records: u64,
    /// Records dispensed through each host's connection.
    pub per_host: BTreeMap<HostId, u64>,
    pub command_log: Vec<String>,
    pub elapsed: Duration,
}

type Writer = Arc<Mutex<TcpStream>>;

struct Core {
    sched: SchedulerState,
    conns: BTreeMap<HostId, Writer>,
    per_host: BTreeMap<HostId, u64>,
    /// Store opens held by each replica id.
    opens: BTreeMap<ReplicaId, u32>,
    /// Opens left behind by a migrated replica, adopted by its next
    /// incarnation instead of opening the store again.
    carried: BTreeMap<ReplicaId, u32>,
    done: BTreeSet<ReplicaId>,
    /// Host whose connection last opened the store for each replica.
    origin: BTreeMap<ReplicaId, HostId>,
}

struct Shared {
    store: Arc<RecordStore>,
    core: Mutex<Core>,
    stop: AtomicBool,
    start: Instant,
}

impl Shared {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }
}

pub struct Server {
    listener: TcpListener,
    store: Arc<RecordStore>,
    opts: ServerOptions,
}

fn send(w: &Writer, line: &str) -> bool {
    w.lock().unwrap().write_all(line.as_bytes()).is_ok()
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, store: RecordStore, opts: ServerOptions) -> Result<Self, CliError> {
        opts.scheduler.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let listener = TcpListener::bind(addr).map_err(|e| CliError::BindFailed(e.to_string()))?;
        Ok(Server { listener, store: Arc::new(store), opts })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Serves agents until every record is processed and every replica has
    /// closed the store.
    pub fn run(self) -> Result<ServerSummary, CliError> {
        self.store.open_store(SERVER_HOLD)?;
        let shared = Arc::new(Shared {
            store: Arc::clone(&self.store),
            core: Mutex::new(Core {
                sched: SchedulerState::new(self.opts.scheduler).map_err(|e| CliError::Config(e.to_string()))?,
                conns: BTreeMap::new(),
                per_host: BTreeMap::new(),
                opens: BTreeMap::new(),
                carried: BTreeMap::new(),
                done: BTreeSet::new(),
                origin: BTreeMap::new(),
            }),
            stop: AtomicBool::new(false),
            start: Instant::now(),
        });
        self.listener.set_nonblocking(true)?;
        let acceptor = {
            let shared = Arc::clone(&shared);
            let listener = self.listener;
            thread::spawn(move || accept_loop(listener, shared))
        };
        log::info!("serving {} records", self.store.total());
        let result = schedule_loop(&shared, &self.opts);
        shared.stop.store(true, Ordering::SeqCst);
        let core = shared.core.lock().unwrap();
        for w in core.conns.values() {
            let _ = w.lock().unwrap().shutdown(Shutdown::Both);
        }
        let per_host = core.per_host.clone();
        let command_log = core.sched.log().iter().map(|e| e.format(&self.opts.app_id)).collect();
        drop(core);
        let _ = acceptor.join();
        result?;
        self.store.close_store(SERVER_HOLD)?;
        if let Some(dir) = &self.opts.stats_dir {
            std::fs::create_dir_all(dir)?;
            for (h, n) in &per_host {
                write_stats_log(&dir.join(format!("host{}.log", h.0)), *h, *n)?;
            }
        }
        Ok(ServerSummary { records: self.store.total() as u64, per_host, command_log, elapsed: shared.start.elapsed() })
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("agent connected from {peer}");
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let shared = Arc::clone(&shared);
                thread::spawn(move || serve_connection(stream, shared));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, shared: Arc<Shared>) {
    let Ok(read_half) = stream.try_clone() else { return };
    let writer: Writer = Arc::new(Mutex::new(stream));
    let mut host: Option<HostId> = None;
    for line in BufReader::new(read_half).lines() {
        let Ok(line) = line else { break };
        let msg = match Inbound::decode(&line) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{e}");
                continue;
            }
        };
        match msg {
            Inbound::Control(Message::Heartbeat(hb)) => {
                let mut core = shared.core.lock().unwrap();
                if host.is_none() {
                    log::info!("host {} joined at {}%", hb.host_id, hb.availability.percent());
                }
                host = Some(hb.host_id);
                core.conns.insert(hb.host_id, Arc::clone(&writer));
                core.sched.on_heartbeat(hb, shared.now_ms());
            }
            Inbound::Control(Message::DatabaseDone(r)) => {
                log::info!("Received DATABASE_DONE_MSG from replica {r}");
                let mut core = shared.core.lock().unwrap();
                core.done.insert(r);
                core.sched.replica_exited(r);
            }
            Inbound::Control(other) => log::warn!("unexpected {} from an agent", other.tag()),
            Inbound::Data(req) => {
                let reply = match host {
                    Some(h) => serve_data(&shared, h, req),
                    None => DataReply::Error { replica: req.replica(), reason: "heartbeat first".into() },
                };
                if !send(&writer, &reply.encode()) {
                    break;
                }
            }
        }
    }
    if let Some(h) = host {
        log::info!("host {h} disconnected");
        release_opens(&shared, h);
    }
}

/// Closes the store on behalf of replicas whose host went away so the run
/// can still finish.
fn release_opens(shared: &Shared, host: HostId) {
    let mut core = shared.core.lock().unwrap();
    let orphans: Vec<ReplicaId> = core.origin.iter().filter(|(_, h)| **h == host).map(|(r, _)| *r).collect();
    for r in orphans {
        core.origin.remove(&r);
        let held = core.opens.insert(r, 0).unwrap_or(0);
        for _ in 0..held {
            let _ = shared.store.close_store(r);
        }
    }
}

fn serve_data(shared: &Shared, host: HostId, req: DataRequest) -> DataReply {
    let store = &shared.store;
    let replica = req.replica();
    let err = |e: crate::record_server::StoreError| DataReply::Error { replica, reason: e.to_string() };
    match req {
        DataRequest::Open(r) => {
            let mut core = shared.core.lock().unwrap();
            *core.opens.entry(r).or_insert(0) += 1;
            core.origin.insert(r, host);
            if let Some(c) = core.carried.get_mut(&r).filter(|c| **c > 0) {
                *c -= 1;
                return DataReply::Opened(r);
            }
            drop(core);
            store.open_store(r).map_or_else(err, |_| DataReply::Opened(r))
        }
        DataRequest::Read { replica: r, size } => match store.read_next(r, size) {
            Ok(ReadOutcome::Record(payload)) => {
                *shared.core.lock().unwrap().per_host.entry(host).or_insert(0) += 1;
                DataReply::Record { replica: r, payload }
            }
            Ok(ReadOutcome::EndOfData) => DataReply::EndOfData(r),
            Ok(ReadOutcome::Pending) => DataReply::Error { replica: r, reason: "no record yet".into() },
            Err(e) => err(e),
        },
        DataRequest::Write { replica: r, payload } => store.write_back(r, &payload).map_or_else(err, |_| DataReply::Ack(r)),
        DataRequest::Close(r) => {
            if let Some(n) = shared.core.lock().unwrap().opens.get_mut(&r) {
                *n = n.saturating_sub(1);
            }
            store.close_store(r).map_or_else(err, |_| DataReply::Closed(r))
        }
    }
}

fn schedule_loop(shared: &Shared, opts: &ServerOptions) -> Result<(), CliError> {
    let tick = Duration::from_millis(opts.scheduler.tick_ms);
    loop {
        let store = &shared.store;
        let undispensed = (store.total() - store.dispensed()) as u64;
        let joined = shared.core.lock().unwrap().conns.len();
        if undispensed == 0 && store.open_count() == 1 && joined >= opts.min_hosts {
            log::info!("all records processed");
            return Ok(());
        }
        if opts.deadline.is_some_and(|d| shared.start.elapsed() > d) {
            return Err(CliError::Timeout(undispensed));
        }
        {
            let mut core = shared.core.lock().unwrap();
            core.sched.set_remaining_tasks(undispensed);
            let now = shared.now_ms();
            for cmd in core.sched.tick(now) {
                dispatch(&mut core, cmd, &opts.app_id);
            }
            if undispensed == 0 {
                drain(&mut core);
            }
        }
        thread::sleep(tick);
    }
}

fn deliver(core: &Core, host: HostId, msg: &Message) {
    match core.conns.get(&host) {
        Some(w) if send(w, &msg.encode()) => log::debug!("sent {} to host {host}", msg.encode().trim_end()),
        _ => log::warn!("host {host} unreachable for {}", msg.tag()),
    }
}

fn dispatch(core: &mut Core, cmd: Command, app_id: &str) {
    match cmd {
        Command::Migrate { replica, from, to } => {
            // The source stops at its next read; the target starts a fresh
            // incarnation that adopts the source's opens.
            let held = core.opens.insert(replica, 0).unwrap_or(0);
            *core.carried.entry(replica).or_insert(0) += held;
            deliver(core, from, &cmd.to_message(app_id));
            deliver(core, to, &Message::Activate(replica));
        }
        _ => deliver(core, cmd.host(), &cmd.to_message(app_id)),
    }
}

/// With every record handed out, suspended replicas hold no record and only
/// need to observe the end of data and close.
fn drain(core: &mut Core) {
    let parked: Vec<(ReplicaId, HostId)> = core
        .sched
        .replicas()
        .iter()
        .filter(|(_, r)| r.state == ReplicaState::Suspended)
        .map(|(id, r)| (*id, r.host))
        .collect();
    for (r, host) in parked {
        log::debug!("draining replica {r}");
        deliver(core, host, &Message::Activate(r));
        core.sched.replica_exited(r);
    }
}
