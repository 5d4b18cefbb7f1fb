//! The internal-analysis event loop.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PhaseChange, SimConfig, SimError, SimReport};
use crate::protocol::{Heartbeat, HostId, ReplicaId};
use crate::record_server::{RecordLayout, RecordStore, StoreOptions};
use crate::scheduler::{Command, SchedulerState};
use crate::workload::{self, BankReplica};
use crate::wrapper::{Action, EventSource, ReplicaSession};

const APP_ID: &str = "bank";

/// Ticks without any possible progress before the run counts as stalled.
const STALL_TICKS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    // Variant order breaks ties at equal times.
    Availability { host: usize, step: usize },
    Heartbeat { host: usize },
    ComputeDone { replica: ReplicaId, gen: u64 },
    Ready { replica: ReplicaId, gen: u64 },
    Deliver { seq: u64 },
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Queued {
    time: f64,
    event: Event,
    seq: u64,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (time, event kind, insertion order).
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.event.cmp(&self.event))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Waiting for a launch, resume or migration to take effect.
    Starting,
    Computing,
    Suspended,
    Exited,
}

struct SimReplica {
    host: HostId,
    mode: Mode,
    session: ReplicaSession,
    source: BankReplica,
    last: Option<Action>,
    /// Full-speed milliseconds left on the records in hand.
    work_left: f64,
    in_hand: u64,
    gen: u64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Queued>,
    store: RecordStore,
    sched: SchedulerState,
    replicas: BTreeMap<ReplicaId, SimReplica>,
    /// Last time each host's computing replicas were brought up to date.
    host_clock: BTreeMap<HostId, f64>,
    host_index: BTreeMap<HostId, usize>,
    pending: BTreeMap<u64, Command>,
    rng: ChaCha8Rng,
    per_host: BTreeMap<HostId, u64>,
    completed: u64,
    finished_at: f64,
    idle_ticks: u32,
}

/// Runs the internal-analysis scenario to completion.
pub fn run_sim(cfg: &SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let n = cfg.record_count;
    let store = RecordStore::in_memory(
        workload::bank_store(n),
        RecordLayout::FixedSize(workload::record_bytes(n)),
        StoreOptions::default(),
    )
    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let mut engine = Engine {
        cfg,
        now: 0.0,
        seq: 0,
        queue: BinaryHeap::new(),
        store,
        sched: SchedulerState::new(cfg.scheduler)?,
        replicas: BTreeMap::new(),
        host_clock: BTreeMap::new(),
        host_index: cfg.hosts.iter().enumerate().map(|(i, h)| (HostId(h.id), i)).collect(),
        pending: BTreeMap::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        per_host: BTreeMap::new(),
        completed: 0,
        finished_at: 0.0,
        idle_ticks: 0,
    };
    engine.run()?;
    let output = engine.store.output_bytes().unwrap_or_default();
    let output_records = workload::parse_balances(&output).map_or(0, |v| v.len() as u64);
    Ok(SimReport {
        total_elapsed_ms: engine.finished_at,
        per_host_records: engine.per_host,
        output_records,
        command_log: engine.sched.log().iter().map(|e| e.format(APP_ID)).collect(),
        phase_transitions: engine
            .sched
            .phase_transitions()
            .iter()
            .map(|&(_, time_ms, phase)| PhaseChange { time_ms, phase })
            .collect(),
        nodes: Vec::new(),
    })
}

impl Engine<'_> {
    fn push(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.queue.push(Queued { time, event, seq: self.seq });
    }

    fn availability(&self, host: HostId) -> f64 {
        self.availability_at(host, self.now)
    }

    fn availability_at(&self, host: HostId, t: f64) -> f64 {
        self.host_index.get(&host).map_or(0.0, |&i| self.cfg.hosts[i].availability.at(t).percent() as f64)
    }

    fn computing_on(&self, host: HostId) -> Vec<ReplicaId> {
        self.replicas.iter().filter(|(_, r)| r.host == host && r.mode == Mode::Computing).map(|(id, _)| *id).collect()
    }

    /// Per-replica speed on `host` at time `t`: the availability is shared
    /// evenly.
    fn rate_at(&self, host: HostId, t: f64) -> f64 {
        let n = self.computing_on(host).len();
        if n == 0 {
            return 0.0;
        }
        self.availability_at(host, t) / 100.0 / n as f64
    }

    fn rate(&self, host: HostId) -> f64 {
        self.rate_at(host, self.now)
    }

    /// Charges elapsed progress to the replicas computing on `host`. The
    /// availability is constant since the last charge because every step
    /// triggers one.
    fn advance(&mut self, host: HostId) {
        let since = self.host_clock.get(&host).copied().unwrap_or(self.now);
        let done = self.rate_at(host, since) * (self.now - since);
        for id in self.computing_on(host) {
            let r = self.replicas.get_mut(&id).expect("listed");
            r.work_left = (r.work_left - done).max(0.0);
        }
        self.host_clock.insert(host, self.now);
    }

    /// Re-plans completion events on `host` after any change there.
    fn replan(&mut self, host: HostId) {
        let rate = self.rate(host);
        for id in self.computing_on(host) {
            let now = self.now;
            let r = self.replicas.get_mut(&id).expect("listed");
            r.gen += 1;
            let (gen, left) = (r.gen, r.work_left);
            if rate > 0.0 {
                self.push(now + left / rate, Event::ComputeDone { replica: id, gen });
            }
        }
    }

    fn with_host<F: FnOnce(&mut Self)>(&mut self, host: HostId, f: F) {
        self.advance(host);
        f(self);
        self.replan(host);
    }

    fn remaining(&self) -> u64 {
        self.cfg.record_count - self.completed
    }

    /// Records not yet handed to any replica. The store builds its table
    /// lazily, so this counts from the configured total.
    fn undispensed(&self) -> u64 {
        self.cfg.record_count - self.store.dispensed() as u64
    }

    fn live_replicas(&self) -> usize {
        self.replicas.values().filter(|r| r.mode != Mode::Exited).count()
    }

    fn done(&self) -> bool {
        self.undispensed() == 0 && self.live_replicas() == 0 && self.completed == self.cfg.record_count
    }

    fn run(&mut self) -> Result<(), SimError> {
        for (i, h) in self.cfg.hosts.iter().enumerate() {
            for (step, (t, _)) in h.availability.steps().iter().enumerate() {
                self.seq += 1;
                self.queue.push(Queued { time: *t, event: Event::Availability { host: i, step }, seq: self.seq });
            }
            let join = h.availability.join_time();
            self.seq += 1;
            self.queue.push(Queued { time: join, event: Event::Heartbeat { host: i }, seq: self.seq });
        }
        self.push(0.0, Event::Tick);
        if self.done() {
            return Ok(());
        }
        while let Some(q) = self.queue.pop() {
            if q.time > self.cfg.max_time_ms {
                return Err(SimError::Stalled { time_ms: self.now, remaining: self.remaining() });
            }
            self.now = q.time;
            match q.event {
                Event::Availability { host, .. } => {
                    // The rate changes from now on; charge progress at the old one.
                    let id = HostId(self.cfg.hosts[host].id);
                    self.with_host(id, |_| {});
                }
                Event::Heartbeat { host } => {
                    let h = &self.cfg.hosts[host];
                    let hb = Heartbeat { host_id: HostId(h.id), availability: h.availability.at(self.now) };
                    self.sched.on_heartbeat(hb, self.now);
                    let next = self.now + self.cfg.scheduler.heartbeat_ms as f64;
                    self.push(next, Event::Heartbeat { host });
                }
                Event::Tick => {
                    self.sched.set_remaining_tasks(self.undispensed());
                    let cmds = self.sched.tick(self.now);
                    let issued = !cmds.is_empty();
                    for cmd in cmds {
                        self.dispatch(cmd);
                    }
                    if self.progress_possible(issued) {
                        self.idle_ticks = 0;
                    } else {
                        self.idle_ticks += 1;
                        if self.idle_ticks >= STALL_TICKS {
                            return Err(SimError::Stalled { time_ms: self.now, remaining: self.remaining() });
                        }
                    }
                    let next = self.now + self.cfg.scheduler.tick_ms as f64;
                    self.push(next, Event::Tick);
                }
                Event::Deliver { seq } => {
                    if let Some(cmd) = self.pending.remove(&seq) {
                        self.take_effect(cmd)?;
                    }
                }
                Event::Ready { replica, gen } => {
                    let Some(r) = self.replicas.get(&replica) else { continue };
                    if r.gen != gen || r.mode != Mode::Starting {
                        continue;
                    }
                    let host = r.host;
                    if r.work_left > 0.0 {
                        self.with_host(host, |e| e.replicas.get_mut(&replica).expect("known").mode = Mode::Computing);
                    } else {
                        self.drive(replica)?;
                    }
                }
                Event::ComputeDone { replica, gen } => {
                    let Some(r) = self.replicas.get(&replica) else { continue };
                    if r.gen != gen || r.mode != Mode::Computing {
                        continue;
                    }
                    let host = r.host;
                    let in_hand = r.in_hand;
                    self.with_host(host, |e| {
                        let r = e.replicas.get_mut(&replica).expect("known");
                        r.work_left = 0.0;
                        r.in_hand = 0;
                        r.mode = Mode::Starting;
                    });
                    *self.per_host.entry(host).or_insert(0) += in_hand;
                    self.completed += in_hand;
                    self.sched.record_completed(replica, self.now);
                    self.drive(replica)?;
                }
            }
            if self.done() {
                self.finished_at = self.now;
                return Ok(());
            }
        }
        Err(SimError::Stalled { time_ms: self.now, remaining: self.remaining() })
    }

    fn progress_possible(&self, issued: bool) -> bool {
        if issued || !self.pending.is_empty() {
            return true;
        }
        let computing = self
            .replicas
            .values()
            .any(|r| matches!(r.mode, Mode::Computing | Mode::Starting) && self.availability(r.host) > 0.0);
        let future_steps = self
            .cfg
            .hosts
            .iter()
            .any(|h| h.availability.steps().iter().any(|(t, _)| *t > self.now));
        computing || future_steps
    }

    /// Sends a command; it takes effect after the message latency plus its
    /// cost.
    fn dispatch(&mut self, cmd: Command) {
        let cost = self.cfg.scheduler.cost_model().cost(&cmd) * self.cfg.unit_ms;
        let at = self.now + self.cfg.latency_ms;
        // Launched replicas exist from the moment the command is sent so
        // later commands can address them.
        if cmd.is_launch() {
            let n = self.cfg.record_count;
            let pid = 1000 + cmd.replica().0 as u32;
            self.replicas.insert(
                cmd.replica(),
                SimReplica {
                    host: cmd.host(),
                    mode: Mode::Starting,
                    session: ReplicaSession::new(workload::session_config(cmd.replica(), n)),
                    source: BankReplica::new(pid, workload::record_bytes(n)),
                    last: None,
                    work_left: 0.0,
                    in_hand: 0,
                    gen: 0,
                },
            );
        }
        self.seq += 1;
        let seq = self.seq;
        self.pending.insert(seq, cmd);
        self.queue.push(Queued { time: at + cost, event: Event::Deliver { seq }, seq });
    }

    fn take_effect(&mut self, cmd: Command) -> Result<(), SimError> {
        let id = cmd.replica();
        let Some(r) = self.replicas.get(&id) else { return Ok(()) };
        if r.mode == Mode::Exited {
            return Ok(());
        }
        let host = r.host;
        match cmd {
            Command::Launch { .. } | Command::InvokeReplica { .. } => {
                let gen = r.gen;
                self.push(self.now, Event::Ready { replica: id, gen });
            }
            Command::Suspend { .. } => {
                self.with_host(host, |e| {
                    let r = e.replicas.get_mut(&id).expect("known");
                    r.mode = Mode::Suspended;
                    r.gen += 1;
                });
            }
            Command::Activate { host: to, .. } | Command::Migrate { to, .. } => {
                if r.mode != Mode::Suspended {
                    return Ok(());
                }
                let r = self.replicas.get_mut(&id).expect("known");
                r.host = to;
                r.mode = Mode::Starting;
                r.gen += 1;
                let gen = r.gen;
                self.push(self.now, Event::Ready { replica: id, gen });
            }
        }
        Ok(())
    }

    /// Feeds the replica's events to its session until it needs CPU time
    /// or exits.
    fn drive(&mut self, id: ReplicaId) -> Result<(), SimError> {
        loop {
            let r = self.replicas.get_mut(&id).expect("known");
            let Some(ev) = r.source.next_event(r.last.as_ref()) else {
                r.mode = Mode::Exited;
                self.sched.replica_exited(id);
                return Ok(());
            };
            let ev = ev.map_err(|e| SimError::Replica(e.to_string()))?;
            let action = r.session.handle_event(ev, &self.store).map_err(|e| SimError::Replica(e.to_string()))?;
            match &action {
                Action::Substituted { records, .. } if *records > 0 => {
                    let records = *records;
                    let mut work = records as f64 * self.cfg.compute_ms;
                    if self.cfg.jitter > 0.0 {
                        work *= 1.0 + self.cfg.jitter * self.rng.random_range(-1.0..1.0);
                    }
                    let host = r.host;
                    r.last = Some(action);
                    r.in_hand = records;
                    r.work_left = work;
                    if self.cfg.latency_ms > 0.0 {
                        // The reply travels back before computing starts.
                        r.mode = Mode::Starting;
                        r.gen += 1;
                        let gen = r.gen;
                        self.push(self.now + self.cfg.latency_ms, Event::Ready { replica: id, gen });
                    } else {
                        self.with_host(host, |e| e.replicas.get_mut(&id).expect("known").mode = Mode::Computing);
                    }
                    return Ok(());
                }
                Action::Exited { .. } => {
                    r.mode = Mode::Exited;
                    r.last = Some(action);
                    self.sched.replica_exited(id);
                    return Ok(());
                }
                _ => r.last = Some(action),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{SimHost, Trajectory};
    use super::*;
    use crate::scheduler::validate_log_text;

    #[test]
    fn one_host_is_serial() {
        let cfg = SimConfig::uniform(1, 100);
        let report = run_sim(&cfg).unwrap();
        assert_eq!(report.total_elapsed_ms, 200.0 * 10.0);
        assert_eq!(report.per_host_records, BTreeMap::from([(HostId(0), 200)]));
        assert_eq!(report.output_records, 200);
    }

    #[test]
    fn two_hosts_beat_one() {
        let one = run_sim(&SimConfig::uniform(1, 100)).unwrap();
        let two = run_sim(&SimConfig::uniform(2, 100)).unwrap();
        assert!(two.total_elapsed_ms < one.total_elapsed_ms);
        assert_eq!(two.per_host_records.values().sum::<u64>(), 200);
        assert!(two.per_host_records.values().all(|&n| n > 0));
        validate_log_text(&two.command_log.join("\n")).unwrap();
    }

    #[test]
    fn faster_host_takes_more_records() {
        let cfg = SimConfig { hosts: vec![SimHost::constant(0, 30), SimHost::constant(1, 100)], ..SimConfig::default() };
        let r = run_sim(&cfg).unwrap();
        assert!(r.per_host_records[&HostId(1)] > r.per_host_records[&HostId(0)]);
        assert_eq!(r.per_host_records.values().sum::<u64>(), 200);
    }

    #[test]
    fn empty_workload_takes_no_time() {
        let r = run_sim(&SimConfig { record_count: 0, ..SimConfig::uniform(2, 100) }).unwrap();
        assert_eq!(r.total_elapsed_ms, 0.0);
        assert_eq!(r.output_records, 0);
    }

    #[test]
    fn dead_pool_stalls() {
        let cfg = SimConfig { hosts: vec![SimHost::constant(0, 0)], ..SimConfig::default() };
        assert!(matches!(run_sim(&cfg), Err(SimError::Stalled { .. })));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let cfg = SimConfig {
            hosts: vec![
                SimHost { id: 0, availability: "0:100,300:20,900:80".parse::<Trajectory>().unwrap() },
                SimHost { id: 1, availability: "0:60,500:100".parse().unwrap() },
                SimHost { id: 2, availability: "250:90".parse().unwrap() },
            ],
            jitter: 0.3,
            seed: 42,
            ..SimConfig::default()
        };
        let a = run_sim(&cfg).unwrap();
        let b = run_sim(&cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.per_host_records.values().sum::<u64>(), 200);
        validate_log_text(&a.command_log.join("\n")).unwrap();
        let c = run_sim(&SimConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.total_elapsed_ms, c.total_elapsed_ms);
    }

    #[test]
    fn latency_slows_the_run() {
        let base = run_sim(&SimConfig::uniform(2, 100)).unwrap();
        let slow = run_sim(&SimConfig { latency_ms: 1.0, ..SimConfig::uniform(2, 100) }).unwrap();
        assert!(slow.total_elapsed_ms > base.total_elapsed_ms);
        assert_eq!(slow.output_records, 200);
    }
}
