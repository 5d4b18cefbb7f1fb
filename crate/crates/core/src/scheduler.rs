//! Two-phase dynamic scheduling of replicas over the host pool.
//!
//! Phase 1 holds while at least as many records remain as there are hosts:
//! the scheduler reacts to hosts joining and to availability changes, and
//! never migrates. Once fewer records than hosts remain, Phase 2a (more
//! replicas than records) suspends replicas that overrun the predicted
//! deadline and migrates suspended replicas to idle hosts, never launching.
//! Phase 2b (no more replicas than records) prefers launching fresh
//! replicas on idle hosts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Availability, Heartbeat, HostId, HostStatus, Message, ReplicaId, STALE_PERIODS};
use crate::taskmap::TaskTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("host pool is empty")]
    EmptyPool,
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("decision log line {line}: {reason}")]
    BadLogLine { line: usize, reason: String },
}

/// Relative costs of the three ways to put a replica to work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub h: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { h: 10.0 }
    }
}

impl CostModel {
    /// Resuming in place.
    pub fn resume(&self) -> f64 {
        1.0
    }

    pub fn launch(&self) -> f64 {
        self.h
    }

    pub fn migrate(&self) -> f64 {
        2.0 * self.h
    }

    /// Cost units of one command. Suspending is free, and so is starting
    /// the application itself on its origin host.
    pub fn cost(&self, cmd: &Command) -> f64 {
        match cmd {
            Command::Launch { .. } | Command::Suspend { .. } => 0.0,
            Command::InvokeReplica { .. } => self.launch(),
            Command::Activate { .. } => self.resume(),
            Command::Migrate { .. } => self.migrate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub tick_ms: u64,
    /// Expected interval between heartbeats of one host.
    pub heartbeat_ms: u64,
    pub safety_factor: f64,
    /// Availability points charged per running replica.
    pub load_quantum: u32,
    pub h: f64,
    /// Floor for the predicted deadline.
    pub min_deadline_ms: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { tick_ms: 1000, heartbeat_ms: 1000, safety_factor: 2.0, load_quantum: 30, h: 10.0, min_deadline_ms: 0.0 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::InvalidConfig(m.to_string()));
        if self.tick_ms == 0 || self.heartbeat_ms == 0 {
            return bad("tick_ms and heartbeat_ms must be positive");
        }
        if !(self.h > 1.0 && self.h.is_finite()) {
            return bad("h must exceed 1 so that resume < launch < migrate");
        }
        if !(self.safety_factor > 0.0 && self.safety_factor.is_finite()) {
            return bad("safety_factor must be positive");
        }
        if !(1..=100).contains(&self.load_quantum) {
            return bad("load_quantum must be within 1..=100");
        }
        if !(self.min_deadline_ms >= 0.0) {
            return bad("min_deadline_ms must be non-negative");
        }
        Ok(())
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel { h: self.h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Phase1,
    Phase2a,
    Phase2b,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Phase1 => "1",
            Phase::Phase2a => "2a",
            Phase::Phase2b => "2b",
        })
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Phase::Phase1),
            "2a" => Ok(Phase::Phase2a),
            "2b" => Ok(Phase::Phase2b),
            _ => Err(format!("unknown phase {s:?}")),
        }
    }
}

/// How an availability changed since the previous tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delta {
    New,
    Increase,
    Decrease,
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicaState {
    Running,
    Suspended,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaInfo {
    pub host: HostId,
    pub state: ReplicaState,
    pub records_done: u64,
    /// Running time spent on the current record before the last resume.
    run_ms_banked: f64,
    /// When the replica last started running.
    resumed_at: f64,
    /// The record (by `records_done`) for which it was already excluded.
    excluded_at: Option<u64>,
}

impl ReplicaInfo {
    /// Running time spent on the current record.
    pub fn task_elapsed(&self, now: f64) -> f64 {
        match self.state {
            ReplicaState::Running => self.run_ms_banked + (now - self.resumed_at).max(0.0),
            ReplicaState::Suspended => self.run_ms_banked,
        }
    }

    /// The replica was suspended for overrunning its current record.
    pub fn excluded(&self) -> bool {
        self.excluded_at == Some(self.records_done)
    }
}

/// A scheduling decision addressed to one host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    /// The first replica of the application.
    Launch { replica: ReplicaId, host: HostId },
    /// Any further replica.
    InvokeReplica { replica: ReplicaId, host: HostId },
    Suspend { replica: ReplicaId, host: HostId },
    Activate { replica: ReplicaId, host: HostId },
    Migrate { replica: ReplicaId, from: HostId, to: HostId },
}

impl Command {
    pub fn replica(&self) -> ReplicaId {
        match *self {
            Command::Launch { replica, .. }
            | Command::InvokeReplica { replica, .. }
            | Command::Suspend { replica, .. }
            | Command::Activate { replica, .. }
            | Command::Migrate { replica, .. } => replica,
        }
    }

    /// The host whose agent receives the command. A migration is sent to
    /// the source host.
    pub fn host(&self) -> HostId {
        match *self {
            Command::Launch { host, .. }
            | Command::InvokeReplica { host, .. }
            | Command::Suspend { host, .. }
            | Command::Activate { host, .. } => host,
            Command::Migrate { from, .. } => from,
        }
    }

    /// Starts a new replica.
    pub fn is_launch(&self) -> bool {
        matches!(self, Command::Launch { .. } | Command::InvokeReplica { .. })
    }

    pub fn to_message(&self, app_id: &str) -> Message {
        let app_id = app_id.to_string();
        match *self {
            Command::Launch { replica, .. } => Message::Launch { app_id, replica: Some(replica) },
            Command::InvokeReplica { replica, .. } => Message::InvokeReplica { app_id, replica: Some(replica) },
            Command::Suspend { replica, .. } => Message::Suspend(replica),
            Command::Activate { replica, .. } => Message::Activate(replica),
            Command::Migrate { replica, to, .. } => Message::Migrate { replica, target: to },
        }
    }

    /// Inverse of [`Command::to_message`] given the addressed host.
    pub fn from_message(msg: &Message, host: HostId) -> Option<Command> {
        Some(match msg {
            Message::Launch { replica: Some(replica), .. } => Command::Launch { replica: *replica, host },
            Message::InvokeReplica { replica: Some(replica), .. } => Command::InvokeReplica { replica: *replica, host },
            Message::Suspend(replica) => Command::Suspend { replica: *replica, host },
            Message::Activate(replica) => Command::Activate { replica: *replica, host },
            Message::Migrate { replica, target } => Command::Migrate { replica: *replica, from: host, to: *target },
            _ => return None,
        })
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tick: u64,
    pub phase: Phase,
    pub command: Command,
}

impl LogEntry {
    /// `tick=<n> phase=<p> <wire message> @<host>`
    pub fn format(&self, app_id: &str) -> String {
        let wire = self.command.to_message(app_id).encode();
        format!("tick={} phase={} {} @{}", self.tick, self.phase, wire.trim_end(), self.command.host())
    }

    pub fn parse(text: &str, line: usize) -> Result<LogEntry, SchedulerError> {
        let bad = |reason: String| SchedulerError::BadLogLine { line, reason };
        let rest = text.trim().strip_prefix("tick=").ok_or_else(|| bad("missing tick=".into()))?;
        let (tick, rest) = rest.split_once(' ').ok_or_else(|| bad("truncated line".into()))?;
        let tick = tick.parse().map_err(|_| bad(format!("tick {tick:?}")))?;
        let rest = rest.strip_prefix("phase=").ok_or_else(|| bad("missing phase=".into()))?;
        let (phase, rest) = rest.split_once(' ').ok_or_else(|| bad("truncated line".into()))?;
        let phase = phase.parse().map_err(bad)?;
        let (wire, host) = rest.rsplit_once(" @").ok_or_else(|| bad("missing @host".into()))?;
        let host = HostId(host.parse().map_err(|_| bad(format!("host {host:?}")))?);
        let msg = Message::decode(wire).map_err(|e| bad(e.to_string()))?;
        let command = Command::from_message(&msg, host).ok_or_else(|| bad(format!("{} is not a command", msg.tag())))?;
        Ok(LogEntry { tick, phase, command })
    }
}

/// A broken scheduling rule found in a decision log.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("tick {tick}: migration during phase 1")]
    MigrateInPhase1 { tick: u64 },
    #[error("tick {tick}: launch during phase 2a")]
    LaunchInPhase2a { tick: u64 },
    #[error("tick {tick}: activate on host {host} after a launch there")]
    ActivateAfterLaunch { tick: u64, host: HostId },
    #[error("tick {tick}: replica {replica} migrated to its own host")]
    MigrateToSelf { tick: u64, replica: ReplicaId },
}

/// Checks a decision log against the phase rules.
pub fn validate_log(entries: &[LogEntry]) -> Result<(), Violation> {
    let mut launched: BTreeSet<(u64, HostId)> = BTreeSet::new();
    for e in entries {
        let tick = e.tick;
        match (e.phase, e.command) {
            (Phase::Phase1, Command::Migrate { .. }) => return Err(Violation::MigrateInPhase1 { tick }),
            (Phase::Phase2a, c) if c.is_launch() => return Err(Violation::LaunchInPhase2a { tick }),
            (Phase::Phase1, Command::Activate { host, .. }) if launched.contains(&(tick, host)) => {
                return Err(Violation::ActivateAfterLaunch { tick, host })
            }
            (_, Command::Migrate { replica, from, to }) if from == to => return Err(Violation::MigrateToSelf { tick, replica }),
            (Phase::Phase1, c) if c.is_launch() => {
                launched.insert((tick, c.host()));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Parses and checks a textual decision log.
pub fn validate_log_text(text: &str) -> Result<Vec<LogEntry>, String> {
    let entries = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| LogEntry::parse(l, i + 1))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    validate_log(&entries).map_err(|v| v.to_string())?;
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HostEntry {
    status: HostStatus,
    /// Availability at the previous tick; `None` until the host's first tick.
    baseline: Option<Availability>,
}

/// Server-side scheduling state.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    config: SchedulerConfig,
    pool: BTreeMap<HostId, HostEntry>,
    replicas: BTreeMap<ReplicaId, ReplicaInfo>,
    remaining_tasks: u64,
    completed_durations: Vec<f64>,
    next_replica: u64,
    ticks: u64,
    log: Vec<LogEntry>,
    phases: Vec<(u64, f64, Phase)>,
    removed: Vec<HostId>,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig) -> Result<Self, SchedulerError> {
        config.validate()?;
        Ok(SchedulerState {
            config,
            pool: BTreeMap::new(),
            replicas: BTreeMap::new(),
            remaining_tasks: 0,
            completed_durations: Vec::new(),
            next_replica: 0,
            ticks: 0,
            log: Vec::new(),
            phases: Vec::new(),
            removed: Vec::new(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn remaining_tasks(&self) -> u64 {
        self.remaining_tasks
    }

    pub fn set_remaining_tasks(&mut self, n: u64) {
        self.remaining_tasks = n;
    }

    pub fn replicas(&self) -> &BTreeMap<ReplicaId, ReplicaInfo> {
        &self.replicas
    }

    pub fn replica(&self, r: ReplicaId) -> Option<&ReplicaInfo> {
        self.replicas.get(&r)
    }

    /// Xp.
    pub fn running_count(&self) -> usize {
        self.replicas.values().filter(|r| r.state == ReplicaState::Running).count()
    }

    /// Yp.
    pub fn suspended_count(&self) -> usize {
        self.replicas.values().filter(|r| r.state == ReplicaState::Suspended).count()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn phase_transitions(&self) -> &[(u64, f64, Phase)] {
        &self.phases
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Hosts dropped for missing heartbeats, in removal order.
    pub fn removed_hosts(&self) -> &[HostId] {
        &self.removed
    }

    pub fn completed_durations(&self) -> &[f64] {
        &self.completed_durations
    }

    pub fn pool(&self) -> Vec<HostStatus> {
        self.pool.keys().map(|h| self.host_status(*h).expect("pool host")).collect()
    }

    pub fn host_status(&self, host: HostId) -> Option<HostStatus> {
        let e = self.pool.get(&host)?;
        let mut s = e.status;
        s.active_replicas = self.on_host(host, ReplicaState::Running).len() as u32;
        s.suspended_replicas = self.on_host(host, ReplicaState::Suspended).len() as u32;
        Some(s)
    }

    pub fn delta(&self, host: HostId) -> Option<Delta> {
        let e = self.pool.get(&host)?;
        Some(match e.baseline {
            None => Delta::New,
            Some(b) if e.status.availability > b => Delta::Increase,
            Some(b) if e.status.availability < b => Delta::Decrease,
            Some(_) => Delta::Unchanged,
        })
    }

    /// Registers or refreshes a host and returns its pending delta.
    pub fn on_heartbeat(&mut self, hb: Heartbeat, now: f64) -> Delta {
        let seen = now.max(0.0) as u64;
        self.pool
            .entry(hb.host_id)
            .and_modify(|e| {
                e.status.availability = hb.availability;
                e.status.last_seen = seen;
            })
            .or_insert(HostEntry { status: HostStatus::new(hb.host_id, hb.availability, seen), baseline: None });
        self.delta(hb.host_id).expect("just inserted")
    }

    /// Accepts the current availabilities as the baseline for deltas.
    pub fn settle(&mut self) {
        for e in self.pool.values_mut() {
            e.baseline = Some(e.status.availability);
        }
    }

    /// Places an existing replica; used when restoring or constructing state.
    pub fn place_replica(&mut self, host: HostId, state: ReplicaState, now: f64) -> ReplicaId {
        let id = ReplicaId(self.next_replica);
        self.next_replica += 1;
        self.replicas.insert(id, ReplicaInfo { host, state, records_done: 0, run_ms_banked: 0.0, resumed_at: now, excluded_at: None });
        id
    }

    /// A replica finished one record.
    pub fn record_completed(&mut self, replica: ReplicaId, now: f64) {
        if let Some(r) = self.replicas.get_mut(&replica) {
            let took = r.task_elapsed(now);
            self.completed_durations.push(took);
            r.records_done += 1;
            r.run_ms_banked = 0.0;
            r.resumed_at = now;
        }
    }

    /// A replica ran out of records or exited.
    pub fn replica_exited(&mut self, replica: ReplicaId) {
        self.replicas.remove(&replica);
    }

    pub fn phase(&self) -> Result<Phase, SchedulerError> {
        if self.pool.is_empty() {
            return Err(SchedulerError::EmptyPool);
        }
        Ok(if self.remaining_tasks >= self.pool.len() as u64 {
            Phase::Phase1
        } else if self.replicas.len() as u64 > self.remaining_tasks {
            Phase::Phase2a
        } else {
            Phase::Phase2b
        })
    }

    /// `safety_factor` times the mean completed duration, or infinity
    /// before any record has completed.
    pub fn predict_deadline(&self) -> f64 {
        if self.completed_durations.is_empty() {
            return f64::INFINITY;
        }
        let mean = self.completed_durations.iter().sum::<f64>() / self.completed_durations.len() as f64;
        (self.config.safety_factor * mean).max(self.config.min_deadline_ms)
    }

    /// Running replicas whose current record has overrun the deadline.
    pub fn past_deadline(&self, now: f64) -> Vec<ReplicaId> {
        let deadline = self.predict_deadline();
        self.replicas
            .iter()
            .filter(|(_, r)| r.state == ReplicaState::Running && r.task_elapsed(now) > deadline)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Drops hosts silent for the staleness window; their replicas count as
    /// suspended.
    pub fn expire_stale(&mut self, now: f64) -> Vec<HostId> {
        let window = (STALE_PERIODS as u64 * self.config.heartbeat_ms) as f64;
        let stale: Vec<HostId> =
            self.pool.iter().filter(|(_, e)| now - e.status.last_seen as f64 > window).map(|(h, _)| *h).collect();
        for h in &stale {
            self.pool.remove(h);
            for r in self.on_host(*h, ReplicaState::Running) {
                self.suspend(r, now);
            }
        }
        self.removed.extend(&stale);
        stale
    }

    fn on_host(&self, host: HostId, state: ReplicaState) -> Vec<ReplicaId> {
        self.replicas.iter().filter(|(_, r)| r.host == host && r.state == state).map(|(id, _)| *id).collect()
    }

    fn availability(&self, host: HostId) -> u32 {
        self.pool.get(&host).map_or(0, |e| e.status.availability.percent() as u32)
    }

    /// Replicas the host can run without exceeding its availability.
    fn capacity(&self, host: HostId) -> usize {
        (self.availability(host) / self.config.load_quantum) as usize
    }

    fn fits_one(&self, host: HostId) -> bool {
        self.capacity(host) >= 1
    }

    /// Hosts by descending availability, ties by id.
    fn hosts_by_availability(&self) -> Vec<HostId> {
        let mut hosts: Vec<HostId> = self.pool.keys().copied().collect();
        hosts.sort_by_key(|h| (std::cmp::Reverse(self.availability(*h)), *h));
        hosts
    }

    fn can_launch(&self) -> bool {
        (self.replicas.len() as u64) < self.remaining_tasks
    }

    fn suspend(&mut self, replica: ReplicaId, now: f64) {
        if let Some(r) = self.replicas.get_mut(&replica) {
            if r.state == ReplicaState::Running {
                r.run_ms_banked = r.task_elapsed(now);
                r.state = ReplicaState::Suspended;
            }
        }
    }

    fn resume(&mut self, replica: ReplicaId, host: HostId, now: f64) {
        if let Some(r) = self.replicas.get_mut(&replica) {
            r.host = host;
            r.state = ReplicaState::Running;
            r.resumed_at = now;
        }
    }

    /// Applies a command to the state. Launches allocate the replica id.
    fn apply(&mut self, cmd: Command, now: f64) {
        match cmd {
            Command::Launch { host, .. } | Command::InvokeReplica { host, .. } => {
                self.place_replica(host, ReplicaState::Running, now);
            }
            Command::Suspend { replica, .. } => self.suspend(replica, now),
            Command::Activate { replica, host } => self.resume(replica, host, now),
            Command::Migrate { replica, to, .. } => self.resume(replica, to, now),
        }
    }

    fn launch_command(&self, host: HostId) -> Command {
        let replica = ReplicaId(self.next_replica);
        if self.next_replica == 0 {
            Command::Launch { replica, host }
        } else {
            Command::InvokeReplica { replica, host }
        }
    }

    /// Runs one scheduling round at time `now` and returns the commands in
    /// dispatch order. The commands are already applied to the state.
    pub fn tick(&mut self, now: f64) -> Vec<Command> {
        self.ticks += 1;
        self.expire_stale(now);
        let Ok(phase) = self.phase() else { return Vec::new() };
        if self.phases.last().map(|p| p.2) != Some(phase) {
            self.phases.push((self.ticks, now, phase));
        }
        let mut out = Vec::new();
        let mut emit = |this: &mut Self, cmd: Command| {
            this.apply(cmd, now);
            this.log.push(LogEntry { tick: this.ticks, phase, command: cmd });
            out.push(cmd);
        };
        let hosts = self.hosts_by_availability();
        let deltas: BTreeMap<HostId, Delta> = hosts.iter().map(|h| (*h, self.delta(*h).expect("pool host"))).collect();
        let mut suspended_now: BTreeSet<ReplicaId> = BTreeSet::new();

        if phase != Phase::Phase1 {
            // Prediction with exclusion.
            for r in self.past_deadline(now) {
                let info = self.replicas[&r];
                if info.excluded_at == Some(info.records_done) {
                    continue;
                }
                self.replicas.get_mut(&r).expect("listed").excluded_at = Some(info.records_done);
                suspended_now.insert(r);
                emit(self, Command::Suspend { replica: r, host: info.host });
            }
        }

        for &host in &hosts {
            match deltas[&host] {
                Delta::Decrease => {
                    let mut running = self.on_host(host, ReplicaState::Running);
                    while running.len() > self.capacity(host) {
                        let r = running.pop().expect("non-empty");
                        suspended_now.insert(r);
                        emit(self, Command::Suspend { replica: r, host });
                    }
                }
                Delta::New if phase == Phase::Phase1 => {
                    if self.can_launch() {
                        let cmd = self.launch_command(host);
                        emit(self, cmd);
                    }
                }
                Delta::Increase => {
                    let running = self.on_host(host, ReplicaState::Running).len();
                    let mut room = self.capacity(host).max(1).saturating_sub(running);
                    let waiting: Vec<ReplicaId> = self
                        .on_host(host, ReplicaState::Suspended)
                        .into_iter()
                        .filter(|r| phase == Phase::Phase1 || !self.replicas[r].excluded())
                        .collect();
                    for r in waiting.iter().take(room) {
                        emit(self, Command::Activate { replica: *r, host });
                    }
                    room = room.saturating_sub(waiting.len());
                    let none_left = self.on_host(host, ReplicaState::Suspended).is_empty();
                    if phase == Phase::Phase1 && none_left {
                        while room > 0 && self.can_launch() {
                            let cmd = self.launch_command(host);
                            emit(self, cmd);
                            room -= 1;
                        }
                    }
                }
                _ => {}
            }
        }

        if phase != Phase::Phase1 {
            for &host in &hosts {
                let idle = self.on_host(host, ReplicaState::Running).is_empty()
                    && self.fits_one(host)
                    && deltas[&host] != Delta::Decrease;
                if !idle {
                    continue;
                }
                // Cheapest first: resume in place, then launch, then migrate.
                let own = self
                    .on_host(host, ReplicaState::Suspended)
                    .into_iter()
                    .find(|r| !suspended_now.contains(r) && !self.replicas[r].excluded());
                if let Some(r) = own {
                    emit(self, Command::Activate { replica: r, host });
                    continue;
                }
                if phase == Phase::Phase2b && self.can_launch() {
                    let cmd = self.launch_command(host);
                    emit(self, cmd);
                    continue;
                }
                let target_avail = self.availability(host);
                let mut movable: Vec<(u32, ReplicaId, HostId)> = self
                    .replicas
                    .iter()
                    .filter(|(_, r)| r.state == ReplicaState::Suspended && r.host != host)
                    .map(|(id, r)| (self.availability(r.host), *id, r.host))
                    .filter(|(a, _, _)| *a < target_avail)
                    .collect();
                movable.sort();
                if let Some(&(_, replica, from)) = movable.first() {
                    emit(self, Command::Migrate { replica, from, to: host });
                    continue;
                }
                // No better host exists for an excluded replica parked here,
                // and it alone holds its record: resume it in place.
                let parked = self
                    .on_host(host, ReplicaState::Suspended)
                    .into_iter()
                    .find(|r| !suspended_now.contains(r));
                if let Some(r) = parked {
                    emit(self, Command::Activate { replica: r, host });
                }
            }
        }

        self.settle();
        out
    }
}

/// Completed nodes plus file nodes and command-less targets whose
/// dependencies are all complete.
pub fn effective_completed(tree: &TaskTree, completed: &BTreeSet<String>) -> BTreeSet<String> {
    let mut done = completed.clone();
    for name in tree.by_priority() {
        let node = tree.node(name).expect("listed node");
        if node.terminal || (!node.is_task() && tree.children(name).iter().all(|c| done.contains(*c))) {
            done.insert(name.to_string());
        }
    }
    done
}

/// Assigns ready tasks to free hosts, most available host first. Among
/// ready tasks the lowest priority number wins, then a task with a data
/// storage, then the bigger task, then declaration order.
pub fn allocate_ordered(
    tree: &TaskTree,
    free_hosts: &[HostStatus],
    completed: &BTreeSet<String>,
    started: &BTreeSet<String>,
) -> Vec<(HostId, String)> {
    let done = effective_completed(tree, completed);
    let mut ready: Vec<(usize, &crate::taskmap::TaskNode)> = tree
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.is_task() && !done.contains(&n.name) && !started.contains(&n.name))
        .filter(|(i, _)| tree.descendants(*i).iter().all(|d| done.contains(&tree.nodes()[*d].name)))
        .collect();
    ready.sort_by_key(|(i, n)| (n.priority, n.data_storage.is_none(), std::cmp::Reverse(n.size_hint), *i));
    let mut hosts = free_hosts.to_vec();
    hosts.sort_by_key(|h| (std::cmp::Reverse(h.availability), h.host_id));
    hosts.iter().zip(ready).map(|(h, (_, n))| (h.host_id, n.name.clone())).collect()
}
