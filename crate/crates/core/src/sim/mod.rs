//! Deterministic discrete-event simulation of a LAN running the middleware.
//!
//! Hosts follow piecewise-constant availability trajectories. Replicas run
//! the banking workload through real [`ReplicaSession`]s against an
//! in-memory [`RecordStore`], and the [`SchedulerState`] decides launches,
//! suspensions, activations and migrations. Messages take `latency_ms`
//! (zero by default) and scheduling commands additionally cost their
//! cost-model units times `unit_ms`.
//!
//! [`ReplicaSession`]: crate::wrapper::ReplicaSession
//! [`RecordStore`]: crate::record_server::RecordStore
//! [`SchedulerState`]: crate::scheduler::SchedulerState

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Availability, HostId};
use crate::scheduler::{Phase, SchedulerConfig, SchedulerError};
use crate::taskmap::TaskmapError;

mod engine;
mod external;

pub use engine::run_sim;
pub use external::{run_external, run_external_text};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation stalled at {time_ms} ms with {remaining} records unfinished")]
    Stalled { time_ms: f64, remaining: u64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Taskmap(#[from] TaskmapError),
    #[error("replica failed: {0}")]
    Replica(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// A step function of availability over time: `t0:a0,t1:a1,...`.
///
/// The host joins the LAN at the first step's time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Trajectory {
    steps: Vec<(f64, Availability)>,
}

impl Trajectory {
    pub fn constant(availability: Availability) -> Self {
        Trajectory { steps: vec![(0.0, availability)] }
    }

    pub fn new(steps: Vec<(f64, Availability)>) -> Result<Self, String> {
        if steps.is_empty() {
            return Err("trajectory needs at least one step".into());
        }
        for w in steps.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(format!("step times must increase: {} then {}", w[0].0, w[1].0));
            }
        }
        if steps.iter().any(|(t, _)| !t.is_finite() || *t < 0.0) {
            return Err("step times must be finite and non-negative".into());
        }
        Ok(Trajectory { steps })
    }

    pub fn steps(&self) -> &[(f64, Availability)] {
        &self.steps
    }

    pub fn join_time(&self) -> f64 {
        self.steps[0].0
    }

    /// Availability at `t`; zero before the host joins.
    pub fn at(&self, t: f64) -> Availability {
        self.steps.iter().take_while(|(s, _)| *s <= t).last().map_or(Availability::ZERO, |(_, a)| *a)
    }

    /// The trajectory as seen from a clock that starts at `offset`.
    pub fn shifted(&self, offset: f64) -> Trajectory {
        let mut steps = vec![(0.0, self.at(offset))];
        steps.extend(self.steps.iter().filter(|(t, _)| *t > offset).map(|(t, a)| (t - offset, *a)));
        Trajectory { steps }
    }

    /// When `work_ms` of full-speed work started at `start` finishes, or
    /// `None` if availability stays at zero.
    pub fn finish_time(&self, start: f64, work_ms: f64) -> Option<f64> {
        let mut left = work_ms;
        let mut t = start;
        let mut i = self.steps.iter().position(|(s, _)| *s > start).unwrap_or(self.steps.len());
        loop {
            let rate = self.at(t).percent() as f64 / 100.0;
            let next = self.steps.get(i).map(|(s, _)| *s);
            if left <= 0.0 {
                return Some(t);
            }
            match next {
                Some(n) if rate > 0.0 && left <= rate * (n - t) => return Some(t + left / rate),
                Some(n) => {
                    left -= rate * (n - t);
                    t = n;
                    i += 1;
                }
                None if rate > 0.0 => return Some(t + left / rate),
                None => return None,
            }
        }
    }
}

impl FromStr for Trajectory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut steps = Vec::new();
        for part in s.split(',').map(str::trim) {
            let (t, a) = part.split_once(':').ok_or_else(|| format!("step `{part}` is not t:a"))?;
            let t: f64 = t.trim().parse().map_err(|_| format!("time `{t}` is not a number"))?;
            let a: u8 = a.trim().parse().map_err(|_| format!("availability `{a}` is not 0..=100"))?;
            steps.push((t, Availability::new(a).ok_or_else(|| format!("availability {a} exceeds 100"))?));
        }
        Trajectory::new(steps)
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.steps.iter().map(|(t, a)| format!("{t}:{a}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl TryFrom<String> for Trajectory {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Trajectory> for String {
    fn from(t: Trajectory) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimHost {
    pub id: u32,
    pub availability: Trajectory,
}

impl SimHost {
    pub fn constant(id: u32, percent: u8) -> Self {
        SimHost { id, availability: Trajectory::constant(Availability::saturating(percent as u32)) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    InternalOnly,
    /// Path of a makefile, relative to the config file.
    ExternalTree(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub hosts: Vec<SimHost>,
    pub record_count: u64,
    /// Compute time of one record at 100% availability.
    pub compute_ms: f64,
    pub seed: u64,
    /// Milliseconds per cost-model unit.
    pub unit_ms: f64,
    /// One-way delay of every message.
    pub latency_ms: f64,
    /// Relative spread of per-record compute time, drawn from the seed.
    pub jitter: f64,
    /// Duration of one command line of a makefile task at 100%.
    pub task_ms: f64,
    pub max_time_ms: f64,
    pub scheduler: SchedulerConfig,
    pub scenario: Scenario,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            hosts: vec![SimHost::constant(0, 100)],
            record_count: 200,
            compute_ms: 10.0,
            seed: 0,
            unit_ms: 5.0,
            latency_ms: 0.0,
            jitter: 0.0,
            task_ms: 100.0,
            max_time_ms: 1.0e9,
            scheduler: SchedulerConfig { tick_ms: 100, heartbeat_ms: 100, ..SchedulerConfig::default() },
            scenario: Scenario::InternalOnly,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a makefile path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Scenario::ExternalTree(mk) = &mut cfg.scenario {
            if mk.is_relative() {
                if let Some(dir) = path.parent() {
                    *mk = dir.join(&*mk);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        self.scheduler.validate()?;
        if self.hosts.is_empty() {
            return bad("at least one host is required".into());
        }
        let mut ids: Vec<u32> = self.hosts.iter().map(|h| h.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.hosts.len() {
            return bad("host ids must be distinct".into());
        }
        for (name, v) in [("compute_ms", self.compute_ms), ("task_ms", self.task_ms)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("unit_ms", self.unit_ms), ("latency_ms", self.latency_ms)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must be within [0, 1)".into());
        }
        if !(self.max_time_ms > 0.0) {
            return bad("max_time_ms must be positive".into());
        }
        Ok(())
    }

    /// `n` hosts at a constant availability.
    pub fn uniform(n: u32, percent: u8) -> Self {
        SimConfig { hosts: (0..n).map(|i| SimHost::constant(i, percent)).collect(), ..SimConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub time_ms: f64,
    pub phase: Phase,
}

/// Execution of one task-graph node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRun {
    pub name: String,
    /// Empty for targets without commands.
    pub hosts: Vec<HostId>,
    pub start_ms: f64,
    pub end_ms: f64,
    pub records: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SimReport {
    /// Total elapsed time: when the last replica or task finished.
    pub total_elapsed_ms: f64,
    pub per_host_records: BTreeMap<HostId, u64>,
    /// Records present in the final output.
    pub output_records: u64,
    /// Decision log lines.
    pub command_log: Vec<String>,
    pub phase_transitions: Vec<PhaseChange>,
    pub nodes: Vec<NodeRun>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn node(&self, name: &str) -> Option<&NodeRun> {
        self.nodes.iter().find(|n| n.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub n: u64,
    pub tet_one_host: f64,
    pub tet_two_hosts: f64,
}

impl SpeedupRow {
    pub fn gap(&self) -> f64 {
        self.tet_one_host - self.tet_two_hosts
    }
}

/// TET on the first host alone and on the first two hosts, for each
/// record count. Both runs use the base seed. A base config with one host
/// is completed with a copy of it.
pub fn speedup_table(base: &SimConfig, ns: &[u64]) -> Result<Vec<SpeedupRow>, SimError> {
    if ns.is_empty() {
        return Err(SimError::InvalidConfig("speedup table needs at least one record count".into()));
    }
    let first = base.hosts.first().ok_or_else(|| SimError::InvalidConfig("no hosts".into()))?.clone();
    let second = base.hosts.get(1).cloned().unwrap_or(SimHost { id: first.id + 1, availability: first.availability.clone() });
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let one = SimConfig { hosts: vec![first.clone()], record_count: n, ..base.clone() };
        let two = SimConfig { hosts: vec![first.clone(), second.clone()], record_count: n, ..base.clone() };
        rows.push(SpeedupRow { n, tet_one_host: run_sim(&one)?.total_elapsed_ms, tet_two_hosts: run_sim(&two)?.total_elapsed_ms });
    }
    Ok(rows)
}

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut out = String::from("n,tet_1host_ms,tet_2host_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.n, r.tet_one_host, r.tet_two_hosts));
    }
    out
}
