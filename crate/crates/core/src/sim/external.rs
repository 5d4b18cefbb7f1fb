//! Task-graph execution: nodes run on hosts in the order `allocate_ordered`
//! picks, and replica-eligible nodes expand into internal runs over the
//! hosts that are free when they start.

use std::collections::{BTreeMap, BTreeSet};

use super::{run_sim, NodeRun, Scenario, SimConfig, SimError, SimHost, SimReport};
use crate::protocol::{HostId, HostStatus};
use crate::scheduler::{allocate_ordered, effective_completed};
use crate::taskmap::{analyze, TaskTree};

/// Runs the config's makefile scenario.
pub fn run_external(cfg: &SimConfig) -> Result<SimReport, SimError> {
    let Scenario::ExternalTree(path) = &cfg.scenario else {
        return Err(SimError::InvalidConfig("scenario is not an external tree".into()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Io { path: path.clone(), reason: e.to_string() })?;
    run_external_text(cfg, &text)
}

struct Running {
    node: String,
    hosts: Vec<HostId>,
    start: f64,
    end: f64,
    records: u64,
    per_host: BTreeMap<HostId, u64>,
}

/// Runs a makefile given as text.
pub fn run_external_text(cfg: &SimConfig, makefile: &str) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let tree = analyze(makefile)?;
    let mut report = SimReport::default();
    let mut completed: BTreeSet<String> = BTreeSet::new();
    let mut started: BTreeSet<String> = BTreeSet::new();
    let mut running: Vec<Running> = Vec::new();
    let mut now = 0.0_f64;
    let join_times: Vec<f64> = cfg.hosts.iter().map(|h| h.availability.join_time()).collect();

    loop {
        record_instant_targets(&tree, &completed, &mut report, now);
        let done = effective_completed(&tree, &completed);
        if done.len() == tree.len() {
            break;
        }
        let busy: BTreeSet<HostId> = running.iter().flat_map(|r| r.hosts.iter().copied()).collect();
        let free: Vec<HostStatus> = cfg
            .hosts
            .iter()
            .filter(|h| h.availability.join_time() <= now && !busy.contains(&HostId(h.id)))
            .map(|h| HostStatus::new(HostId(h.id), h.availability.at(now), now as u64))
            .collect();
        let assignments = allocate_ordered(&tree, &free, &completed, &started);
        let assigned: BTreeSet<HostId> = assignments.iter().map(|(h, _)| *h).collect();
        let mut helpers: Vec<HostId> = free.iter().map(|h| h.host_id).filter(|h| !assigned.contains(h)).collect();
        for (host, name) in assignments {
            let node = tree.node(&name).expect("allocated node");
            started.insert(name.clone());
            let run = if node.replica_eligible {
                let mut hosts = vec![host];
                hosts.append(&mut helpers);
                expand(cfg, &tree, &name, hosts, now)?
            } else {
                let traj = &cfg.hosts.iter().find(|h| h.id == host.0).expect("pool host").availability;
                let work = cfg.task_ms * node.commands.len() as f64;
                let end = traj
                    .finish_time(now, work)
                    .ok_or(SimError::Stalled { time_ms: now, remaining: 0 })?;
                Running { node: name, hosts: vec![host], start: now, end, records: 0, per_host: BTreeMap::new() }
            };
            running.push(run);
        }
        // Advance to the next completion or host arrival.
        let next_end = running.iter().map(|r| r.end).fold(f64::INFINITY, f64::min);
        let next_join = join_times.iter().copied().filter(|t| *t > now).fold(f64::INFINITY, f64::min);
        let next = next_end.min(next_join);
        if !next.is_finite() || next > cfg.max_time_ms {
            return Err(SimError::Stalled { time_ms: now, remaining: 0 });
        }
        now = next;
        let (finished, still): (Vec<Running>, Vec<Running>) = running.into_iter().partition(|r| r.end <= now);
        running = still;
        for r in finished {
            completed.insert(r.node.clone());
            for (h, n) in &r.per_host {
                *report.per_host_records.entry(*h).or_insert(0) += n;
            }
            report.output_records += r.records;
            report.nodes.push(NodeRun { name: r.node, hosts: r.hosts, start_ms: r.start, end_ms: r.end, records: r.records });
        }
    }
    report.total_elapsed_ms = report.nodes.iter().map(|n| n.end_ms).fold(0.0, f64::max);
    Ok(report)
}

/// Logs command-less targets the moment their dependencies are done.
fn record_instant_targets(tree: &TaskTree, completed: &BTreeSet<String>, report: &mut SimReport, now: f64) {
    let done = effective_completed(tree, completed);
    for n in tree.nodes() {
        if !n.terminal && !n.is_task() && done.contains(&n.name) && report.node(&n.name).is_none() {
            report.nodes.push(NodeRun { name: n.name.clone(), hosts: Vec::new(), start_ms: now, end_ms: now, records: 0 });
        }
    }
}

/// Runs a replica-eligible node as an internal run over `hosts`, with the
/// hosts' trajectories seen from `start`.
fn expand(cfg: &SimConfig, tree: &TaskTree, name: &str, hosts: Vec<HostId>, start: f64) -> Result<Running, SimError> {
    let node = tree.node(name).expect("known node");
    let records = node.data_storage.as_ref().and_then(|s| s.records).unwrap_or(cfg.record_count);
    let sub_hosts: Vec<SimHost> = hosts
        .iter()
        .map(|h| {
            let src = cfg.hosts.iter().find(|s| s.id == h.0).expect("pool host");
            SimHost { id: src.id, availability: src.availability.shifted(start) }
        })
        .collect();
    let sub = SimConfig { hosts: sub_hosts, record_count: records, scenario: Scenario::InternalOnly, ..cfg.clone() };
    let report = run_sim(&sub)?;
    Ok(Running {
        node: name.to_string(),
        hosts,
        start,
        end: start + report.total_elapsed_ms,
        records: report.output_records,
        per_host: report.per_host_records,
    })
}
