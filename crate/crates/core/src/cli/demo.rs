//! The bank workload end to end: a server and several agents over loopback
//! TCP, checked against the sequential result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::agent::{run_agent, AgentOptions};
use super::server::{Server, ServerOptions};
use super::CliError;
use crate::protocol::{Availability, HostId};
use crate::record_server::{LayoutSpec, RecordStore, StoreConfig};
use crate::scheduler::SchedulerConfig;
use crate::workload::{self, INPUT_PATH, OUTPUT_PATH};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub records: u64,
    pub per_host: BTreeMap<HostId, u64>,
    pub availability: Vec<(HostId, Availability)>,
    pub output: PathBuf,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub records: u64,
    pub agents: u32,
    /// Drives the agents' availabilities.
    pub seed: u64,
    pub compute: Duration,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions { records: 200, agents: 2, seed: 0, compute: Duration::from_millis(1) }
    }
}

/// Writes the account file into `dir`, runs it through a server and
/// `agents` agents, and verifies the output.
pub fn demo_bank(opts: &DemoOptions, dir: &Path) -> Result<DemoReport, CliError> {
    if opts.agents == 0 {
        return Err(CliError::Config("the demo needs at least one agent".into()));
    }
    std::fs::create_dir_all(dir)?;
    let input = dir.join(INPUT_PATH);
    let output = dir.join(OUTPUT_PATH);
    std::fs::write(&input, workload::bank_store(opts.records))?;
    let mut cfg = StoreConfig::new(&input, LayoutSpec::Fixed(workload::record_bytes(opts.records)));
    cfg.output_path = Some(output.clone());
    let store = RecordStore::from_config(&cfg)?;

    let beat = Duration::from_millis(20);
    let server = Server::bind(
        "127.0.0.1:0",
        store,
        ServerOptions {
            scheduler: SchedulerConfig { tick_ms: 20, heartbeat_ms: 20, ..SchedulerConfig::default() },
            stats_dir: Some(dir.to_path_buf()),
            deadline: Some(Duration::from_secs(60)),
            min_hosts: opts.agents as usize,
            ..ServerOptions::default()
        },
    )?;
    let addr = server.local_addr();
    let start = Instant::now();
    let serving = thread::spawn(move || server.run());

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut availability = Vec::new();
    let mut agents = Vec::new();
    for i in 0..opts.agents {
        // The first host runs at full speed; the others are partly busy.
        let pct = if i == 0 { 100 } else { rng.random_range(40..=100) };
        let host = HostId(i);
        let a = Availability::saturating(pct);
        availability.push((host, a));
        let agent = AgentOptions {
            host_id: host,
            availability: a,
            heartbeat: beat,
            compute: opts.compute,
            record_bytes: Some(workload::record_bytes(opts.records)),
            ..AgentOptions::default()
        };
        agents.push(thread::spawn(move || run_agent(addr, agent)));
    }
    let summary = serving.join().map_err(|_| CliError::Config("server thread panicked".into()))??;
    for a in agents {
        a.join().map_err(|_| CliError::Config("agent thread panicked".into()))??;
    }

    verify(&input, &output)?;
    let dispensed: u64 = summary.per_host.values().sum();
    if dispensed != opts.records {
        return Err(CliError::VerificationFailed(format!("{dispensed} records dispensed, expected {}", opts.records)));
    }
    Ok(DemoReport { records: opts.records, per_host: summary.per_host, availability, output, elapsed: start.elapsed() })
}

/// Compares the output file with each input balance plus one, as multisets.
pub fn verify(input: &Path, output: &Path) -> Result<(), CliError> {
    let expected = workload::expected_output(&std::fs::read(input)?);
    let bytes = std::fs::read(output)?;
    let mut got = workload::parse_balances(&bytes)
        .ok_or_else(|| CliError::VerificationFailed(format!("{} holds a non-numeric record", output.display())))?;
    got.sort_unstable();
    if got != expected {
        let missing = expected.iter().filter(|v| got.binary_search(v).is_err()).count();
        return Err(CliError::VerificationFailed(format!(
            "{} records in the output, {} expected, {missing} expected balances missing",
            got.len(),
            expected.len()
        )));
    }
    Ok(())
}

impl std::fmt::Display for DemoReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} records verified in {:.2?}", self.records, self.elapsed)?;
        for (h, a) in &self.availability {
            let n = self.per_host.get(h).copied().unwrap_or(0);
            writeln!(f, "host ID#{h} at {}%: {n} records", a.percent())?;
        }
        write!(f, "output: {}", self.output.display())
    }
}
