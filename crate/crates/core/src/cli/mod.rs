//! Operator entry points.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::protocol::{Availability, HostId, DEFAULT_PORT};
use crate::record_server::{RecordStore, StoreConfig, StoreError};
use crate::scheduler::SchedulerConfig;
use crate::sim::{run_external, run_sim, speedup_csv, speedup_table, Scenario, SimConfig, SimError};
use crate::taskmap::{analyze, render, TaskmapError};

pub mod agent;
pub mod demo;
pub mod server;

pub use agent::{run_agent, AgentOptions, AgentReport};
pub use demo::{demo_bank, verify, DemoOptions, DemoReport};
pub use server::{Server, ServerOptions, ServerSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot listen: {0}")]
    BindFailed(String),
    #[error("cannot reach the server: {0}")]
    ConnectFailed(String),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run did not finish in time, {0} records never dispensed")]
    Timeout(u64),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Taskmap(#[from] TaskmapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConnectFailed(_) => 2,
            _ => 1,
        }
    }
}

/// Settings for `server` and `agent` read from a TOML file. Command-line
/// flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub mode: Option<String>,
    pub listen: Option<SocketAddr>,
    pub connect: Option<String>,
    /// Store config file, relative to the manifest.
    pub store: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub host_id: Option<u32>,
    pub availability: Option<u8>,
    pub compute_ms: Option<u64>,
    pub scheduler: SchedulerConfig,
}

impl RunManifest {
    pub fn load(path: &Path, mode: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        let mut m: RunManifest = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(found) = m.mode.as_deref().filter(|found| *found != mode) {
            return Err(CliError::Config(format!("manifest is for mode {found}, not {mode}")));
        }
        if let (Some(store), Some(dir)) = (m.store.as_mut(), path.parent()) {
            if store.is_relative() {
                *store = dir.join(&*store);
            }
        }
        m.scheduler.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(m)
    }
}

#[derive(Debug, Parser)]
#[command(name = "replicanet", version, about = "Replica-parallel record processing across LAN hosts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve a record store and schedule replicas on connected agents.
    Server(ServerArgs),
    /// Join a server as a host and run the replicas it places here.
    Agent(AgentArgs),
    /// Run a simulation from a config file.
    Sim(SimArgs),
    /// Print the task tree of a makefile.
    Analyze(AnalyzeArgs),
    /// Run the bank workload end to end over loopback and verify it.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct ServerArgs {
    /// Server manifest (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Store config (TOML).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Directory for per-host statistics logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    /// Agent manifest (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub connect: Option<String>,
    #[arg(long)]
    pub host_id: Option<u32>,
    /// CPU availability this host reports, in percent.
    #[arg(long)]
    pub availability: Option<u8>,
    /// Compute time of one record at full availability.
    #[arg(long)]
    pub compute_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Simulation config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub records: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a speedup table for N = 200, 400, ..., 1000 here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub makefile: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 200)]
    pub records: u64,
    #[arg(long, default_value_t = 2)]
    pub agents: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Working directory for the account files and logs.
    #[arg(long, default_value = "bank-demo")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Server(a) => cmd_server(a),
        Command::Agent(a) => cmd_agent(a),
        Command::Sim(a) => cmd_sim(a),
        Command::Analyze(a) => {
            let text = std::fs::read_to_string(&a.makefile)?;
            print!("{}", render(&analyze(&text)?));
            Ok(())
        }
        Command::Demo(a) => {
            let opts = DemoOptions { records: a.records, agents: a.agents, seed: a.seed, ..DemoOptions::default() };
            println!("{}", demo_bank(&opts, &a.out)?);
            Ok(())
        }
    }
}

fn manifest(config: Option<&Path>, mode: &str) -> Result<RunManifest, CliError> {
    config.map_or_else(|| Ok(RunManifest::default()), |p| RunManifest::load(p, mode))
}

fn cmd_server(a: ServerArgs) -> Result<(), CliError> {
    let m = manifest(a.config.as_deref(), "server")?;
    let store_path = a.store.or(m.store).ok_or_else(|| CliError::Config("--store is required".into()))?;
    let store = RecordStore::from_config(&StoreConfig::load(&store_path)?)?;
    let listen = a.listen.or(m.listen).unwrap_or_else(|| SocketAddr::from(([0, 0, 0, 0], DEFAULT_PORT)));
    let opts = ServerOptions { scheduler: m.scheduler, stats_dir: a.out.or(m.out), ..ServerOptions::default() };
    let server = Server::bind(listen, store, opts)?;
    log::info!("listening on {}", server.local_addr());
    let summary = server.run()?;
    for (h, n) in &summary.per_host {
        println!("host ID#{h}: {n} records");
    }
    println!("{} records in {:.2?}", summary.records, summary.elapsed);
    Ok(())
}

fn cmd_agent(a: AgentArgs) -> Result<(), CliError> {
    let m = manifest(a.config.as_deref(), "agent")?;
    let connect = a.connect.or(m.connect).unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}"));
    let pct = a.availability.or(m.availability).unwrap_or(100);
    let availability =
        Availability::new(pct).ok_or_else(|| CliError::Config(format!("availability {pct} is not a percentage")))?;
    let mut opts = AgentOptions {
        host_id: HostId(a.host_id.or(m.host_id).unwrap_or(0)),
        availability,
        heartbeat: Duration::from_millis(m.scheduler.heartbeat_ms),
        ..AgentOptions::default()
    };
    if let Some(ms) = a.compute_ms.or(m.compute_ms) {
        opts.compute = Duration::from_millis(ms);
    }
    let report = run_agent(connect.as_str(), opts)?;
    println!("{} replicas, {} records", report.replicas, report.records);
    Ok(())
}

fn cmd_sim(a: SimArgs) -> Result<(), CliError> {
    let mut cfg = SimConfig::load(&a.config)?;
    if let Some(n) = a.records {
        cfg.record_count = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(csv) = &a.csv {
        let rows = speedup_table(&cfg, &[200, 400, 600, 800, 1000])?;
        std::fs::write(csv, speedup_csv(&rows))?;
    }
    let report = match cfg.scenario {
        Scenario::InternalOnly => run_sim(&cfg)?,
        Scenario::ExternalTree(_) => run_external(&cfg)?,
    };
    match &a.out {
        Some(p) => std::fs::write(p, report.to_json())?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["replicanet", "demo", "--records", "10", "--agents", "3"]).unwrap();
        assert!(matches!(cli.command, Command::Demo(DemoArgs { records: 10, agents: 3, .. })));
        let cli = Cli::try_parse_from(["replicanet", "agent", "--connect", "h:7070", "--host-id", "4"]).unwrap();
        assert!(matches!(cli.command, Command::Agent(AgentArgs { host_id: Some(4), .. })));
    }

    #[test]
    fn unreachable_server_exits_2() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = run_agent(("127.0.0.1", port), AgentOptions::default()).unwrap_err();
        assert!(matches!(err, CliError::ConnectFailed(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn manifest_mode_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        std::fs::write(&p, "mode = \"agent\"\nhost_id = 3\n[scheduler]\ntick_ms = 50\n").unwrap();
        let m = RunManifest::load(&p, "agent").unwrap();
        assert_eq!((m.host_id, m.scheduler.tick_ms), (Some(3), 50));
        assert!(RunManifest::load(&p, "server").is_err());
    }
}
