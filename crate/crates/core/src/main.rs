use clap::Parser;
use replicanet::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPLICANET_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("replicanet: {e}");
        std::process::exit(e.exit_code());
    }
}
