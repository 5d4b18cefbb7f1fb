//! Simulations loaded from config files, as the `sim` subcommand runs them.

use replicanet::sim::{run_external, run_sim, Scenario, SimConfig};

#[test]
fn internal_run_from_toml_is_deterministic() {
    let text = "record_count = 120\nseed = 4\n[[hosts]]\nid = 0\navailability = \"0:100\"\n[[hosts]]\nid = 1\navailability = \"0:50,400:100\"\n";
    let cfg = SimConfig::from_toml(text).unwrap();
    let a = run_sim(&cfg).unwrap();
    let b = run_sim(&cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.per_host_records.values().sum::<u64>(), 120);
}

#[test]
fn external_tree_reads_the_makefile_beside_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("Makefile"), "all: b c\n\tlink\nb:\n\tcc b\nc:\n\tcc c\n").unwrap();
    let cfg_path = dir.path().join("sim.toml");
    std::fs::write(&cfg_path, "scenario = { external-tree = \"Makefile\" }\n[[hosts]]\nid = 0\navailability = \"0:100\"\n[[hosts]]\nid = 1\navailability = \"0:100\"\n").unwrap();
    let cfg = SimConfig::load(&cfg_path).unwrap();
    assert!(matches!(cfg.scenario, Scenario::ExternalTree(_)));
    let r = run_external(&cfg).unwrap();
    let (b, c, all) = (r.node("b").unwrap(), r.node("c").unwrap(), r.node("all").unwrap());
    assert_eq!(b.start_ms, c.start_ms);
    assert!(all.start_ms >= b.end_ms.max(c.end_ms));
}

#[test]
fn bad_configs_are_rejected() {
    assert!(SimConfig::from_toml("record_count = \"many\"").is_err());
    assert!(SimConfig::from_toml("[[hosts]]\nid = 0\navailability = \"0:101\"\n").is_err());
}
