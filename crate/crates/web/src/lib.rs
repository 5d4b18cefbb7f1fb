//! Browser bindings for the simulator and the makefile analyzer. Every
//! export takes plain text and returns JSON for the page to draw.

use replicanet::sim::{run_external_text, run_sim, speedup_table, SimConfig};
use replicanet::taskmap::{analyze, render};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Runs the internal scenario described by a TOML config and returns the
/// report as JSON.
pub fn simulate_json(config: &str) -> Result<String, String> {
    let cfg = SimConfig::from_toml(config).map_err(|e| e.to_string())?;
    let report = run_sim(&cfg).map_err(|e| e.to_string())?;
    Ok(report.to_json())
}

/// TET on one host against two hosts for each record count in `ns`
/// (comma separated).
pub fn speedup_json(config: &str, ns: &str) -> Result<String, String> {
    let cfg = SimConfig::from_toml(config).map_err(|e| e.to_string())?;
    let ns: Vec<u64> = ns
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("`{s}` is not a record count")))
        .collect::<Result<_, _>>()?;
    if ns.is_empty() {
        return Err("give at least one record count".into());
    }
    let rows = speedup_table(&cfg, &ns).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&rows).expect("rows serialize"))
}

/// The task tree of a makefile plus the schedule it gets on `hosts` hosts
/// at full availability.
pub fn analyze_json(makefile: &str, hosts: u32) -> Result<String, String> {
    let tree = analyze(makefile).map_err(|e| e.to_string())?;
    let report = run_external_text(&SimConfig::uniform(hosts.max(1), 100), makefile).map_err(|e| e.to_string())?;
    Ok(json!({
        "text": render(&tree),
        "tree": tree,
        "schedule": report.nodes,
        "total_elapsed_ms": report.total_elapsed_ms,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn simulate(config: &str) -> Result<String, JsError> {
    simulate_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn speedup(config: &str, ns: &str) -> Result<String, JsError> {
    speedup_json(config, ns).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn analyze_makefile(makefile: &str, hosts: u32) -> Result<String, JsError> {
    analyze_json(makefile, hosts).map_err(|e| JsError::new(&e))
}
