//! The `d2sim` command line: scenario runs, adversarial probes and
//! standalone nodes over HTTP.

pub mod http;
pub mod serve;

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;

use d2_core::harness::{probe, run, ProbeKind, Report, Scenario, TransportKind};
use d2_core::transport::{render_jsonl, Fabric, SimNetwork};

pub use http::HttpFabric;

/// Runs a scenario, optionally writing `report.json` and `transcript.jsonl`
/// to `out`. Returns the report; `passed` decides the exit code.
pub fn run_scenario(
    path: &Path,
    seed: Option<u64>,
    transport: Option<TransportKind>,
    out: Option<&Path>,
) -> anyhow::Result<Report> {
    let mut scenario = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let kind = transport.unwrap_or(scenario.transport);
    let (fabric, name): (Arc<dyn Fabric>, &str) = match kind {
        TransportKind::Inproc => (SimNetwork::new(), "inproc"),
        TransportKind::Http => (HttpFabric::new()?, "http"),
    };
    let result = run(&scenario, fabric, name)?;
    result.network.shutdown();
    let mut report = result.report;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let transcript = dir.join("transcript.jsonl");
        std::fs::write(&transcript, render_jsonl(&result.transcript))?;
        report.transcript = Some(transcript.display().to_string());
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}

pub fn print_report(report: &Report) {
    for s in &report.steps {
        let mark = if s.passed { "ok  " } else { "FAIL" };
        println!("{mark} {:>3} {:<24} {}", s.index, s.action, s.detail);
    }
    println!(
        "{} {} seed={} transport={} steps={} transcript_sha256={}",
        if report.passed { "PASS" } else { "FAIL" },
        report.scenario,
        report.seed,
        report.transport,
        report.steps.len(),
        report.transcript_sha256,
    );
}

/// Runs one probe and prints its findings as JSON. Returns whether every
/// finding held.
pub fn run_probe(kind: ProbeKind, path: &Path, out: Option<&Path>) -> anyhow::Result<bool> {
    let scenario = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    let report = probe(kind, &scenario)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("probe.json"), &json)?;
    }
    println!("{json}");
    Ok(report.passed && report.scenario_passed)
}
