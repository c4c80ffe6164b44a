use std::path::PathBuf;

use d2_core::harness::{run, run_inproc, Scenario};
use d2sim::HttpFabric;

fn scenarios() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
}

#[test]
fn every_scenario_passes_over_http_with_the_inproc_transcript() {
    let files = scenarios();
    assert!(files.len() >= 10);
    for path in files {
        let scenario = Scenario::load(&path).unwrap();
        let http = run(&scenario, HttpFabric::new().unwrap(), "http").unwrap();
        http.network.shutdown();
        let failed: Vec<_> = http.report.steps.iter().filter(|s| !s.passed).collect();
        assert!(http.report.passed, "{}: {failed:?}", scenario.name);

        let local = run_inproc(&scenario).unwrap();
        local.network.shutdown();
        assert_eq!(http.report.transcript_sha256, local.report.transcript_sha256, "{}", scenario.name);
    }
}

#[test]
fn nodes_listen_on_distinct_loopback_ports() {
    let scenario = Scenario::load(&scenarios()[0]).unwrap();
    let fabric = HttpFabric::new().unwrap();
    let result = run(&scenario, fabric.clone(), "http").unwrap();
    let addrs = fabric.addresses();
    assert!(!addrs.is_empty());
    let mut ports: Vec<u16> = addrs.values().map(|a| a.port()).collect();
    ports.sort_unstable();
    ports.dedup();
    assert_eq!(ports.len(), addrs.len());
    assert!(addrs.values().all(|a| a.ip().is_loopback()));
    result.network.shutdown();
}
