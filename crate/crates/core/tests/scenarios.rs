use std::path::PathBuf;

use d2_core::harness::{run_inproc, Scenario};

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(name: &str) {
    let s = Scenario::load(&scenario_dir().join(format!("{name}.json"))).unwrap();
    let r = run_inproc(&s).unwrap();
    r.network.shutdown();
    let failed: Vec<_> = r.report.steps.iter().filter(|s| !s.passed).collect();
    assert!(r.report.passed, "{name}: {failed:#?}\nran {} of {} steps", r.report.steps.len(), s.steps.len());
}

#[test]
fn register() {
    run("register");
}

#[test]
fn kyc_direct() {
    run("kyc_direct");
}

#[test]
fn kyc_direct_encrypted() {
    run("kyc_direct_encrypted");
}

#[test]
fn kyc_mediated() {
    run("kyc_mediated");
}

#[test]
fn kyc_denied() {
    run("kyc_denied");
}

#[test]
fn kyc_timeout() {
    run("kyc_timeout");
}

#[test]
fn renewal() {
    run("renewal");
}

#[test]
fn renewal_partial() {
    run("renewal_partial");
}

#[test]
fn migration() {
    run("migration");
}

#[test]
fn migration_target_down() {
    run("migration_target_down");
}

#[test]
fn faults() {
    run("faults");
}

#[test]
fn every_scenario_file_parses() {
    let mut n = 0;
    for entry in std::fs::read_dir(scenario_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 10);
}
