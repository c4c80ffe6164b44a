//! Fixtures shared by the benchmarks.

use std::path::PathBuf;

use d2_core::harness::{Network, Scenario, Step};
use d2_core::transport::SimNetwork;

pub fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"));
    Scenario::load(&path).expect("bundled scenario loads")
}

/// The bank KYC network with every identity registered and nothing else run.
pub fn registered_network() -> Network {
    let s = scenario("kyc_direct");
    let mut net = Network::build(&s, SimNetwork::new()).expect("network builds");
    for step in s.steps.iter().take_while(|st| matches!(st, Step::Register { .. })) {
        net.run_step(step).expect("registration succeeds");
    }
    net.settle();
    net
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_has_three_rows_at_the_hub() {
        let net = registered_network();
        let rows: usize = net.hubs["hub1"].store_snapshot().accounts.values().map(|a| a.rows.len()).sum();
        assert_eq!(rows, 3);
        net.shutdown();
    }
}
