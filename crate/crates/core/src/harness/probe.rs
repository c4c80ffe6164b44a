//! Adversarial probes run against a finished scenario.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::runner::{run_inproc, Network};
use super::scenario::{NodeSpec, Scenario, ScenarioError};
use crate::api::Client;
use crate::error::ErrorCode;
use crate::hub::HubStore;
use crate::model::D2Id;
use crate::transport::{CallError, Transport};
use crate::wire::LookupRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Reads every hub store as an attacker with the disk but no keys.
    StolenHubStore,
    /// A provider holding its own D2Id reads a hub dump, keeps what it was
    /// sent and floods lookup.
    MaliciousProvider,
    /// Presents every disclosed temp again, several times.
    ReplayTemp,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown probe `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub scenario: String,
    /// The scenario itself ran to completion.
    pub scenario_passed: bool,
    pub passed: bool,
    pub findings: Vec<Finding>,
    /// What the attacker does learn, e.g. the issuer set of an account.
    #[serde(default)]
    pub exposure: Vec<String>,
}

fn finding(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Finding {
    Finding { name: name.into(), passed, detail: detail.into() }
}

fn contains(hay: &[u8], needle: &str) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_bytes())
}

pub fn probe(kind: ProbeKind, scenario: &Scenario) -> Result<ProbeReport, ScenarioError> {
    let mut result = run_inproc(scenario)?;
    let mut exposure = Vec::new();
    let findings = match kind {
        ProbeKind::StolenHubStore => stolen_hub_store(&result.network, &mut exposure),
        ProbeKind::MaliciousProvider => malicious_provider(&mut result.network, &mut exposure),
        ProbeKind::ReplayTemp => replay_temp(&mut result.network, 3),
    };
    result.network.shutdown();
    Ok(ProbeReport {
        kind,
        scenario: scenario.name.clone(),
        scenario_passed: result.report.passed,
        passed: !findings.is_empty() && findings.iter().all(|f| f.passed),
        findings,
        exposure,
    })
}

/// Issuer and capability set of every account in a readable store.
fn account_exposure(hub: &str, store: &HubStore) -> Vec<String> {
    store
        .accounts
        .values()
        .enumerate()
        .map(|(i, a)| {
            let rows: Vec<String> = a
                .rows
                .iter()
                .map(|r| {
                    let caps: Vec<&str> = r.d2vc.types().iter().map(|c| c.as_str()).collect();
                    format!("{} [{}]", r.d2vc.issuer(), caps.join(", "))
                })
                .collect();
            format!("{hub} account #{i}: {}", rows.join("; "))
        })
        .collect()
}

fn stolen_hub_store(net: &Network, exposure: &mut Vec<String>) -> Vec<Finding> {
    let secrets: Vec<&String> = net.usernames.values().chain(net.secrets.iter()).collect();
    let mut out = Vec::new();
    for (name, hub) in &net.hubs {
        let bytes = hub.serialized_store();
        let leaked: Vec<&str> = secrets.iter().filter(|s| contains(&bytes, s)).map(|s| s.as_str()).collect();
        out.push(finding(
            format!("{name}: no user identifiers or attributes"),
            leaked.is_empty(),
            if leaked.is_empty() { format!("{} bytes scanned", bytes.len()) } else { format!("found {leaked:?}") },
        ));
        if net.encrypted_hubs.contains(name) {
            let readable = HubStore::from_bytes(&bytes, None).is_ok();
            let issuers: Vec<String> =
                net.providers.values().map(|p| p.url().host()).filter(|h| contains(&bytes, h)).collect();
            out.push(finding(
                format!("{name}: store unreadable without the at-rest key"),
                !readable && issuers.is_empty(),
                if readable { "decoded without a key".into() } else { format!("issuer hosts visible: {issuers:?}") },
            ));
        } else {
            match HubStore::from_bytes(&bytes, None) {
                Ok(store) => {
                    let n: usize = store.accounts.values().map(|a| a.rows.len()).sum();
                    exposure.extend(account_exposure(name, &store));
                    out.push(finding(
                        format!("{name}: plaintext store holds only opaque rows"),
                        true,
                        format!("{n} rows of temp, D2Id and D2Vc"),
                    ));
                }
                Err(e) => out.push(finding(format!("{name}: plaintext store decodes"), false, e)),
            }
        }
    }
    out
}

fn requesters(net: &Network) -> Vec<String> {
    let mut names: Vec<String> = net
        .scenario
        .steps
        .iter()
        .filter_map(|s| match s {
            super::scenario::Step::Kyc { requester, .. } => Some(requester.clone()),
            _ => None,
        })
        .collect();
    names.sort();
    names.dedup();
    names
}

/// A provider that got hold of a hub dump looks up the account holding its
/// own D2Id for a user and reads off the other issuers.
fn malicious_provider(net: &mut Network, exposure: &mut Vec<String>) -> Vec<Finding> {
    let mut out = Vec::new();
    for (pname, provider) in &net.providers {
        let own: Vec<D2Id> = provider.store_snapshot().rows().map(|r| r.d2id.clone()).collect();
        for (hname, hub) in &net.hubs {
            let encrypted = net.encrypted_hubs.contains(hname);
            let store = HubStore::from_bytes(&hub.serialized_store(), None).ok();
            let mut co_issuers = BTreeSet::new();
            let mut matched = 0;
            if let Some(store) = &store {
                for acct in store.accounts.values() {
                    if acct.rows.iter().any(|r| own.contains(&r.d2id)) {
                        matched += 1;
                        co_issuers
                            .extend(acct.rows.iter().map(|r| r.d2vc.issuer().clone()).filter(|i| i != provider.url()));
                    }
                }
            }
            if matched == 0 && !encrypted {
                continue;
            }
            if encrypted {
                out.push(finding(
                    format!("{pname} vs encrypted {hname}: learns nothing"),
                    store.is_none(),
                    if store.is_none() {
                        "store does not decode without the key".into()
                    } else {
                        "store decoded".to_string()
                    },
                ));
            } else {
                for i in &co_issuers {
                    exposure.push(format!("{pname} links its user at {hname} to {i}"));
                }
                out.push(finding(
                    format!("{pname} vs plaintext {hname}: learns co-issuer URLs only"),
                    true,
                    format!("{matched} account(s) found, {} co-issuer(s)", co_issuers.len()),
                ));
            }
        }
    }

    let secrets: Vec<String> = net.usernames.values().chain(net.secrets.iter()).cloned().collect();
    for requester in requesters(net) {
        let url = net.urls[&requester].clone();
        let bytes = crate::transport::render_jsonl(&net.received_by(&url)).into_bytes();
        let leaked: Vec<&String> = secrets.iter().filter(|s| contains(&bytes, s)).collect();
        out.push(finding(
            format!("{requester}: received nothing identifying"),
            leaked.is_empty(),
            if leaked.is_empty() { format!("{} bytes received", bytes.len()) } else { format!("received {leaked:?}") },
        ));
    }

    // Enumeration: hammer lookup for one registered user.
    let target = net.scenario.nodes.iter().find_map(|n| match n {
        NodeSpec::Provider { name, .. } => {
            let p = &net.providers[name];
            let id = p.store_snapshot().rows().next().map(|r| r.identifier.clone())?;
            Some((name.clone(), id, p.config().lookups_per_minute))
        }
        _ => None,
    });
    let attacker = requesters(net).first().cloned();
    if let (Some(attacker), Some((target, id, limit))) = (attacker, target) {
        let from = net.urls[&attacker].clone();
        let fabric: Arc<dyn Transport> = net.fabric.clone();
        let client = Client::new(fabric.as_ref(), &from);
        let mut limited = false;
        for _ in 0..=limit {
            let req = LookupRequest { identifier: id.clone(), requester: from.clone() };
            if let Err(CallError::Remote(e)) = client.lookup(&net.urls[&target], &req) {
                if e.code == ErrorCode::RateLimited {
                    limited = true;
                    break;
                }
            }
        }
        net.settle();
        out.push(finding(
            format!("{attacker}: lookup flood against {target} is rate limited"),
            limited,
            format!("limit {limit} per minute"),
        ));
    }
    out
}

fn replay_temp(net: &mut Network, rounds: usize) -> Vec<Finding> {
    let disclosed = net.disclosed_temps();
    if disclosed.is_empty() {
        return vec![finding("replay: temps were disclosed", false, "scenario disclosed no temps")];
    }
    let mut out = Vec::new();
    for d in disclosed {
        let mut bad = Vec::new();
        for round in 0..rounds {
            for (where_, r) in
                [("hub", net.replay_at_hub(&d.hub, &d.temp)), ("issuer", net.replay_at_issuer(&d.issuer, &d.temp))]
            {
                match r {
                    Err(e) if e.code == ErrorCode::UnknownTemp => {}
                    other => bad.push(format!("round {round} at {where_}: {other:?}")),
                }
            }
        }
        net.settle();
        out.push(finding(
            format!("replay {}", d.temp),
            bad.is_empty(),
            if bad.is_empty() { format!("{} attempts rejected", rounds * 2) } else { bad.join("; ") },
        ));
    }
    out
}
