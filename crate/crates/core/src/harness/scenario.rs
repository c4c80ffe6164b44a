//! Scenario file format.
//!
//! Nodes and users are referred to by name. A user identifier written as
//! `@name` is replaced by a 24-character random string derived from the
//! scenario seed, so store scans cannot match by accident.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Policy;
use crate::model::{CapabilityType, NodeUrl};
use crate::wire::{DenyReason, DiscoveryMode, Predicate};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Inproc,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transport: TransportKind,
    /// Simulated wall clock at the start of the run.
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    pub nodes: Vec<NodeSpec>,
    pub steps: Vec<Step>,
}

fn default_start() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2024-06-01T09:00:00Z").expect("valid constant").with_timezone(&Utc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeSpec {
    Hub {
        name: String,
        url: NodeUrl,
        #[serde(default)]
        encrypt_store: bool,
        #[serde(default)]
        pending_deadline_secs: Option<i64>,
    },
    Provider {
        name: String,
        url: NodeUrl,
        /// Names of issuers this provider trusts when acting as requester.
        #[serde(default)]
        trust: BTreeSet<String>,
        #[serde(default)]
        users: Vec<UserSpec>,
        #[serde(default)]
        lookups_per_minute: Option<usize>,
    },
    Agent {
        name: String,
        #[serde(default = "default_pin")]
        pin: String,
        #[serde(default)]
        policies: Vec<Policy>,
    },
}

fn default_pin() -> String {
    "0000".into()
}

impl NodeSpec {
    pub fn name(&self) -> &str {
        match self {
            NodeSpec::Hub { name, .. } | NodeSpec::Provider { name, .. } | NodeSpec::Agent { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub id: String,
    pub password: String,
    pub birthdate: NaiveDate,
    pub address: String,
    pub nationality: String,
    pub capabilities: BTreeSet<CapabilityType>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSpec {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    Down {
        node: String,
    },
    Up {
        node: String,
    },
    Drop {
        node: String,
        #[serde(default)]
        path: String,
        #[serde(default)]
        count: Option<u32>,
    },
    Duplicate {
        node: String,
        #[serde(default)]
        path: String,
        #[serde(default)]
        count: Option<u32>,
    },
    Delay {
        node: String,
        #[serde(default)]
        path: String,
        #[serde(default)]
        count: Option<u32>,
    },
    Release,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Register {
        agent: String,
        provider: String,
        user: String,
        password: String,
        hub: String,
        #[serde(default)]
        expect_error: Option<String>,
    },
    Kyc {
        requester: String,
        bootstrap: String,
        user: String,
        #[serde(default = "default_mode")]
        mode: DiscoveryMode,
        predicates: Vec<Predicate>,
        label: String,
        #[serde(default)]
        expect_error: Option<String>,
    },
    Poll {
        agent: String,
    },
    Decide {
        agent: String,
        kyc: String,
        decision: DecisionSpec,
        /// Capability → provider name. Defaults to the first candidate.
        #[serde(default)]
        selection: BTreeMap<CapabilityType, String>,
        #[serde(default)]
        expect_error: Option<String>,
    },
    InjectFault(FaultSpec),
    AdvanceClock {
        seconds: i64,
    },
    Renew {
        agent: String,
        #[serde(default)]
        expect_error: Option<String>,
    },
    Migrate {
        agent: String,
        target: String,
        #[serde(default)]
        expect_error: Option<String>,
    },
    Rotate {
        provider: String,
        user: String,
        #[serde(default)]
        expect_error: Option<String>,
    },
    Lookup {
        requester: String,
        provider: String,
        user: String,
        #[serde(default)]
        expect_error: Option<String>,
    },
    /// Records every temp and D2Id currently held by any hub.
    Snapshot {
        label: String,
    },
    Assert(Check),
}

fn default_mode() -> DiscoveryMode {
    DiscoveryMode::Direct
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// Provider, hub and vault rows for one registration agree field for field.
    RegistrationState {
        agent: String,
        provider: String,
        user: String,
        hub: String,
    },
    KycVerdict {
        kyc: String,
        verdict: bool,
        #[serde(default)]
        denied: Option<DenyReason>,
    },
    /// Per-capability failure recorded by the requester.
    KycCapabilityError {
        kyc: String,
        capability: CapabilityType,
        code: String,
    },
    /// Nothing the requester received contains a username, birthdate or
    /// stored address.
    TranscriptNoLeak {
        requester: String,
    },
    /// The received attestation for `capability` carries only the boolean.
    AttestationMinimal {
        kyc: String,
        capability: CapabilityType,
        result: bool,
    },
    /// Hub stores contain no usernames; encrypted ones no issuer URLs either.
    HubNoIdentity,
    /// No plaintext attestation crosses any hub edge.
    HubTranscriptOpaque {
        hub: String,
    },
    /// Every temp disclosed to a requester now fails at hub and issuer.
    TempsReplayRejected,
    SnapshotInvalid {
        label: String,
    },
    LookupReturnsHub {
        requester: String,
        provider: String,
        user: String,
        hub: String,
    },
    VaultHubs {
        agent: String,
        hub: String,
    },
    AgentQuarantined {
        agent: String,
        count: usize,
    },
    HubAccounts {
        hub: String,
        count: usize,
    },
    StoreAudit,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name() == name)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let mut names = BTreeSet::new();
        let mut urls = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name()) {
                return bad(format!("duplicate node name `{}`", n.name()));
            }
            if let NodeSpec::Hub { url, .. } | NodeSpec::Provider { url, .. } = n {
                if !urls.insert(url.clone()) {
                    return bad(format!("duplicate node url {url}"));
                }
            }
        }
        let role = |name: &str, want: &str| -> Result<(), ScenarioError> {
            let ok = matches!(
                (self.node(name), want),
                (Some(NodeSpec::Hub { .. }), "hub")
                    | (Some(NodeSpec::Provider { .. }), "provider")
                    | (Some(NodeSpec::Agent { .. }), "agent")
            );
            if ok {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!("`{name}` is not a {want} node")))
            }
        };
        for n in &self.nodes {
            if let NodeSpec::Provider { trust, .. } = n {
                for t in trust {
                    role(t, "provider")?;
                }
            }
        }
        for step in &self.steps {
            match step {
                Step::Register { agent, provider, hub, .. } => {
                    role(agent, "agent")?;
                    role(provider, "provider")?;
                    role(hub, "hub")?;
                }
                Step::Kyc { requester, bootstrap, predicates, .. } => {
                    role(requester, "provider")?;
                    role(bootstrap, "provider")?;
                    if predicates.is_empty() {
                        return bad("kyc step without predicates".into());
                    }
                }
                Step::Poll { agent } | Step::Renew { agent, .. } => role(agent, "agent")?,
                Step::Decide { agent, selection, .. } => {
                    role(agent, "agent")?;
                    for p in selection.values() {
                        role(p, "provider")?;
                    }
                }
                Step::Migrate { agent, target, .. } => {
                    role(agent, "agent")?;
                    role(target, "hub")?;
                }
                Step::Rotate { provider, .. } => role(provider, "provider")?,
                Step::Lookup { requester, provider, .. } => {
                    role(requester, "provider")?;
                    role(provider, "provider")?;
                }
                Step::InjectFault(f) => match f {
                    FaultSpec::Down { node }
                    | FaultSpec::Up { node }
                    | FaultSpec::Drop { node, .. }
                    | FaultSpec::Duplicate { node, .. }
                    | FaultSpec::Delay { node, .. } => {
                        if !names.contains(node.as_str()) {
                            return bad(format!("unknown node `{node}`"));
                        }
                    }
                    FaultSpec::Release | FaultSpec::Clear => {}
                },
                Step::AdvanceClock { seconds } if *seconds < 0 => return bad("clock cannot go backwards".into()),
                Step::AdvanceClock { .. } | Step::Snapshot { .. } => {}
                Step::Assert(c) => match c {
                    Check::RegistrationState { agent, provider, hub, .. } => {
                        role(agent, "agent")?;
                        role(provider, "provider")?;
                        role(hub, "hub")?;
                    }
                    Check::TranscriptNoLeak { requester } => role(requester, "provider")?,
                    Check::HubTranscriptOpaque { hub } | Check::HubAccounts { hub, .. } => role(hub, "hub")?,
                    Check::LookupReturnsHub { requester, provider, hub, .. } => {
                        role(requester, "provider")?;
                        role(provider, "provider")?;
                        role(hub, "hub")?;
                    }
                    Check::VaultHubs { agent, hub } => {
                        role(agent, "agent")?;
                        role(hub, "hub")?;
                    }
                    Check::AgentQuarantined { agent, .. } => role(agent, "agent")?,
                    _ => {}
                },
            }
        }
        Ok(())
    }
}
