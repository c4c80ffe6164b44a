use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use chrono::Duration;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::scenario::{Check, DecisionSpec, FaultSpec, NodeSpec, Scenario, ScenarioError, Step};
use crate::agent::{AgentConfig, UserAgent};
use crate::api::Client;
use crate::clock::{Clock, SimClock};
use crate::crypto::{KdfParams, Nonce128, SigningKeyPair};
use crate::error::{ApiError, ErrorCode};
use crate::hub::{HubConfig, HubNode, HubStore};
use crate::model::{CapabilityType, D2Id, HubAddress, NodeUrl, TempD2Id};
use crate::provider::{KycStart, KycState, ProviderConfig, ProviderNode, UserSeed};
use crate::transport::{render_jsonl, CallError, Direction, Fabric, Fault, FaultRule, SimNetwork, TranscriptEntry};
use crate::trust::{RegistryBody, TrustRegistry};
use crate::wire::*;

/// Stable per-node seed: first eight bytes of SHA-256(seed ‖ label).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut k = [0u8; 32];
    ChaCha20Rng::seed_from_u64(derive_seed(seed, label)).fill_bytes(&mut k);
    k
}

/// 24 random alphanumerics, reproducible from the scenario seed.
pub fn username(seed: u64, symbol: &str) -> String {
    const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("user:{symbol}")));
    (0..24).map(|_| ALNUM[rng.gen_range(0..ALNUM.len())] as char).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    pub action: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub transport: String,
    pub passed: bool,
    pub steps: Vec<StepOutcome>,
    pub elapsed_ms: u128,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub transcript_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Snapshot {
    pub temps: Vec<(HubAddress, TempD2Id)>,
    pub d2ids: Vec<D2Id>,
}

/// Temp handed to a requester, with where it can be replayed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisclosedTemp {
    pub temp: TempD2Id,
    pub hub: HubAddress,
    pub issuer: NodeUrl,
}

const PROBE_URL: &str = "https://replay-probe.invalid";

/// A running scenario network.
pub struct Network {
    pub scenario: Scenario,
    pub fabric: Arc<dyn Fabric>,
    pub clock: Arc<SimClock>,
    pub registry: Arc<TrustRegistry>,
    pub urls: BTreeMap<String, NodeUrl>,
    pub hubs: BTreeMap<String, Arc<HubNode>>,
    pub encrypted_hubs: BTreeSet<String>,
    pub providers: BTreeMap<String, Arc<ProviderNode>>,
    pub agents: BTreeMap<String, UserAgent>,
    /// Resolved `@symbol` usernames.
    pub usernames: BTreeMap<String, String>,
    /// Attribute strings that must never leave their issuer.
    pub secrets: BTreeSet<String>,
    pub kyc: BTreeMap<String, (String, RequestId)>,
    pub snapshots: BTreeMap<String, Snapshot>,
    rng: ChaCha20Rng,
}

type StepResult = Result<String, String>;

fn parse_code(s: &str) -> Result<ErrorCode, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown error code `{s}`"))
}

fn expect(result: Result<String, ApiError>, expected: &Option<String>) -> StepResult {
    match (result, expected) {
        (Ok(d), None) => Ok(d),
        (Ok(_), Some(code)) => Err(format!("expected {code}, got success")),
        (Err(e), None) => Err(format!("{:?}: {}", e.code, e.message)),
        (Err(e), Some(code)) => {
            if e.code == parse_code(code)? {
                Ok(format!("rejected as expected with {code}"))
            } else {
                Err(format!("expected {code}, got {:?}: {}", e.code, e.message))
            }
        }
    }
}

fn call_api(e: CallError) -> ApiError {
    match e {
        CallError::Remote(api) => api,
        other => ApiError::new(ErrorCode::HubUnreachable, other.to_string()),
    }
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default()
}

fn key_set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn contains(hay: &[u8], needle: &str) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_bytes())
}

/// Does any object inside `v` carry one of `fields`?
fn has_field(v: &Value, fields: &[&str]) -> bool {
    match v {
        Value::Object(o) => o.iter().any(|(k, x)| fields.contains(&k.as_str()) || has_field(x, fields)),
        Value::Array(a) => a.iter().any(|x| has_field(x, fields)),
        _ => false,
    }
}

/// Keys, configs and trust registry derived from a scenario's seed. The
/// harness and standalone `serve` nodes build from the same plan, so
/// separately launched nodes agree on every key.
pub struct Plan {
    pub seed: u64,
    pub registry: Arc<TrustRegistry>,
    pub urls: BTreeMap<String, NodeUrl>,
    /// (name, config, encrypted store)
    pub hubs: Vec<(String, HubConfig, bool)>,
    pub providers: Vec<(String, ProviderConfig, Vec<UserSeed>)>,
    pub usernames: BTreeMap<String, String>,
    pub secrets: BTreeSet<String>,
}

impl Plan {
    pub fn new(scenario: &Scenario) -> Result<Self, ScenarioError> {
        let seed = scenario.seed;
        let authority = SigningKeyPair::from_seed(derive_key(seed, "authority"));
        let mut body = RegistryBody { version: 1, ..Default::default() };
        let mut urls = BTreeMap::new();
        let mut usernames = BTreeMap::new();
        let mut secrets = BTreeSet::new();

        let mut hub_configs = Vec::new();
        let mut provider_configs = Vec::new();
        for node in &scenario.nodes {
            match node {
                NodeSpec::Hub { name, url, encrypt_store, pending_deadline_secs } => {
                    let address = HubAddress::parse(url.as_str()).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                    let key = SigningKeyPair::from_seed(derive_key(seed, &format!("hub:{name}")));
                    body.hubs.insert(url.clone(), key.public());
                    let mut cfg = HubConfig::new(address, key, derive_seed(seed, &format!("hub-rng:{name}")));
                    if *encrypt_store {
                        cfg.at_rest_key = Some(derive_key(seed, &format!("hub-store:{name}")));
                    }
                    if let Some(s) = pending_deadline_secs {
                        cfg.pending_deadline = Duration::seconds(*s);
                    }
                    urls.insert(name.clone(), url.clone());
                    hub_configs.push((name.clone(), cfg, *encrypt_store));
                }
                NodeSpec::Provider { name, url, users, lookups_per_minute, .. } => {
                    let mut cfg = ProviderConfig::new(url.clone(), derive_seed(seed, &format!("provider:{name}")));
                    if let Some(n) = lookups_per_minute {
                        cfg.lookups_per_minute = *n;
                    }
                    body.issuers.insert(url.clone(), cfg.signing_key.public());
                    urls.insert(name.clone(), url.clone());
                    let seeds: Vec<UserSeed> = users
                        .iter()
                        .map(|u| {
                            let identifier = resolve(seed, &mut usernames, &u.id);
                            secrets.insert(u.birthdate.to_string());
                            secrets.insert(u.address.clone());
                            UserSeed {
                                identifier,
                                password: u.password.clone(),
                                birthdate: u.birthdate,
                                address: u.address.clone(),
                                nationality: u.nationality.clone(),
                                capabilities: u.capabilities.clone(),
                            }
                        })
                        .collect();
                    provider_configs.push((name.clone(), cfg, seeds));
                }
                NodeSpec::Agent { name, .. } => {
                    let url = NodeUrl::parse(&format!("https://{name}.agent.invalid"))
                        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                    urls.insert(name.clone(), url);
                }
            }
        }
        let registry = Arc::new(TrustRegistry::sign(body, &authority));
        for (name, cfg, _) in &mut provider_configs {
            if let Some(NodeSpec::Provider { trust, .. }) = scenario.node(name) {
                cfg.trust_list = trust.iter().map(|t| urls[t].clone()).collect();
            }
        }
        Ok(Self { seed, registry, urls, hubs: hub_configs, providers: provider_configs, usernames, secrets })
    }

    /// Agent settings for `name`; the caller picks KDF cost and vault path.
    pub fn agent_config(
        &self,
        name: &str,
        kdf: KdfParams,
        vault_path: Option<std::path::PathBuf>,
    ) -> Option<AgentConfig> {
        Some(AgentConfig {
            url: self.urls.get(name)?.clone(),
            vault_path,
            kdf,
            seed: derive_seed(self.seed, &format!("agent:{name}")),
        })
    }
}

impl Network {
    pub fn build(scenario: &Scenario, fabric: Arc<dyn Fabric>) -> Result<Self, ScenarioError> {
        let Plan { registry, urls, hubs: hub_configs, providers: provider_configs, usernames, secrets, .. } =
            Plan::new(scenario)?;
        let seed = scenario.seed;
        let clock = Arc::new(SimClock::new(scenario.start));
        let transport: Arc<dyn crate::transport::Transport> = fabric.clone();
        let dyn_clock: Arc<dyn Clock> = clock.clone();

        let mut hubs = BTreeMap::new();
        let mut encrypted_hubs = BTreeSet::new();
        for (name, cfg, encrypted) in hub_configs {
            let hub = Arc::new(HubNode::new(cfg, registry.clone(), dyn_clock.clone(), transport.clone()));
            fabric.register(hub.clone());
            if encrypted {
                encrypted_hubs.insert(name.clone());
            }
            hubs.insert(name, hub);
        }
        let mut providers = BTreeMap::new();
        for (name, cfg, seeds) in provider_configs {
            let p = Arc::new(ProviderNode::new(cfg, &seeds, registry.clone(), dyn_clock.clone(), transport.clone()));
            fabric.register(p.clone());
            providers.insert(name, p);
        }
        let mut agents = BTreeMap::new();
        for node in &scenario.nodes {
            if let NodeSpec::Agent { name, pin, policies } = node {
                let config = AgentConfig {
                    url: urls[name].clone(),
                    vault_path: None,
                    kdf: KdfParams::fast(),
                    seed: derive_seed(seed, &format!("agent:{name}")),
                };
                let mut agent = UserAgent::create(config, pin, transport.clone(), dyn_clock.clone())
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                agent.set_policies(policies.clone()).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                agents.insert(name.clone(), agent);
            }
        }
        Ok(Self {
            scenario: scenario.clone(),
            fabric,
            clock,
            registry,
            urls,
            hubs,
            encrypted_hubs,
            providers,
            agents,
            usernames,
            secrets,
            kyc: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, "harness")),
        })
    }

    pub fn user(&mut self, symbol: &str) -> String {
        resolve(self.scenario.seed, &mut self.usernames, symbol)
    }

    fn hub_address(&self, name: &str) -> HubAddress {
        HubAddress::parse(self.urls[name].as_str()).expect("hub urls are valid")
    }

    fn client<'a>(&'a self, from: &'a NodeUrl) -> Client<'a> {
        Client::new(self.fabric.as_ref(), from)
    }

    pub fn kyc_report(&self, label: &str) -> Option<crate::provider::KycReport> {
        let (requester, id) = self.kyc.get(label)?;
        self.providers[requester].kyc_report(id)
    }

    /// Delivers deferred messages until quiet.
    pub fn settle(&self) {
        while self.fabric.settle() > 0 {}
    }

    /// Runs every step; stops at the first failing non-assert step.
    pub fn run_steps(&mut self) -> Vec<StepOutcome> {
        let steps = self.scenario.steps.clone();
        let mut out = Vec::new();
        for (index, step) in steps.iter().enumerate() {
            let action = describe(step);
            let result = self.run_step(step);
            self.settle();
            let passed = result.is_ok();
            out.push(StepOutcome { index, action, passed, detail: result.unwrap_or_else(|e| e) });
            if !passed && !matches!(step, Step::Assert(_)) {
                break;
            }
        }
        out
    }

    pub fn run_step(&mut self, step: &Step) -> StepResult {
        match step {
            Step::Register { agent, provider, user, password, hub, expect_error } => {
                let identifier = self.user(user);
                let provider_url = self.urls[provider].clone();
                let hub = self.hub_address(hub);
                let agent = self.agents.get_mut(agent).expect("validated");
                let r = agent
                    .register_identity(&provider_url, &identifier, password, &hub)
                    .map(|row| format!("registered {}", row.d2id));
                expect(r, expect_error)
            }
            Step::Kyc { requester, bootstrap, user, mode, predicates, label, expect_error } => {
                let identifier = self.user(user);
                let start = KycStart {
                    identifier,
                    bootstrap: self.urls[bootstrap].clone(),
                    mode: *mode,
                    predicates: predicates.clone(),
                };
                let r = self.providers[requester].start_kyc(&start).map(|report| {
                    self.kyc.insert(label.clone(), (requester.clone(), report.request_id.clone()));
                    format!("discovery {} accepted by {}", report.request_id, report.hub)
                });
                expect(r, expect_error)
            }
            Step::Poll { agent } => {
                let events = self.agents.get_mut(agent).expect("validated").poll(0).map_err(|e| e.to_string())?;
                Ok(format!("{} event(s)", events.len()))
            }
            Step::Decide { agent, kyc, decision, selection, expect_error } => {
                let (_, rid) = self.kyc.get(kyc).cloned().ok_or_else(|| format!("no kyc run `{kyc}`"))?;
                let urls = self.urls.clone();
                let agent = self.agents.get_mut(agent).expect("validated");
                agent.poll(0).map_err(|e| e.to_string())?;
                let verdict = match decision {
                    DecisionSpec::Reject => Verdict::Reject,
                    DecisionSpec::Approve => {
                        let pending = agent.pending().into_iter().find(|p| p.alert.request_id == rid);
                        let mut chosen = BTreeMap::new();
                        // Without a live alert the agent itself reports why.
                        for cap in pending.iter().flat_map(|p| &p.alert.wanted) {
                            let pending = pending.as_ref().expect("iterating its alert");
                            let issuer = match selection.get(cap) {
                                Some(name) => urls[name].clone(),
                                None => pending.alert.candidates[cap]
                                    .first()
                                    .cloned()
                                    .ok_or_else(|| format!("no candidate for {cap}"))?,
                            };
                            chosen.insert(cap.clone(), issuer);
                        }
                        Verdict::Approve { selection: chosen }
                    }
                };
                expect(agent.decide(&rid, verdict).map(|_| "decision sent".into()), expect_error)
            }
            Step::InjectFault(spec) => {
                let fault = self.fault(spec);
                self.fabric.inject(&fault)?;
                Ok(format!("{fault:?}"))
            }
            Step::AdvanceClock { seconds } => {
                self.clock.advance(Duration::seconds(*seconds));
                for h in self.hubs.values() {
                    h.tick();
                }
                self.settle();
                for p in self.providers.values() {
                    p.tick();
                }
                Ok(format!("now {}", self.clock.now()))
            }
            Step::Renew { agent, expect_error } => {
                let r = self
                    .agents
                    .get_mut(agent)
                    .expect("validated")
                    .renew_all()
                    .map(|rep| format!("{} renewed, {} failed", rep.renewed.len(), rep.failed.len()));
                expect(r, expect_error)
            }
            Step::Migrate { agent, target, expect_error } => {
                let target = self.hub_address(target);
                let r = self
                    .agents
                    .get_mut(agent)
                    .expect("validated")
                    .migrate(&target)
                    .map(|rep| format!("{} moved, {} failed", rep.renewed.len(), rep.failed.len()));
                expect(r, expect_error)
            }
            Step::Rotate { provider, user, expect_error } => {
                let id = self.user(user);
                expect(self.providers[provider].rotate_temp(&id).map(|_| "rotated".into()), expect_error)
            }
            Step::Lookup { requester, provider, user, expect_error } => {
                let id = self.user(user);
                let from = self.urls[requester].clone();
                let r = self
                    .client(&from)
                    .lookup(&self.urls[provider], &LookupRequest { identifier: id, requester: from.clone() })
                    .map(|resp| format!("hub {}", resp.hub))
                    .map_err(call_api);
                expect(r, expect_error)
            }
            Step::Snapshot { label } => {
                let snap = self.snapshot();
                let detail = format!("{} temps, {} d2ids", snap.temps.len(), snap.d2ids.len());
                self.snapshots.insert(label.clone(), snap);
                Ok(detail)
            }
            Step::Assert(check) => self.check(check),
        }
    }

    fn fault(&self, spec: &FaultSpec) -> Fault {
        let rule = |node: &String, path: &String, count: &Option<u32>| FaultRule {
            to: self.urls[node].clone(),
            path_prefix: path.clone(),
            count: *count,
        };
        match spec {
            FaultSpec::Down { node } => Fault::Down { node: self.urls[node].clone() },
            FaultSpec::Up { node } => Fault::Up { node: self.urls[node].clone() },
            FaultSpec::Drop { node, path, count } => Fault::Drop(rule(node, path, count)),
            FaultSpec::Duplicate { node, path, count } => Fault::Duplicate(rule(node, path, count)),
            FaultSpec::Delay { node, path, count } => Fault::Delay(rule(node, path, count)),
            FaultSpec::Release => Fault::Release,
            FaultSpec::Clear => Fault::Clear,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut snap = Snapshot::default();
        for hub in self.hubs.values() {
            let store = hub.store_snapshot();
            for acct in store.accounts.values() {
                for row in &acct.rows {
                    if let Some(t) = &row.temp {
                        snap.temps.push((hub.address().clone(), t.clone()));
                    }
                    snap.d2ids.push(row.d2id.clone());
                }
            }
        }
        snap
    }

    /// Temps a requester was handed: lookup answers and direct grants.
    pub fn disclosed_temps(&self) -> Vec<DisclosedTemp> {
        let mut out = Vec::new();
        for e in self.fabric.transcript() {
            if e.dir == Direction::Response && e.path.starts_with("/d2/lookup") {
                if let Ok(r) = serde_json::from_value::<LookupResponse>(e.body.clone()) {
                    let issuer = NodeUrl::parse(&e.from).expect("transcript urls are valid");
                    out.push(DisclosedTemp { temp: r.temp, hub: r.hub, issuer });
                }
            }
            if e.dir == Direction::Request && e.path.starts_with("/d2/result") {
                if let Ok(r) = serde_json::from_value::<DiscoveryResponse>(e.body.clone()) {
                    if let Outcome::Granted { grants } = r.outcome {
                        let hub = HubAddress::parse(&e.from).expect("transcript urls are valid");
                        for g in grants.into_values() {
                            out.push(DisclosedTemp { temp: g.temp, hub: hub.clone(), issuer: g.issuer });
                        }
                    }
                }
            }
        }
        out
    }

    /// Presents `temp` at `hub` as an unknown requester would.
    pub fn replay_at_hub(&mut self, hub: &HubAddress, temp: &TempD2Id) -> Result<(), ApiError> {
        let probe = NodeUrl::parse(PROBE_URL).expect("constant url");
        let req = DiscoveryRequest {
            temp: temp.clone(),
            requester: probe.clone(),
            wanted: vec![CapabilityType::Authentication],
            mode: DiscoveryMode::Direct,
            requester_pubkey: None,
            request_id: RequestId::random(&mut self.rng),
            queries: BTreeMap::new(),
        };
        self.client(&probe).discover(hub, &req).map(|_| ()).map_err(call_api)
    }

    pub fn replay_at_issuer(&mut self, issuer: &NodeUrl, temp: &TempD2Id) -> Result<(), ApiError> {
        let probe = NodeUrl::parse(PROBE_URL).expect("constant url");
        let query = PredicateQuery {
            temp: temp.clone(),
            predicate: Predicate::AuthChallenge { challenge: Nonce128::random(&mut self.rng) },
            requester: probe.clone(),
            nonce: Nonce128::random(&mut self.rng),
        };
        self.client(&probe).verify(issuer, &query).map(|_| ()).map_err(call_api)
    }

    /// Replays every disclosed temp at its hub and issuer. Returns
    /// (attempts, rejected with UnknownTemp, failures).
    pub fn replay_disclosed(&mut self) -> (usize, usize, Vec<String>) {
        let temps = self.disclosed_temps();
        let mut attempts = 0;
        let mut rejected = 0;
        let mut failures = Vec::new();
        for d in temps {
            for (where_, r) in [
                ("hub", self.replay_at_hub(&d.hub.clone(), &d.temp)),
                ("issuer", self.replay_at_issuer(&d.issuer.clone(), &d.temp)),
            ] {
                attempts += 1;
                match r {
                    Err(e) if e.code == ErrorCode::UnknownTemp => rejected += 1,
                    other => failures.push(format!("{} at {where_}: {other:?}", d.temp)),
                }
            }
        }
        self.settle();
        (attempts, rejected, failures)
    }

    /// Bytes delivered to `node`: responses to its calls and deferred pushes.
    pub fn received_by(&self, node: &NodeUrl) -> Vec<TranscriptEntry> {
        self.fabric
            .transcript()
            .into_iter()
            .filter(|e| e.to == node.as_str())
            .filter(|e| matches!(e.dir, Direction::Response | Direction::Error) || e.dir == Direction::Request)
            .collect()
    }

    fn identity_strings(&self) -> Vec<&str> {
        self.usernames.values().map(String::as_str).chain(self.secrets.iter().map(String::as_str)).collect()
    }

    pub fn check(&mut self, check: &Check) -> StepResult {
        match check {
            Check::RegistrationState { agent, provider, user, hub } => {
                let id = self.user(user);
                let p = self.providers[provider].row(&id).ok_or("provider has no row")?;
                let hub_node = &self.hubs[hub];
                let store = hub_node.store_snapshot();
                let h = store
                    .accounts
                    .values()
                    .flat_map(|a| a.rows.iter())
                    .find(|r| r.d2id == p.d2id)
                    .cloned()
                    .ok_or("hub has no row for the provider's D2Id")?;
                let vault = self.agents[agent].vault().map_err(|e| e.to_string())?;
                let a = vault
                    .rows
                    .iter()
                    .find(|r| r.identifier == id && r.d2vc.issuer() == p.d2vc.issuer())
                    .cloned()
                    .ok_or("vault has no row")?;
                let pj = serde_json::to_value(&p).expect("serializes");
                let hj = serde_json::to_value(&h).expect("serializes");
                let aj = serde_json::to_value(&a).expect("serializes");
                let mut problems = Vec::new();
                if keys(&pj) != key_set(&["identifier", "temp", "d2id", "d2vc"]) {
                    problems.push(format!("provider row fields {:?}", keys(&pj)));
                }
                if keys(&hj) != key_set(&["temp", "d2id", "d2vc"]) {
                    problems.push(format!("hub row fields {:?}", keys(&hj)));
                }
                if keys(&aj) != key_set(&["identifier", "d2id", "d2vc"]) {
                    problems.push(format!("vault row fields {:?}", keys(&aj)));
                }
                if h.temp.as_ref() != Some(&p.temp) {
                    problems.push("hub and provider temps differ".into());
                }
                if h.d2id != p.d2id || a.d2id != p.d2id {
                    problems.push("D2Ids differ".into());
                }
                if h.d2vc != p.d2vc || a.d2vc != p.d2vc {
                    problems.push("D2Vcs differ".into());
                }
                if p.d2id.hub != *hub_node.address() {
                    problems.push("D2Id names another hub".into());
                }
                if p.identifier != id || a.identifier != id {
                    problems.push("identifiers differ".into());
                }
                if problems.is_empty() {
                    Ok(format!("rows agree on {}", p.d2id))
                } else {
                    Err(problems.join("; "))
                }
            }
            Check::KycVerdict { kyc, verdict, denied } => {
                let r = self.kyc_report(kyc).ok_or_else(|| format!("no kyc run `{kyc}`"))?;
                if r.verdict != Some(*verdict) {
                    return Err(format!("verdict {:?}, state {:?}, checks {:?}", r.verdict, r.state, r.checks));
                }
                if let Some(reason) = denied {
                    if r.state != (KycState::Denied { reason: *reason }) {
                        return Err(format!("state {:?}", r.state));
                    }
                }
                Ok(format!("verdict {verdict}"))
            }
            Check::KycCapabilityError { kyc, capability, code } => {
                let r = self.kyc_report(kyc).ok_or_else(|| format!("no kyc run `{kyc}`"))?;
                let got = r.checks.get(capability).and_then(|c| c.error);
                if got == Some(parse_code(code)?) {
                    Ok(format!("{capability} failed with {code}"))
                } else {
                    Err(format!("{capability}: {got:?}"))
                }
            }
            Check::TranscriptNoLeak { requester } => {
                let url = self.urls[requester].clone();
                let received = self.received_by(&url);
                let bytes: Vec<u8> = render_jsonl(&received).into_bytes();
                let hits: Vec<&str> = self.identity_strings().into_iter().filter(|s| contains(&bytes, s)).collect();
                if hits.is_empty() {
                    Ok(format!("{} messages, {} bytes clean", received.len(), bytes.len()))
                } else {
                    Err(format!("requester received {hits:?}"))
                }
            }
            Check::AttestationMinimal { kyc, capability, result } => {
                let r = self.kyc_report(kyc).ok_or_else(|| format!("no kyc run `{kyc}`"))?;
                let att = r
                    .attestations
                    .iter()
                    .find(|a| &a.predicate.capability() == capability)
                    .ok_or("no attestation received")?;
                let v = serde_json::to_value(att).expect("serializes");
                let want = key_set(&["issuer", "predicate", "result", "nonce", "issued_at", "signature"]);
                if keys(&v) != want {
                    return Err(format!("attestation fields {:?}", keys(&v)));
                }
                let pred_keys = keys(&v["predicate"]);
                if pred_keys.len() != 2 || !pred_keys.contains("kind") {
                    return Err(format!("predicate fields {pred_keys:?}"));
                }
                if v["result"] != Value::Bool(*result) {
                    return Err(format!("result {}", v["result"]));
                }
                Ok(format!("{} attests only result={result}", att.issuer))
            }
            Check::HubNoIdentity => {
                let issuers: Vec<String> =
                    self.providers.values().flat_map(|p| [p.url().to_string(), p.url().host()]).collect();
                let mut problems = Vec::new();
                for (name, hub) in &self.hubs {
                    let bytes = hub.serialized_store();
                    for s in self.identity_strings() {
                        if contains(&bytes, s) {
                            problems.push(format!("{name} store contains `{s}`"));
                        }
                    }
                    if self.encrypted_hubs.contains(name) {
                        for s in &issuers {
                            if contains(&bytes, s) {
                                problems.push(format!("encrypted {name} store contains `{s}`"));
                            }
                        }
                    }
                }
                if problems.is_empty() {
                    Ok(format!("{} hub store(s) clean", self.hubs.len()))
                } else {
                    Err(problems.join("; "))
                }
            }
            Check::HubTranscriptOpaque { hub } => {
                let url = self.urls[hub].to_string();
                let mut relays = 0;
                let mut bad = Vec::new();
                for e in self.fabric.transcript() {
                    if e.from != url && e.to != url {
                        continue;
                    }
                    if e.path.starts_with("/relay/") && e.dir == Direction::Request {
                        relays += 1;
                    }
                    if has_field(&e.body, &["result", "issued_at"]) {
                        bad.push(format!("#{} {} {}", e.seq, e.path, e.from));
                    }
                }
                if !bad.is_empty() {
                    Err(format!("plaintext attestation fields at {bad:?}"))
                } else if relays == 0 {
                    Err("no relayed payload crossed the hub".into())
                } else {
                    Ok(format!("{relays} relayed payload(s), all ciphertext"))
                }
            }
            Check::TempsReplayRejected => {
                let (attempts, rejected, failures) = self.replay_disclosed();
                if attempts == 0 {
                    Err("no disclosed temps to replay".into())
                } else if failures.is_empty() {
                    Ok(format!("{rejected}/{attempts} replays rejected with UnknownTemp"))
                } else {
                    Err(failures.join("; "))
                }
            }
            Check::SnapshotInvalid { label } => {
                let snap = self.snapshots.get(label).cloned().ok_or_else(|| format!("no snapshot `{label}`"))?;
                let mut failures = Vec::new();
                for (hub, temp) in &snap.temps {
                    match self.replay_at_hub(hub, temp) {
                        Err(e) if e.code == ErrorCode::UnknownTemp => {}
                        other => failures.push(format!("temp {temp}: {other:?}")),
                    }
                }
                self.settle();
                let live: BTreeSet<D2Id> = self.snapshot().d2ids.into_iter().collect();
                for d in &snap.d2ids {
                    let at_provider = self.providers.values().any(|p| p.store_snapshot().find_by_d2id(d).is_some());
                    if live.contains(d) || at_provider {
                        failures.push(format!("d2id {d} still resolves"));
                    }
                }
                if failures.is_empty() {
                    Ok(format!("{} temps and {} d2ids dead", snap.temps.len(), snap.d2ids.len()))
                } else {
                    Err(failures.join("; "))
                }
            }
            Check::LookupReturnsHub { requester, provider, user, hub } => {
                let id = self.user(user);
                let from = self.urls[requester].clone();
                let resp = self
                    .client(&from)
                    .lookup(&self.urls[provider], &LookupRequest { identifier: id, requester: from.clone() })
                    .map_err(|e| e.to_string())?;
                if resp.hub.url() == &self.urls[hub] {
                    Ok(format!("lookup names {}", resp.hub))
                } else {
                    Err(format!("lookup names {}", resp.hub))
                }
            }
            Check::VaultHubs { agent, hub } => {
                let want = self.hub_address(hub);
                let v = self.agents[agent].vault().map_err(|e| e.to_string())?;
                let wrong: Vec<_> = v.rows.iter().filter(|r| r.d2id.hub != want).map(|r| r.d2id.to_string()).collect();
                if v.rows.is_empty() {
                    Err("vault is empty".into())
                } else if wrong.is_empty() {
                    Ok(format!("{} rows at {want}", v.rows.len()))
                } else {
                    Err(format!("rows elsewhere: {wrong:?}"))
                }
            }
            Check::AgentQuarantined { agent, count } => {
                let n = self.agents[agent].vault().map_err(|e| e.to_string())?.quarantined.len();
                if n == *count {
                    Ok(format!("{n} quarantined"))
                } else {
                    Err(format!("{n} quarantined, expected {count}"))
                }
            }
            Check::HubAccounts { hub, count } => {
                let n = self.hubs[hub].store_snapshot().accounts.len();
                if n == *count {
                    Ok(format!("{n} account(s)"))
                } else {
                    Err(format!("{n} account(s), expected {count}"))
                }
            }
            Check::StoreAudit => {
                let mut problems = Vec::new();
                for (n, h) in &self.hubs {
                    if let Err(p) = h.audit() {
                        problems.extend(p.into_iter().map(|x| format!("{n}: {x}")));
                    }
                }
                for (n, p) in &self.providers {
                    if let Err(p) = p.store_snapshot().audit() {
                        problems.extend(p.into_iter().map(|x| format!("{n}: {x}")));
                    }
                }
                if problems.is_empty() {
                    Ok("stores consistent".into())
                } else {
                    Err(problems.join("; "))
                }
            }
        }
    }

    /// Stolen-store view of a hub, if its store is readable without a key.
    pub fn stolen_store(&self, hub: &str) -> Option<HubStore> {
        HubStore::from_bytes(&self.hubs[hub].serialized_store(), None).ok()
    }

    pub fn shutdown(&self) {
        self.fabric.shutdown();
    }
}

fn resolve(seed: u64, names: &mut BTreeMap<String, String>, symbol: &str) -> String {
    match symbol.strip_prefix('@') {
        Some(s) => names.entry(s.to_string()).or_insert_with(|| username(seed, s)).clone(),
        None => symbol.to_string(),
    }
}

fn describe(step: &Step) -> String {
    let v = serde_json::to_value(step).expect("steps serialize");
    match (v["action"].as_str(), v["check"].as_str()) {
        (Some("assert"), Some(c)) => format!("assert {c}"),
        (Some(a), _) => a.to_string(),
        _ => "step".into(),
    }
}

pub struct RunResult {
    pub report: Report,
    pub transcript: Vec<TranscriptEntry>,
    pub network: Network,
}

/// Runs a scenario on `fabric`. Callers own writing any output files.
pub fn run(scenario: &Scenario, fabric: Arc<dyn Fabric>, transport: &str) -> Result<RunResult, ScenarioError> {
    let started = Instant::now();
    let mut network = Network::build(scenario, fabric)?;
    let steps = network.run_steps();
    let transcript = network.fabric.transcript();
    let jsonl = render_jsonl(&transcript);
    let passed = steps.iter().all(|s| s.passed) && steps.len() == scenario.steps.len();
    let report = Report {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        transport: transport.to_string(),
        passed,
        steps,
        elapsed_ms: started.elapsed().as_millis(),
        transcript: None,
        transcript_sha256: crate::crypto::sha256_hex(jsonl.as_bytes()),
    };
    Ok(RunResult { report, transcript, network })
}

/// Runs a scenario on a fresh deterministic in-process network.
pub fn run_inproc(scenario: &Scenario) -> Result<RunResult, ScenarioError> {
    run(scenario, SimNetwork::new(), "inproc")
}
