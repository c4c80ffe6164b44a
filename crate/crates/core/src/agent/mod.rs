//! The user's agent: local vault, registration and renewal flows, and
//! answers to hub alerts.

mod policy;
mod service;
mod vault;

pub use policy::{evaluate as evaluate_policy, Action, Policy, PolicyAction, POLICY_VERSION};
pub use service::{AgentCommand, AgentService, EventLog};
pub use vault::{AccountRef, SealedVault, Vault, VaultKey};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::api::Client;
use crate::clock::Clock;
use crate::crypto::{CryptoError, KdfParams, SigningKeyPair};
use crate::error::{ApiError, ErrorCode};
use crate::model::{AgentRow, D2Id, HubAddress, NodeUrl};
use crate::transport::{CallError, Transport};
use crate::wire::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentEvent {
    Alert { hub: HubAddress, alert: UserAlert },
    Decided { request_id: RequestId, verdict: Verdict, automatic: bool },
    Expired { request_id: RequestId },
    Registered { row: AgentRow },
    Renewed { report: RenewalReport },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingAlert {
    pub hub: HubAddress,
    pub alert: UserAlert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityView {
    #[serde(flatten)]
    pub row: AgentRow,
    pub quarantined: bool,
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    /// Name the agent uses as the `from` of its calls.
    pub url: NodeUrl,
    pub vault_path: Option<PathBuf>,
    pub kdf: KdfParams,
    pub seed: u64,
}

pub struct UserAgent {
    config: AgentConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    rng: ChaCha20Rng,
    unlocked: Option<(Vault, VaultKey)>,
    pending: BTreeMap<RequestId, PendingAlert>,
    seen: std::collections::BTreeSet<RequestId>,
    events: Vec<AgentEvent>,
}

fn call_err(e: CallError, unreachable: ErrorCode) -> ApiError {
    match e {
        CallError::Remote(api) => api,
        other => ApiError::new(unreachable, other.to_string()),
    }
}

fn bad_pin(e: CryptoError) -> ApiError {
    match e {
        CryptoError::DecryptError => ApiError::new(ErrorCode::BadPin, "wrong PIN or corrupted vault"),
        other => other.into(),
    }
}

impl UserAgent {
    /// A fresh agent with an empty vault protected by `pin`.
    pub fn create(
        config: AgentConfig,
        pin: &str,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ApiError> {
        let mut agent = Self::locked(config, transport, clock);
        let key = VaultKey::derive(pin, agent.config.kdf, &mut agent.rng)?;
        agent.unlocked = Some((Vault::default(), key));
        agent.persist()?;
        Ok(agent)
    }

    /// An agent whose vault file must be unlocked before use.
    pub fn locked(config: AgentConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(config.seed);
        Self {
            config,
            transport,
            clock,
            rng,
            unlocked: None,
            pending: BTreeMap::new(),
            seen: Default::default(),
            events: Vec::new(),
        }
    }

    pub fn url(&self) -> &NodeUrl {
        &self.config.url
    }

    pub fn is_unlocked(&self) -> bool {
        self.unlocked.is_some()
    }

    pub fn unlock(&mut self, pin: &str) -> Result<(), ApiError> {
        let path = self
            .config
            .vault_path
            .as_ref()
            .ok_or_else(|| ApiError::new(ErrorCode::Locked, "no vault file configured"))?;
        let bytes = std::fs::read(path).map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
        let sealed = SealedVault::from_bytes(&bytes).map_err(bad_pin)?;
        let key = VaultKey::for_sealed(pin, &sealed)?;
        let vault = key.open(&sealed).map_err(bad_pin)?;
        self.unlocked = Some((vault, key));
        Ok(())
    }

    pub fn lock(&mut self) {
        self.unlocked = None;
    }

    pub fn vault(&self) -> Result<&Vault, ApiError> {
        self.unlocked.as_ref().map(|(v, _)| v).ok_or_else(|| ApiError::new(ErrorCode::Locked, "vault is locked"))
    }

    fn vault_mut(&mut self) -> Result<&mut Vault, ApiError> {
        self.unlocked.as_mut().map(|(v, _)| v).ok_or_else(|| ApiError::new(ErrorCode::Locked, "vault is locked"))
    }

    /// The vault exactly as written to disk.
    pub fn sealed_vault(&mut self) -> Result<SealedVault, ApiError> {
        let (vault, key) = self.unlocked.as_ref().ok_or_else(|| ApiError::new(ErrorCode::Locked, "vault is locked"))?;
        Ok(key.seal(vault, &mut self.rng))
    }

    fn persist(&mut self) -> Result<(), ApiError> {
        let Some(path) = self.config.vault_path.clone() else { return Ok(()) };
        let sealed = self.sealed_vault()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, sealed.to_bytes())
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| ApiError::new(ErrorCode::Internal, format!("writing vault: {e}")))
    }

    fn client(&self) -> Client<'_> {
        Client::new(self.transport.as_ref(), &self.config.url)
    }

    pub fn events(&self) -> &[AgentEvent] {
        &self.events
    }

    pub fn set_policies(&mut self, policies: Vec<Policy>) -> Result<(), ApiError> {
        self.vault_mut()?.policies = policies;
        self.persist()
    }

    pub fn identities(&self) -> Result<Vec<IdentityView>, ApiError> {
        let v = self.vault()?;
        Ok(v.rows
            .iter()
            .map(|r| IdentityView { row: r.clone(), quarantined: v.quarantined.contains(&r.d2id) })
            .collect())
    }

    pub fn pending(&self) -> Vec<PendingAlert> {
        self.pending.values().cloned().collect()
    }

    /// Account at `hub`, created on first use.
    pub fn ensure_account(&mut self, hub: &HubAddress) -> Result<AccountRef, ApiError> {
        if let Some(a) = self.vault()?.accounts.get(hub) {
            return Ok(a.clone());
        }
        let key = SigningKeyPair::generate(&mut self.rng);
        let resp = self
            .client()
            .create_account(hub, &CreateAccountRequest { agent_pubkey: key.public() })
            .map_err(|e| call_err(e, ErrorCode::HubUnreachable))?;
        let account = AccountRef { account_id: resp.account_id, key };
        self.vault_mut()?.accounts.insert(hub.clone(), account.clone());
        self.persist()?;
        Ok(account)
    }

    /// Login, issuance, hub registration and provider completion. On a
    /// provider-side failure the hub row is deleted again.
    pub fn register_identity(
        &mut self,
        provider: &NodeUrl,
        identifier: &str,
        password: &str,
        hub: &HubAddress,
    ) -> Result<AgentRow, ApiError> {
        self.vault()?;
        let client_err = |e| call_err(e, ErrorCode::ProviderRejected);
        let session = self
            .client()
            .login(provider, &LoginRequest { identifier: identifier.into(), password: password.into() })
            .map_err(client_err)?
            .session;
        let account = self.ensure_account(hub)?;
        let issued = self
            .client()
            .issue(provider, &IssueRequest { session, agent_pubkey: account.key.public(), capabilities: None })
            .map_err(client_err)?;
        let d2id = D2Id::new(hub.clone(), issued.did);
        let d2vc = issued.d2vc;

        let op =
            AgentOp::RegisterRow { account_id: account.account_id.clone(), d2id: d2id.clone(), d2vc: d2vc.clone() };
        let register = RegisterRowRequest {
            d2id: d2id.clone(),
            d2vc: d2vc.clone(),
            auth: RowAuth::Agent { signature: op.sign(&account.key) },
        };
        self.client()
            .register_row(hub, &account.account_id, &register)
            .map_err(|e| ApiError::new(ErrorCode::HubRejected, e.to_string()))?;

        let op =
            AgentOp::CompleteRegistration { identifier: identifier.into(), d2id: d2id.clone(), d2vc: d2vc.clone() };
        let complete = CompleteRequest {
            identifier: identifier.into(),
            d2id: d2id.clone(),
            d2vc: d2vc.clone(),
            signature: op.sign(&account.key),
        };
        if let Err(e) = self.client().complete(provider, &complete) {
            let del = AgentOp::DeleteRow { account_id: account.account_id.clone(), d2id: d2id.clone() };
            let rollback = DeleteRowRequest { d2id: d2id.clone(), signature: del.sign(&account.key) };
            if let Err(re) = self.client().delete_row(hub, &account.account_id, &rollback) {
                log::warn!("rollback of hub row failed: {re}");
            }
            let cause = call_err(e, ErrorCode::ProviderRejected);
            return Err(ApiError::new(ErrorCode::ProviderRejected, cause.to_string()));
        }

        let row = AgentRow { identifier: identifier.into(), d2id, d2vc };
        self.vault_mut()?.rows.push(row.clone());
        self.persist()?;
        self.events.push(AgentEvent::Registered { row: row.clone() });
        Ok(row)
    }

    /// Fetches every account inbox once (waiting up to `wait_secs` on each)
    /// and handles new alerts.
    pub fn poll(&mut self, wait_secs: u64) -> Result<Vec<AgentEvent>, ApiError> {
        let accounts: Vec<_> = self.vault()?.accounts.iter().map(|(h, a)| (h.clone(), a.account_id.clone())).collect();
        let mut batches = Vec::new();
        for (hub, account_id) in accounts {
            match self.client().inbox(&hub, &account_id, wait_secs) {
                Ok(r) => batches.push((hub, r.alerts)),
                Err(e) => log::warn!("polling {hub}: {e}"),
            }
        }
        let mut out = Vec::new();
        for (hub, alerts) in batches {
            out.extend(self.handle_alerts(&hub, alerts)?);
        }
        Ok(out)
    }

    /// Applies policies to newly seen alerts from `hub`; returns emitted events.
    pub fn handle_alerts(&mut self, hub: &HubAddress, alerts: Vec<UserAlert>) -> Result<Vec<AgentEvent>, ApiError> {
        let now = self.clock.now();
        let mut out = Vec::new();
        let expired: Vec<_> =
            self.pending.iter().filter(|(_, p)| p.alert.deadline <= now).map(|(k, _)| k.clone()).collect();
        for id in expired {
            self.pending.remove(&id);
            out.push(AgentEvent::Expired { request_id: id });
        }
        for alert in alerts {
            if !self.seen.insert(alert.request_id.clone()) || alert.deadline <= now {
                continue;
            }
            out.push(AgentEvent::Alert { hub: hub.clone(), alert: alert.clone() });
            if !alert.actionable() {
                continue;
            }
            let action = policy::evaluate(&self.vault()?.policies, &alert);
            let verdict = match action {
                Action::Ask => {
                    self.pending.insert(alert.request_id.clone(), PendingAlert { hub: hub.clone(), alert });
                    continue;
                }
                Action::Reject => Verdict::Reject,
                Action::Approve(selection) => Verdict::Approve { selection },
            };
            let decision = UserDecision { request_id: alert.request_id.clone(), verdict };
            match self.send_decision(hub, &decision) {
                Ok(()) => out.push(AgentEvent::Decided {
                    request_id: decision.request_id,
                    verdict: decision.verdict,
                    automatic: true,
                }),
                Err(e) => log::warn!("automatic decision failed: {e}"),
            }
        }
        self.events.extend(out.iter().cloned());
        Ok(out)
    }

    fn send_decision(&mut self, hub: &HubAddress, decision: &UserDecision) -> Result<(), ApiError> {
        let account = self
            .vault()?
            .accounts
            .get(hub)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownAccount, format!("no account at {hub}")))?;
        let op = AgentOp::Decision { account_id: account.account_id.clone(), decision: decision.clone() };
        let req = DecisionRequest { decision: decision.clone(), signature: op.sign(&account.key) };
        self.client()
            .submit_decision(hub, &account.account_id, &req)
            .map_err(|e| call_err(e, ErrorCode::HubUnreachable))?;
        Ok(())
    }

    /// The user's answer to a surfaced alert.
    pub fn decide(&mut self, request_id: &RequestId, verdict: Verdict) -> Result<(), ApiError> {
        self.vault()?;
        let pending = self
            .pending
            .get(request_id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::StaleAlert, "no such pending request"))?;
        if pending.alert.deadline <= self.clock.now() {
            self.pending.remove(request_id);
            return Err(ApiError::new(ErrorCode::DecisionTimeout, "deadline passed; the hub has denied it"));
        }
        let decision = UserDecision { request_id: request_id.clone(), verdict };
        decision
            .check_against(&pending.alert)
            .map_err(|p| ApiError::new(ErrorCode::SelectionOutsideCandidates, format!("invalid selection: {p:?}")))?;
        match self.send_decision(&pending.hub, &decision) {
            Err(e) if e.code == ErrorCode::UnknownRequest => {
                self.pending.remove(request_id);
                Err(ApiError::new(ErrorCode::StaleAlert, "the hub no longer knows this request"))
            }
            Err(e) => Err(e),
            Ok(()) => {
                self.pending.remove(request_id);
                self.events.push(AgentEvent::Decided {
                    request_id: request_id.clone(),
                    verdict: decision.verdict,
                    automatic: false,
                });
                Ok(())
            }
        }
    }

    fn apply_report(&mut self, report: &RenewalReport) -> Result<(), ApiError> {
        let v = self.vault_mut()?;
        for r in &report.renewed {
            v.quarantined.remove(&r.old_d2id);
            if let Some(row) = v.row_mut(&r.old_d2id) {
                row.d2id = r.new_d2id.clone();
                row.d2vc = r.d2vc.clone();
            }
        }
        for f in &report.failed {
            v.quarantined.insert(f.d2id.clone());
        }
        self.persist()?;
        self.events.push(AgentEvent::Renewed { report: report.clone() });
        Ok(())
    }

    /// Asks every hub account to renew all of its identities.
    pub fn renew_all(&mut self) -> Result<RenewalReport, ApiError> {
        let accounts: Vec<_> = self.vault()?.accounts.iter().map(|(h, a)| (h.clone(), a.clone())).collect();
        let mut total = RenewalReport::default();
        for (hub, account) in accounts {
            let op = AgentOp::Renew { account_id: account.account_id.clone() };
            let report = self
                .client()
                .renew_all(&hub, &account.account_id, &SignedRequest { signature: op.sign(&account.key) })
                .map_err(|e| call_err(e, ErrorCode::HubUnreachable))?;
            self.apply_report(&report)?;
            total.renewed.extend(report.renewed);
            total.failed.extend(report.failed);
        }
        Ok(total)
    }

    /// Moves every identity held at other hubs to `target`.
    pub fn migrate(&mut self, target: &HubAddress) -> Result<RenewalReport, ApiError> {
        let target_account = self.ensure_account(target).map_err(|e| match e.code {
            ErrorCode::HubUnreachable => ApiError::new(ErrorCode::TargetUnreachable, e.message),
            _ => e,
        })?;
        let sources: Vec<_> =
            self.vault()?.accounts.iter().filter(|(h, _)| *h != target).map(|(h, a)| (h.clone(), a.clone())).collect();
        let mut total = RenewalReport { target_hub: Some(target.clone()), ..Default::default() };
        for (hub, account) in sources {
            let accept = AgentOp::AcceptMigration {
                account_id: target_account.account_id.clone(),
                source_hub: hub.clone(),
                source_account_id: account.account_id.clone(),
            };
            let op = AgentOp::Migrate {
                account_id: account.account_id.clone(),
                target_hub: target.clone(),
                target_account_id: target_account.account_id.clone(),
            };
            let req = MigrateRequest {
                target_hub: target.clone(),
                target_account_id: target_account.account_id.clone(),
                target_authorization: accept.sign(&target_account.key),
                signature: op.sign(&account.key),
            };
            let report = self
                .client()
                .migrate(&hub, &account.account_id, &req)
                .map_err(|e| call_err(e, ErrorCode::HubUnreachable))?;
            self.apply_report(&report)?;
            if report.failed.is_empty() {
                self.vault_mut()?.accounts.remove(&hub);
                self.persist()?;
            }
            total.renewed.extend(report.renewed);
            total.failed.extend(report.failed);
        }
        Ok(total)
    }

    /// The vault re-encrypted under `pin`, which must be the current PIN.
    pub fn export_vault(&mut self, pin: &str) -> Result<SealedVault, ApiError> {
        let current = self.sealed_vault()?;
        VaultKey::for_sealed(pin, &current)?.open(&current).map_err(bad_pin)?;
        let (vault, _) = self.unlocked.as_ref().expect("checked by sealed_vault");
        let vault = vault.clone();
        let key = VaultKey::derive(pin, self.config.kdf, &mut self.rng)?;
        Ok(key.seal(&vault, &mut self.rng))
    }

    /// Replaces the local vault with an exported one. Nothing changes on failure.
    pub fn import_vault(&mut self, sealed: &SealedVault, pin: &str) -> Result<(), ApiError> {
        let key = VaultKey::for_sealed(pin, sealed)?;
        let vault = key.open(sealed).map_err(bad_pin)?;
        self.unlocked = Some((vault, key));
        self.pending.clear();
        self.persist()
    }
}
