//! The discovery hub.
//!
//! Holds per-user accounts of `{TempD2Id, D2Id, D2Vc}` rows and nothing that
//! names a user. Requesters present a TempD2Id; the hub consumes it exactly
//! once, alerts the owning account and acts on the owner's decision.
//!
//! All store mutations happen under one mutex. Outbound calls (issuer
//! renewals, migration pushes) are made with the lock released; deferred
//! effects (result delivery, rotation events, mediated forwards) are queued on
//! the transport after the lock is dropped.

mod store;

pub use store::{HubAccount, HubStore, PendingRequest, PendingStage, TempEntry, TempState};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration as StdDuration, Instant};

use chrono::Duration;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::Value;
use thiserror::Error;

use crate::api::Client;
use crate::clock::Clock;
use crate::crypto::{Signature, SigningKeyPair, SigningPublicKey};
use crate::error::{ApiError, ErrorCode};
use crate::model::{D2Id, D2Vc, HubAddress, HubRow, NodeUrl};
use crate::transport::{reply, ApiRequest, CallError, Method, Node, Transport};
use crate::trust::TrustRegistry;
use crate::wire::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HubError {
    #[error("unknown account")]
    UnknownAccount,
    #[error("signature verification failed")]
    BadSignature,
    #[error("D2Id already registered")]
    DuplicateD2Id,
    #[error("unknown D2Id")]
    UnknownD2Id,
    #[error("unknown TempD2Id")]
    UnknownTemp,
    #[error("TempD2Id already in use at this hub")]
    TempCollision,
    #[error("unknown request")]
    UnknownRequest,
    #[error("selection outside candidates: {0}")]
    SelectionOutsideCandidates(String),
    #[error("target hub unreachable: {0}")]
    TargetUnreachable(String),
    #[error("malformed request: {0}")]
    Malformed(String),
}

impl HubError {
    pub fn code(&self) -> ErrorCode {
        match self {
            HubError::UnknownAccount => ErrorCode::UnknownAccount,
            HubError::BadSignature => ErrorCode::BadSignature,
            HubError::DuplicateD2Id => ErrorCode::DuplicateD2Id,
            HubError::UnknownD2Id => ErrorCode::UnknownD2Id,
            HubError::UnknownTemp => ErrorCode::UnknownTemp,
            HubError::TempCollision => ErrorCode::TempCollision,
            HubError::UnknownRequest => ErrorCode::UnknownRequest,
            HubError::SelectionOutsideCandidates(_) => ErrorCode::SelectionOutsideCandidates,
            HubError::TargetUnreachable(_) => ErrorCode::TargetUnreachable,
            HubError::Malformed(_) => ErrorCode::MalformedRequest,
        }
    }
}

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub address: HubAddress,
    pub signing_key: SigningKeyPair,
    /// How long a user has to answer an alert.
    pub pending_deadline: Duration,
    /// When set, the persisted store is AES-256-GCM encrypted under this key.
    pub at_rest_key: Option<[u8; 32]>,
    pub store_path: Option<PathBuf>,
    pub seed: u64,
}

impl HubConfig {
    pub fn new(address: HubAddress, signing_key: SigningKeyPair, seed: u64) -> Self {
        Self {
            address,
            signing_key,
            pending_deadline: Duration::minutes(10),
            at_rest_key: None,
            store_path: None,
            seed,
        }
    }
}

/// What a successful `resolve_and_consume` did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscoverOutcome {
    Alerted(RequestId),
    /// Some wanted capability has no candidate; the user was alerted and the
    /// requester gets a plain denial.
    NoCandidates(RequestId),
}

impl DiscoverOutcome {
    pub fn request_id(&self) -> &RequestId {
        match self {
            DiscoverOutcome::Alerted(r) | DiscoverOutcome::NoCandidates(r) => r,
        }
    }
}

/// Test hook standing in for a hub that tampers with relayed payloads.
pub type RelayHook = Box<dyn FnMut(&mut SealedGrant) + Send>;

enum Effect {
    Deliver(NodeUrl, DiscoveryResponse),
    Rotate(NodeUrl, RotationNeeded),
    Forward(NodeUrl, MediatedForward),
}

struct HubState {
    store: HubStore,
    rng: ChaCha20Rng,
    nonce_rng: ChaCha20Rng,
}

pub struct HubNode {
    config: HubConfig,
    registry: Arc<TrustRegistry>,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    state: Mutex<HubState>,
    inbox_signal: Condvar,
    relay_hook: Mutex<Option<RelayHook>>,
}

impl HubNode {
    pub fn new(
        config: HubConfig,
        registry: Arc<TrustRegistry>,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        let store = config
            .store_path
            .as_ref()
            .filter(|p| p.exists())
            .and_then(|p| std::fs::read(p).ok())
            .and_then(|b| HubStore::from_bytes(&b, config.at_rest_key.as_ref()).ok())
            .unwrap_or_default();
        let state = HubState {
            store,
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            nonce_rng: ChaCha20Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_a7e5),
        };
        Self {
            config,
            registry,
            clock,
            transport,
            state: Mutex::new(state),
            inbox_signal: Condvar::new(),
            relay_hook: Mutex::new(None),
        }
    }

    pub fn address(&self) -> &HubAddress {
        &self.config.address
    }

    pub fn public_key(&self) -> SigningPublicKey {
        self.config.signing_key.public()
    }

    pub fn set_relay_hook(&self, hook: Option<RelayHook>) {
        *self.relay_hook.lock().unwrap() = hook;
    }

    pub fn store_snapshot(&self) -> HubStore {
        self.state.lock().unwrap().store.clone()
    }

    /// The store exactly as it would be written to disk.
    pub fn serialized_store(&self) -> Vec<u8> {
        let mut st = self.state.lock().unwrap();
        let HubState { store, nonce_rng, .. } = &mut *st;
        store.to_bytes(self.config.at_rest_key.as_ref(), nonce_rng)
    }

    pub fn audit(&self) -> Result<(), Vec<String>> {
        self.state.lock().unwrap().store.audit()
    }

    fn client(&self) -> Client<'_> {
        Client::new(self.transport.as_ref(), self.config.address.url())
    }

    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.state.lock().unwrap()
    }

    fn persist(&self, st: &mut HubState) {
        let Some(path) = &self.config.store_path else { return };
        let HubState { store, nonce_rng, .. } = st;
        let bytes = store.to_bytes(self.config.at_rest_key.as_ref(), nonce_rng);
        let tmp = path.with_extension("tmp");
        if let Err(e) = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path)) {
            log::warn!("persisting hub store to {}: {e}", path.display());
        }
    }

    fn dispatch(&self, effects: Vec<Effect>) {
        let client = self.client();
        for effect in effects {
            match effect {
                Effect::Deliver(to, resp) => client.deliver_result(&to, &resp),
                Effect::Rotate(to, ev) => client.notify_rotation_needed(&to, &ev),
                Effect::Forward(to, fwd) => client.forward_mediated(&to, &fwd),
            }
        }
    }

    fn account_key(st: &HubState, account_id: &AccountId) -> Result<SigningPublicKey, HubError> {
        st.store.accounts.get(account_id).map(|a| a.agent_pubkey).ok_or(HubError::UnknownAccount)
    }

    /// Expires overdue requests; returns the denials to deliver.
    fn sweep(&self, st: &mut HubState) -> Vec<Effect> {
        let now = self.clock.now();
        let mut effects = Vec::new();
        for acct in st.store.accounts.values_mut() {
            let expired: Vec<RequestId> =
                acct.pending.iter().filter(|(_, p)| p.deadline <= now).map(|(id, _)| id.clone()).collect();
            for id in expired {
                if let Some(p) = acct.pending.remove(&id) {
                    effects.push(Effect::Deliver(
                        p.requester,
                        DiscoveryResponse { request_id: id, outcome: Outcome::Denied { reason: DenyReason::Timeout } },
                    ));
                }
            }
            acct.inbox.retain(|a| a.deadline > now);
        }
        effects
    }

    /// Runs deadline expiry now. Harnesses call this after moving the clock.
    pub fn tick(&self) {
        let effects = {
            let mut st = self.lock();
            let e = self.sweep(&mut st);
            if !e.is_empty() {
                self.persist(&mut st);
            }
            e
        };
        self.dispatch(effects);
    }

    pub fn create_account(&self, agent_pubkey: SigningPublicKey) -> AccountId {
        let mut st = self.lock();
        let id = loop {
            let id = AccountId::random(&mut st.rng);
            if !st.store.accounts.contains_key(&id) {
                break id;
            }
        };
        st.store.accounts.insert(id.clone(), HubAccount::new(id.clone(), agent_pubkey));
        self.persist(&mut st);
        id
    }

    pub fn rows(&self, account_id: &AccountId) -> Option<Vec<HubRow>> {
        self.lock().store.accounts.get(account_id).map(|a| a.rows.clone())
    }

    pub fn register_row(&self, account_id: &AccountId, d2id: D2Id, d2vc: D2Vc, auth: &RowAuth) -> Result<(), HubError> {
        let mut st = self.lock();
        let key = Self::account_key(&st, account_id)?;
        match auth {
            RowAuth::Agent { signature } => {
                let op =
                    AgentOp::RegisterRow { account_id: account_id.clone(), d2id: d2id.clone(), d2vc: d2vc.clone() };
                op.verify(&key, signature).map_err(|_| HubError::BadSignature)?;
            }
            RowAuth::Migration { source_hub, source_account_id, authorization } => {
                if self.registry.hub_key(source_hub.url()).is_none() {
                    return Err(HubError::BadSignature);
                }
                let op = AgentOp::AcceptMigration {
                    account_id: account_id.clone(),
                    source_hub: source_hub.clone(),
                    source_account_id: source_account_id.clone(),
                };
                op.verify(&key, authorization).map_err(|_| HubError::BadSignature)?;
            }
        }
        if d2id.hub != self.config.address {
            return Err(HubError::Malformed(format!("{d2id} belongs to another hub")));
        }
        if st.store.d2id_index.contains_key(&d2id) {
            return Err(HubError::DuplicateD2Id);
        }
        st.store.insert_row(account_id, HubRow { temp: None, d2id, d2vc });
        self.persist(&mut st);
        Ok(())
    }

    pub fn delete_row(&self, account_id: &AccountId, d2id: &D2Id, signature: &Signature) -> Result<(), HubError> {
        let mut st = self.lock();
        let key = Self::account_key(&st, account_id)?;
        let op = AgentOp::DeleteRow { account_id: account_id.clone(), d2id: d2id.clone() };
        op.verify(&key, signature).map_err(|_| HubError::BadSignature)?;
        if st.store.d2id_index.get(d2id) != Some(account_id) {
            return Err(HubError::UnknownD2Id);
        }
        st.store.remove_row(d2id);
        self.persist(&mut st);
        Ok(())
    }

    pub fn install_temp(&self, notice: &RotationNotice) -> Result<(), HubError> {
        let mut st = self.lock();
        self.install_temp_locked(&mut st, notice)?;
        self.persist(&mut st);
        Ok(())
    }

    fn install_temp_locked(&self, st: &mut HubState, notice: &RotationNotice) -> Result<(), HubError> {
        let account_id = st.store.d2id_index.get(&notice.d2id).cloned().ok_or(HubError::UnknownD2Id)?;
        let issuer = st.store.accounts[&account_id]
            .row(&notice.d2id)
            .map(|r| r.d2vc.issuer().clone())
            .ok_or(HubError::UnknownD2Id)?;
        let issuer_key = self.registry.issuer_key(&issuer).ok_or(HubError::BadSignature)?;
        notice.verify(issuer_key).map_err(|_| HubError::BadSignature)?;
        if let Some(existing) = st.store.temp_index.get(&notice.new_temp) {
            // A duplicated delivery of the same notice is harmless.
            if existing.d2id == notice.d2id && existing.state == TempState::Active {
                return Ok(());
            }
            return Err(HubError::TempCollision);
        }
        st.store.forget_temps(&notice.d2id);
        let acct = st.store.accounts.get_mut(&account_id).expect("indexed account exists");
        acct.quarantined.remove(&notice.d2id);
        acct.row_mut(&notice.d2id).expect("indexed row exists").temp = Some(notice.new_temp.clone());
        st.store.temp_index.insert(
            notice.new_temp.clone(),
            TempEntry { account_id, d2id: notice.d2id.clone(), state: TempState::Active, disclosed: false },
        );
        Ok(())
    }

    /// Consumes the presented TempD2Id (exactly once across racing callers)
    /// and alerts the owning account.
    pub fn resolve_and_consume(&self, req: &DiscoveryRequest) -> Result<DiscoverOutcome, HubError> {
        req.validate().map_err(|e| HubError::Malformed(e.message))?;
        let (outcome, mut effects) = {
            let mut st = self.lock();
            let mut effects = self.sweep(&mut st);
            if st.store.find_pending(&req.request_id).is_some() {
                return Err(HubError::Malformed("request_id already pending".into()));
            }
            let entry = match st.store.temp_index.get_mut(&req.temp) {
                Some(e) if e.state == TempState::Active => e,
                _ => {
                    drop(st);
                    self.dispatch(effects);
                    return Err(HubError::UnknownTemp);
                }
            };
            entry.state = TempState::Consumed;
            let account_id = entry.account_id.clone();
            let d2id = entry.d2id.clone();
            let deadline = self.clock.now() + self.config.pending_deadline;
            let acct = st.store.accounts.get_mut(&account_id).expect("indexed account exists");
            let row = acct.row_mut(&d2id).expect("indexed row exists");
            row.temp = None;
            let issuer = row.d2vc.issuer().clone();
            effects.push(Effect::Rotate(issuer, RotationNeeded::signed(d2id, &self.config.signing_key)));

            let candidates: BTreeMap<_, _> = req.wanted.iter().map(|c| (c.clone(), acct.candidates_for(c))).collect();
            let pending = PendingRequest {
                requester: req.requester.clone(),
                wanted: req.wanted.clone(),
                mode: req.mode,
                requester_pubkey: req.requester_pubkey,
                queries: req.queries.clone(),
                candidates,
                deadline,
                stage: PendingStage::AwaitingUser,
            };
            let alert = pending.alert(&req.request_id);
            let outcome = if alert.actionable() {
                acct.pending.insert(req.request_id.clone(), pending);
                DiscoverOutcome::Alerted(req.request_id.clone())
            } else {
                effects.push(Effect::Deliver(
                    req.requester.clone(),
                    DiscoveryResponse {
                        request_id: req.request_id.clone(),
                        outcome: Outcome::Denied { reason: DenyReason::Declined },
                    },
                ));
                DiscoverOutcome::NoCandidates(req.request_id.clone())
            };
            acct.inbox.push_back(alert);
            self.persist(&mut st);
            (outcome, effects)
        };
        self.inbox_signal.notify_all();
        self.dispatch(std::mem::take(&mut effects));
        Ok(outcome)
    }

    pub fn inbox(&self, account_id: &AccountId, wait: StdDuration) -> Result<Vec<UserAlert>, HubError> {
        let start = Instant::now();
        let mut st = self.lock();
        loop {
            let effects = self.sweep(&mut st);
            if !effects.is_empty() {
                drop(st);
                self.dispatch(effects);
                st = self.lock();
                continue;
            }
            let acct = st.store.accounts.get(account_id).ok_or(HubError::UnknownAccount)?;
            let remaining = wait.saturating_sub(start.elapsed());
            if !acct.inbox.is_empty() || remaining.is_zero() {
                return Ok(acct.inbox.iter().cloned().collect());
            }
            // Wake at least once a second so deadlines are swept.
            let slice = remaining.min(StdDuration::from_secs(1));
            st = self.inbox_signal.wait_timeout(st, slice).unwrap().0;
        }
    }

    pub fn submit_decision(
        &self,
        account_id: &AccountId,
        decision: &UserDecision,
        signature: &Signature,
    ) -> Result<(), HubError> {
        let effects = {
            let mut st = self.lock();
            let mut effects = self.sweep(&mut st);
            let key = Self::account_key(&st, account_id)?;
            let op = AgentOp::Decision { account_id: account_id.clone(), decision: decision.clone() };
            op.verify(&key, signature).map_err(|_| HubError::BadSignature)?;
            let acct = st.store.accounts.get_mut(account_id).expect("account checked");
            let Some(pending) = acct.pending.get(&decision.request_id) else {
                drop(st);
                self.dispatch(effects);
                return Err(HubError::UnknownRequest);
            };
            if pending.stage != PendingStage::AwaitingUser {
                return Err(HubError::UnknownRequest);
            }
            decision.check_against(&pending.alert(&decision.request_id)).map_err(|p| match p {
                DecisionProblem::OutsideCandidates(cap, issuer) => {
                    HubError::SelectionOutsideCandidates(format!("{issuer} for {cap}"))
                }
                DecisionProblem::SelectionKeys => {
                    HubError::SelectionOutsideCandidates("selection must cover every wanted capability".into())
                }
                DecisionProblem::WrongRequest => HubError::UnknownRequest,
            })?;
            let rid = decision.request_id.clone();
            let requester = pending.requester.clone();
            let mode = pending.mode;

            match &decision.verdict {
                Verdict::Reject => {
                    acct.pending.remove(&rid);
                    effects.push(Effect::Deliver(
                        requester,
                        DiscoveryResponse {
                            request_id: rid.clone(),
                            outcome: Outcome::Denied { reason: DenyReason::Declined },
                        },
                    ));
                }
                Verdict::Approve { selection } => {
                    let mut chosen = BTreeMap::new();
                    for (cap, issuer) in selection {
                        let row = acct.grant_row(cap, issuer).ok_or_else(|| {
                            HubError::SelectionOutsideCandidates(format!("{issuer} has no live pseudonym"))
                        })?;
                        chosen.insert(cap.clone(), (issuer.clone(), row.temp.clone().expect("grant rows have temps")));
                    }
                    for (_, temp) in chosen.values() {
                        if let Some(e) = st.store.temp_index.get_mut(temp) {
                            e.disclosed = true;
                        }
                    }
                    let acct = st.store.accounts.get_mut(account_id).expect("account checked");
                    match mode {
                        DiscoveryMode::Direct => {
                            acct.pending.remove(&rid);
                            let grants =
                                chosen.into_iter().map(|(cap, (issuer, temp))| (cap, Grant { issuer, temp })).collect();
                            effects.push(Effect::Deliver(
                                requester,
                                DiscoveryResponse { request_id: rid.clone(), outcome: Outcome::Granted { grants } },
                            ));
                        }
                        DiscoveryMode::Mediated => {
                            let pending = acct.pending.get_mut(&rid).expect("pending checked");
                            let pubkey = pending.requester_pubkey.expect("validated on intake");
                            for (cap, (issuer, temp)) in &chosen {
                                let q = &pending.queries[cap];
                                effects.push(Effect::Forward(
                                    issuer.clone(),
                                    MediatedForward {
                                        request_id: rid.clone(),
                                        relay: self.config.address.clone(),
                                        capability: cap.clone(),
                                        query: PredicateQuery {
                                            temp: temp.clone(),
                                            predicate: q.predicate.clone(),
                                            requester: requester.clone(),
                                            nonce: q.nonce,
                                        },
                                        requester_pubkey: pubkey,
                                    },
                                ));
                            }
                            pending.stage =
                                PendingStage::Collecting { selection: selection.clone(), collected: BTreeMap::new() };
                        }
                    }
                }
            }
            let acct = st.store.accounts.get_mut(account_id).expect("account checked");
            acct.inbox.retain(|a| a.request_id != rid);
            self.persist(&mut st);
            effects
        };
        self.dispatch(effects);
        Ok(())
    }

    /// Collects one sealed issuer answer and forwards the bundle once every
    /// selected capability has answered. Payloads are never opened here.
    pub fn relay_mediated(&self, request_id: &RequestId, payload: RelayPayload) -> Result<(), HubError> {
        let mut grant = SealedGrant { issuer: payload.issuer, sealed: payload.sealed };
        if let Some(hook) = self.relay_hook.lock().unwrap().as_mut() {
            hook(&mut grant);
        }
        let effects = {
            let mut st = self.lock();
            let mut effects = self.sweep(&mut st);
            let account_id = st.store.find_pending(request_id).cloned().ok_or(HubError::UnknownRequest)?;
            let acct = st.store.accounts.get_mut(&account_id).expect("found above");
            let pending = acct.pending.get_mut(request_id).expect("found above");
            let requester = pending.requester.clone();
            let PendingStage::Collecting { selection, collected } = &mut pending.stage else {
                return Err(HubError::UnknownRequest);
            };
            if selection.get(&payload.capability) != Some(&grant.issuer) {
                return Err(HubError::Malformed(format!(
                    "{} was not selected for {}",
                    grant.issuer, payload.capability
                )));
            }
            collected.insert(payload.capability, grant);
            if collected.len() == selection.len() {
                let attestations = std::mem::take(collected);
                acct.pending.remove(request_id);
                effects.push(Effect::Deliver(
                    requester,
                    DiscoveryResponse {
                        request_id: request_id.clone(),
                        outcome: Outcome::MediatedResult { attestations },
                    },
                ));
            }
            self.persist(&mut st);
            effects
        };
        self.dispatch(effects);
        Ok(())
    }

    pub fn renew_all(&self, account_id: &AccountId, signature: &Signature) -> Result<RenewalReport, HubError> {
        {
            let st = self.lock();
            let key = Self::account_key(&st, account_id)?;
            AgentOp::Renew { account_id: account_id.clone() }
                .verify(&key, signature)
                .map_err(|_| HubError::BadSignature)?;
        }
        let rows = self.account_rows(account_id)?;
        let mut report = RenewalReport::default();
        for (d2id, d2vc) in rows {
            match self.demand_renewal(&d2id, &d2vc, &self.config.address) {
                Ok(grant) => {
                    let mut st = self.lock();
                    st.store.remove_row(&d2id);
                    st.store.insert_row(
                        account_id,
                        HubRow { temp: None, d2id: grant.new_d2id.clone(), d2vc: grant.d2vc.clone() },
                    );
                    if self.install_temp_locked(&mut st, &grant.rotation).is_err() {
                        // Leave the new row without a temp; the issuer re-mints on demand.
                        let ev = RotationNeeded::signed(grant.new_d2id.clone(), &self.config.signing_key);
                        drop(st);
                        self.dispatch(vec![Effect::Rotate(grant.d2vc.issuer().clone(), ev)]);
                        st = self.lock();
                    }
                    self.persist(&mut st);
                    report.renewed.push(RenewedRow { old_d2id: d2id, new_d2id: grant.new_d2id, d2vc: grant.d2vc });
                }
                Err(code) => {
                    let mut st = self.lock();
                    st.store.quarantine(&d2id);
                    self.persist(&mut st);
                    report.failed.push(RowFailure { d2id, issuer: d2vc.issuer().clone(), code });
                }
            }
        }
        Ok(report)
    }

    fn account_rows(&self, account_id: &AccountId) -> Result<Vec<(D2Id, D2Vc)>, HubError> {
        let st = self.lock();
        let acct = st.store.accounts.get(account_id).ok_or(HubError::UnknownAccount)?;
        Ok(acct.rows.iter().map(|r| (r.d2id.clone(), r.d2vc.clone())).collect())
    }

    fn demand_renewal(&self, d2id: &D2Id, d2vc: &D2Vc, target: &HubAddress) -> Result<RenewalGrant, ErrorCode> {
        let demand =
            RenewalDemand::signed(d2id.clone(), target.clone(), self.config.address.clone(), &self.config.signing_key);
        let grant = self
            .client()
            .renew_identity(d2vc.issuer(), &demand)
            .map_err(|e| call_code(&e, ErrorCode::IssuerUnreachable))?;
        let issuer_key = self.registry.issuer_key(d2vc.issuer()).ok_or(ErrorCode::BadSignature)?;
        let consistent = &grant.old_d2id == d2id
            && &grant.new_d2id.hub == target
            && grant.rotation.d2id == grant.new_d2id
            && grant.d2vc.issuer() == d2vc.issuer();
        if !consistent {
            return Err(ErrorCode::MalformedRequest);
        }
        grant.rotation.verify(issuer_key).map_err(|_| ErrorCode::BadSignature)?;
        Ok(grant)
    }

    pub fn migrate_account(&self, account_id: &AccountId, req: &MigrateRequest) -> Result<RenewalReport, HubError> {
        {
            let st = self.lock();
            let key = Self::account_key(&st, account_id)?;
            let op = AgentOp::Migrate {
                account_id: account_id.clone(),
                target_hub: req.target_hub.clone(),
                target_account_id: req.target_account_id.clone(),
            };
            op.verify(&key, &req.signature).map_err(|_| HubError::BadSignature)?;
        }
        if req.target_hub == self.config.address {
            return Err(HubError::Malformed("target hub is this hub".into()));
        }
        let client = self.client();
        client.hub_health(&req.target_hub).map_err(|e| HubError::TargetUnreachable(e.to_string()))?;

        let rows = self.account_rows(account_id)?;
        let mut report = RenewalReport { target_hub: Some(req.target_hub.clone()), ..Default::default() };
        for (d2id, d2vc) in rows {
            let moved = self.demand_renewal(&d2id, &d2vc, &req.target_hub).and_then(|grant| {
                let push = RegisterRowRequest {
                    d2id: grant.new_d2id.clone(),
                    d2vc: grant.d2vc.clone(),
                    auth: RowAuth::Migration {
                        source_hub: self.config.address.clone(),
                        source_account_id: account_id.clone(),
                        authorization: req.target_authorization,
                    },
                };
                client
                    .register_row(&req.target_hub, &req.target_account_id, &push)
                    .and_then(|_| client.install_temp(&req.target_hub, &grant.rotation))
                    .map_err(|e| call_code(&e, ErrorCode::TargetUnreachable))?;
                Ok(grant)
            });
            let mut st = self.lock();
            match moved {
                Ok(grant) => {
                    st.store.remove_row(&d2id);
                    report.renewed.push(RenewedRow { old_d2id: d2id, new_d2id: grant.new_d2id, d2vc: grant.d2vc });
                }
                Err(code) => {
                    st.store.quarantine(&d2id);
                    report.failed.push(RowFailure { d2id, issuer: d2vc.issuer().clone(), code });
                }
            }
            self.persist(&mut st);
        }
        if report.failed.is_empty() {
            let mut st = self.lock();
            st.store.remove_account(account_id);
            self.persist(&mut st);
        }
        Ok(report)
    }

    pub fn delete_account(&self, account_id: &AccountId, signature: &Signature) -> Result<(), HubError> {
        let mut st = self.lock();
        let key = Self::account_key(&st, account_id)?;
        AgentOp::DeleteAccount { account_id: account_id.clone() }
            .verify(&key, signature)
            .map_err(|_| HubError::BadSignature)?;
        st.store.remove_account(account_id);
        self.persist(&mut st);
        Ok(())
    }

    fn route(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        let segs = req.segments();
        let account = |s: &str| AccountId(s.to_string());
        match (req.method, segs.as_slice()) {
            (Method::Post, ["accounts"]) => {
                let body: CreateAccountRequest = req.body_as()?;
                reply(CreateAccountResponse { account_id: self.create_account(body.agent_pubkey) })
            }
            (Method::Post, ["accounts", id, "rows"]) => {
                let body: RegisterRowRequest = req.body_as()?;
                self.register_row(&account(id), body.d2id, body.d2vc, &body.auth)?;
                reply(Ack::OK)
            }
            (Method::Delete, ["accounts", id, "rows"]) => {
                let body: DeleteRowRequest = req.body_as()?;
                self.delete_row(&account(id), &body.d2id, &body.signature)?;
                reply(Ack::OK)
            }
            (Method::Put, ["rows", "temp"]) => {
                self.install_temp(&req.body_as()?)?;
                reply(Ack::OK)
            }
            (Method::Post, ["discover"]) => {
                let body: DiscoveryRequest = req.body_as()?;
                // NoCandidates is indistinguishable from an alert to the requester.
                let outcome = self.resolve_and_consume(&body)?;
                reply(DiscoveryAccepted { request_id: outcome.request_id().clone() })
            }
            (Method::Get, ["accounts", id, "inbox"]) => {
                let wait = req.query.get("wait").and_then(|w| w.parse::<u64>().ok()).unwrap_or(0).min(60);
                let alerts = self.inbox(&account(id), StdDuration::from_secs(wait))?;
                reply(InboxResponse { alerts })
            }
            (Method::Post, ["accounts", id, "decisions"]) => {
                let body: DecisionRequest = req.body_as()?;
                self.submit_decision(&account(id), &body.decision, &body.signature)?;
                reply(Ack::OK)
            }
            (Method::Post, ["relay", rid]) => {
                self.relay_mediated(&RequestId(rid.to_string()), req.body_as()?)?;
                reply(Ack::OK)
            }
            (Method::Post, ["accounts", id, "renew"]) => {
                let body: SignedRequest = req.body_as()?;
                reply(self.renew_all(&account(id), &body.signature)?)
            }
            (Method::Post, ["accounts", id, "migrate"]) => {
                let body: MigrateRequest = req.body_as()?;
                reply(self.migrate_account(&account(id), &body)?)
            }
            (Method::Delete, ["accounts", id]) => {
                let body: SignedRequest = req.body_as()?;
                self.delete_account(&account(id), &body.signature)?;
                reply(Ack::OK)
            }
            (Method::Get, ["health"]) => reply(Ack::OK),
            _ => Err(ApiError::not_found(&req.path)),
        }
    }
}

fn call_code(e: &CallError, unreachable: ErrorCode) -> ErrorCode {
    e.code().unwrap_or(unreachable)
}

impl Node for HubNode {
    fn base_url(&self) -> &NodeUrl {
        self.config.address.url()
    }

    fn handle(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        self.route(req)
    }
}
