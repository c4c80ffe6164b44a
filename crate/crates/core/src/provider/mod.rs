//! Service provider node: identity issuer and identity requester.

mod kyc;
mod store;

pub use kyc::{CapabilityCheck, KycReport, KycStart, KycState};
pub use store::{
    evaluate, load_users, whole_years, AttributeRecord, PendingIssue, ProviderStore, TempStatus, UserEntry, UserSeed,
};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use crate::api::Client;
use crate::clock::Clock;
use crate::crypto::{EncryptionKeyPair, SigningKeyPair};
use crate::error::{ApiError, ErrorCode};
use crate::model::{mint_temp_d2id, D2Id, D2Vc, DidToken, NodeUrl, ProviderRow, TempD2Id};
use crate::transport::{reply, ApiRequest, Method, Node, Transport};
use crate::trust::TrustRegistry;
use crate::wire::*;

const MAX_MINT_ATTEMPTS: u32 = 3;
const SESSION_TTL_MINUTES: i64 = 10;
const BACKOFF_BASE_SECS: i64 = 1;
const BACKOFF_MAX_SECS: i64 = 300;

#[derive(Debug, Clone)]
pub struct ProviderConfig {
    pub url: NodeUrl,
    pub signing_key: SigningKeyPair,
    /// Key requesters' mediated attestations are sealed to.
    pub encryption_key: EncryptionKeyPair,
    /// Issuers this provider accepts attestations from.
    pub trust_list: BTreeSet<NodeUrl>,
    pub disclosure_ttl: Duration,
    pub lookups_per_minute: usize,
    pub seed: u64,
}

impl ProviderConfig {
    pub fn new(url: NodeUrl, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6b65_7973);
        Self {
            url,
            signing_key: SigningKeyPair::generate(&mut rng),
            encryption_key: EncryptionKeyPair::generate(&mut rng),
            trust_list: BTreeSet::new(),
            disclosure_ttl: Duration::minutes(5),
            lookups_per_minute: 10,
            seed,
        }
    }
}

struct ProviderState {
    store: ProviderStore,
    sessions: BTreeMap<SessionToken, (String, DateTime<Utc>)>,
    lookups: BTreeMap<NodeUrl, VecDeque<DateTime<Utc>>>,
    kyc: BTreeMap<RequestId, KycReport>,
    rng: ChaCha20Rng,
}

pub struct ProviderNode {
    config: ProviderConfig,
    registry: Arc<TrustRegistry>,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    state: Mutex<ProviderState>,
    /// Serializes temp installation so hub and local state agree on the
    /// latest temp. Held across the outbound hub call; hubs never call back
    /// into a provider while installing a temp.
    rotation: Mutex<()>,
}

enum InstallError {
    Collision,
    Unreachable,
    Rejected(ApiError),
}

impl ProviderNode {
    pub fn new(
        config: ProviderConfig,
        users: &[UserSeed],
        registry: Arc<TrustRegistry>,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let store = ProviderStore::seed(users, &mut rng);
        Self {
            config,
            registry,
            clock,
            transport,
            state: Mutex::new(ProviderState {
                store,
                sessions: BTreeMap::new(),
                lookups: BTreeMap::new(),
                kyc: BTreeMap::new(),
                rng,
            }),
            rotation: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn url(&self) -> &NodeUrl {
        &self.config.url
    }

    pub fn info(&self) -> IssuerInfo {
        IssuerInfo { issuer: self.config.url.clone(), signing_key: self.config.signing_key.public() }
    }

    pub fn store_snapshot(&self) -> ProviderStore {
        self.lock().store.clone()
    }

    pub fn row(&self, identifier: &str) -> Option<ProviderRow> {
        self.lock().store.users.get(identifier).and_then(|u| u.row.clone())
    }

    fn lock(&self) -> MutexGuard<'_, ProviderState> {
        self.state.lock().unwrap()
    }

    fn client(&self) -> Client<'_> {
        Client::new(self.transport.as_ref(), &self.config.url)
    }

    pub fn login(&self, identifier: &str, password: &str) -> Result<SessionToken, ApiError> {
        let mut st = self.lock();
        match st.store.check_password(identifier, password) {
            None => Err(ApiError::new(ErrorCode::UnknownUser, format!("no account `{identifier}`"))),
            Some(false) => Err(ApiError::new(ErrorCode::AuthFailed, "wrong password")),
            Some(true) => {
                let token = SessionToken::random(&mut st.rng);
                let expires = self.clock.now() + Duration::minutes(SESSION_TTL_MINUTES);
                st.sessions.insert(token.clone(), (identifier.to_string(), expires));
                Ok(token)
            }
        }
    }

    pub fn issue(&self, req: &IssueRequest) -> Result<IssueResponse, ApiError> {
        let mut st = self.lock();
        let now = self.clock.now();
        let identifier = match st.sessions.get(&req.session) {
            Some((id, exp)) if *exp > now => id.clone(),
            _ => return Err(ApiError::new(ErrorCode::AuthFailed, "no valid session")),
        };
        let ProviderState { store, rng, .. } = &mut *st;
        let user = store
            .users
            .get_mut(&identifier)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownUser, "account disappeared"))?;
        let types = match &req.capabilities {
            None => user.capabilities.clone(),
            Some(wanted) => {
                if let Some(c) = wanted.iter().find(|c| !user.capabilities.contains(c)) {
                    return Err(ApiError::new(
                        ErrorCode::CapabilityNotSupported,
                        format!("{c} is not offered for this account"),
                    ));
                }
                wanted.clone()
            }
        };
        let d2vc = D2Vc::new(self.config.url.clone(), types)?;
        let did = DidToken::mint(rng);
        user.pending = Some(PendingIssue { did: did.clone(), d2vc: d2vc.clone(), agent_pubkey: req.agent_pubkey });
        Ok(IssueResponse { did, d2vc })
    }

    fn mint_unique_temp(&self, st: &mut ProviderState) -> TempD2Id {
        loop {
            let t = mint_temp_d2id(&mut st.rng);
            if !st.store.temp_index.contains_key(&t) {
                return t;
            }
        }
    }

    fn install(&self, d2id: &D2Id, temp: &TempD2Id) -> Result<(), InstallError> {
        let notice = RotationNotice::signed(d2id.clone(), temp.clone(), &self.config.signing_key);
        match self.client().install_temp(&d2id.hub, &notice) {
            Ok(_) => Ok(()),
            Err(e) if e.code() == Some(ErrorCode::TempCollision) => Err(InstallError::Collision),
            Err(e) if e.is_unreachable() => Err(InstallError::Unreachable),
            Err(crate::transport::CallError::Remote(api)) => Err(InstallError::Rejected(api)),
            Err(e) => Err(InstallError::Rejected(ApiError::new(ErrorCode::HubRejected, e.to_string()))),
        }
    }

    /// Mints and installs a temp for `d2id`, re-minting on collision.
    fn mint_and_install(&self, d2id: &D2Id) -> Result<TempD2Id, InstallError> {
        for _ in 0..MAX_MINT_ATTEMPTS {
            let temp = self.mint_unique_temp(&mut self.lock());
            match self.install(d2id, &temp) {
                Ok(()) => return Ok(temp),
                Err(InstallError::Collision) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(InstallError::Collision)
    }

    pub fn complete(&self, req: &CompleteRequest) -> Result<(), ApiError> {
        let pending = {
            let st = self.lock();
            let user = st
                .store
                .users
                .get(&req.identifier)
                .ok_or_else(|| ApiError::new(ErrorCode::UnknownUser, "unknown account"))?;
            user.pending.clone().ok_or_else(|| ApiError::new(ErrorCode::MismatchedDid, "nothing issued"))?
        };
        let op = AgentOp::CompleteRegistration {
            identifier: req.identifier.clone(),
            d2id: req.d2id.clone(),
            d2vc: req.d2vc.clone(),
        };
        op.verify(&pending.agent_pubkey, &req.signature)?;
        if req.d2id.did != pending.did || req.d2vc != pending.d2vc {
            return Err(ApiError::new(ErrorCode::MismatchedDid, "D2Id was not minted here for this account"));
        }
        if self.registry.hub_key(req.d2id.hub.url()).is_none() {
            return Err(ApiError::new(ErrorCode::HubRejected, format!("{} is not an accredited hub", req.d2id.hub)));
        }
        let _rot = self.rotation.lock().unwrap();
        let temp = self.mint_and_install(&req.d2id).map_err(|e| match e {
            InstallError::Collision => ApiError::new(ErrorCode::HubRejected, "temp collided on every attempt"),
            InstallError::Unreachable => {
                ApiError::new(ErrorCode::HubUnreachable, format!("{} unreachable", req.d2id.hub))
            }
            InstallError::Rejected(api) => ApiError::new(ErrorCode::HubRejected, api.to_string()),
        })?;
        let mut st = self.lock();
        let ProviderState { store, .. } = &mut *st;
        let user = store.users.get_mut(&req.identifier).expect("checked above");
        if let Some(old) = user.row.take() {
            store.temp_index.remove(&old.temp);
        }
        user.row = Some(ProviderRow {
            identifier: req.identifier.clone(),
            temp: temp.clone(),
            d2id: req.d2id.clone(),
            d2vc: req.d2vc.clone(),
        });
        user.agent_pubkey = Some(pending.agent_pubkey);
        user.pending = None;
        user.temp_status = TempStatus::default();
        store.temp_index.insert(temp, req.identifier.clone());
        Ok(())
    }

    /// Replaces the temp of `identifier` here and at its hub. On failure the
    /// row is left stale and retried with exponential backoff.
    pub fn rotate_temp(&self, identifier: &str) -> Result<(), ApiError> {
        let _rot = self.rotation.lock().unwrap();
        let d2id = {
            let mut st = self.lock();
            let ProviderState { store, .. } = &mut *st;
            let user = store
                .users
                .get_mut(identifier)
                .ok_or_else(|| ApiError::new(ErrorCode::UnknownIdentifier, "unknown identifier"))?;
            let row = user.row.as_ref().ok_or_else(|| ApiError::new(ErrorCode::NotRegistered, "not registered"))?;
            // The old temp stops resolving here before the hub learns the new one.
            store.temp_index.remove(&row.temp);
            user.temp_status.stale = true;
            user.temp_status.disclosed_at = None;
            row.d2id.clone()
        };
        let result = self.mint_and_install(&d2id);
        let now = self.clock.now();
        let mut st = self.lock();
        let ProviderState { store, .. } = &mut *st;
        let Some(user) = store.users.get_mut(identifier) else { return Ok(()) };
        let Some(row) = user.row.as_mut().filter(|r| r.d2id == d2id) else { return Ok(()) };
        match result {
            Ok(temp) => {
                row.temp = temp.clone();
                user.temp_status = TempStatus::default();
                store.temp_index.insert(temp, identifier.to_string());
                Ok(())
            }
            Err(e) => {
                let s = &mut user.temp_status;
                s.failed_attempts += 1;
                let delay = (BACKOFF_BASE_SECS << (s.failed_attempts - 1).min(16)).min(BACKOFF_MAX_SECS);
                s.retry_at = Some(now + Duration::seconds(delay));
                Err(match e {
                    InstallError::Unreachable | InstallError::Collision => {
                        ApiError::new(ErrorCode::HubUnreachable, "temp rotation pending; hub unavailable")
                    }
                    InstallError::Rejected(api) => ApiError::new(ErrorCode::HubRejected, api.to_string()),
                })
            }
        }
    }

    pub fn lookup(&self, req: &LookupRequest) -> Result<LookupResponse, ApiError> {
        let now = self.clock.now();
        let (disclosed, stale_due) = {
            let mut st = self.lock();
            let limit = self.config.lookups_per_minute;
            let window = st.lookups.entry(req.requester.clone()).or_default();
            while window.front().is_some_and(|t| *t <= now - Duration::minutes(1)) {
                window.pop_front();
            }
            if window.len() >= limit {
                return Err(ApiError::new(ErrorCode::RateLimited, "too many lookups; retry later"));
            }
            window.push_back(now);
            let user = st
                .store
                .users
                .get(&req.identifier)
                .ok_or_else(|| ApiError::new(ErrorCode::UnknownIdentifier, "unknown identifier"))?;
            if user.row.is_none() {
                return Err(ApiError::new(ErrorCode::NotRegistered, "account has no registered identity"));
            }
            let s = &user.temp_status;
            (s.disclosed_at.is_some(), s.stale && s.retry_at.is_none_or(|t| t <= now))
        };
        if disclosed || stale_due {
            // Each disclosure gets its own temp; a failed heal leaves the row stale.
            let _ = self.rotate_temp(&req.identifier);
        }
        let mut st = self.lock();
        let user = st.store.users.get_mut(&req.identifier).expect("users are never removed");
        if user.temp_status.stale {
            return Err(ApiError::new(ErrorCode::TempStale, "pseudonym is being refreshed; retry later"));
        }
        let row = user.row.as_ref().expect("checked above");
        let resp = LookupResponse { hub: row.d2id.hub.clone(), temp: row.temp.clone() };
        user.temp_status.disclosed_at = Some(now);
        Ok(resp)
    }

    /// Expires disclosed temps and retries stale rows whose backoff elapsed.
    pub fn tick(&self) {
        let now = self.clock.now();
        let due: Vec<String> = {
            let st = self.lock();
            st.store
                .users
                .iter()
                .filter(|(_, u)| u.row.is_some())
                .filter(|(_, u)| {
                    let s = &u.temp_status;
                    s.disclosed_at.is_some_and(|t| t + self.config.disclosure_ttl <= now)
                        || (s.stale && s.retry_at.is_none_or(|t| t <= now))
                })
                .map(|(id, _)| id.clone())
                .collect()
        };
        for id in due {
            if let Err(e) = self.rotate_temp(&id) {
                log::debug!("rotation retry failed: {e}");
            }
        }
    }

    pub fn rotation_needed(&self, ev: &RotationNeeded) -> Result<(), ApiError> {
        let hub_key = self
            .registry
            .hub_key(ev.d2id.hub.url())
            .ok_or_else(|| ApiError::new(ErrorCode::BadSignature, "event from an unknown hub"))?;
        ev.verify(hub_key)?;
        let identifier = self
            .lock()
            .store
            .find_by_d2id(&ev.d2id)
            .map(str::to_string)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownD2Id, "no row for that D2Id"))?;
        self.rotate_temp(&identifier)
    }

    /// Consumes the presented temp and evaluates the predicate.
    fn consume_and_evaluate(&self, query: &PredicateQuery) -> Result<(String, Attestation), ApiError> {
        query.predicate.validate().map_err(|m| ApiError::new(ErrorCode::MalformedPredicate, m))?;
        let mut st = self.lock();
        let ProviderState { store, .. } = &mut *st;
        let identifier = store
            .temp_index
            .get(&query.temp)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownTemp, "unknown or consumed temp"))?;
        let user = store.users.get_mut(&identifier).expect("index points at a user");
        let row = user.row.as_ref().expect("indexed user has a row");
        let cap = query.predicate.capability();
        if !row.d2vc.supports(&cap) {
            return Err(ApiError::new(
                ErrorCode::CapabilityNotSupported,
                format!("this identity does not advertise {cap}"),
            ));
        }
        let now = self.clock.now();
        let result = evaluate(&query.predicate, &user.attributes, now.date_naive());
        store.temp_index.remove(&query.temp);
        user.temp_status.stale = true;
        let att = AttestationBody {
            issuer: self.config.url.clone(),
            predicate: query.predicate.clone(),
            result,
            nonce: query.nonce,
            issued_at: now,
        }
        .sign(&self.config.signing_key);
        Ok((identifier, att))
    }

    pub fn answer_predicate(&self, query: &PredicateQuery) -> Result<Attestation, ApiError> {
        let (identifier, att) = self.consume_and_evaluate(query)?;
        let _ = self.rotate_temp(&identifier);
        Ok(att)
    }

    /// Answers a hub-forwarded query; the sealed result goes back via the hub.
    pub fn answer_mediated(&self, fwd: &MediatedForward) -> Result<(), ApiError> {
        if self.registry.hub_key(fwd.relay.url()).is_none() {
            return Err(ApiError::new(ErrorCode::HubRejected, "relay is not an accredited hub"));
        }
        {
            let st = self.lock();
            let owner = st.store.temp_index.get(&fwd.query.temp).and_then(|id| st.store.users[id].row.as_ref());
            if owner.is_some_and(|r| r.d2id.hub != fwd.relay) {
                return Err(ApiError::new(ErrorCode::HubRejected, "relay does not hold this identity"));
            }
        }
        let (identifier, att) = self.consume_and_evaluate(&fwd.query)?;
        let sealed = {
            let mut st = self.lock();
            crate::crypto::seal_to(&crate::canonical::canonical_bytes(&att), &fwd.requester_pubkey, &mut st.rng)?
        };
        let _ = self.rotate_temp(&identifier);
        let payload = RelayPayload { capability: fwd.capability.clone(), issuer: self.config.url.clone(), sealed };
        self.client().relay(&fwd.relay, &fwd.request_id, &payload).map_err(|e| match e {
            crate::transport::CallError::Remote(api) => api,
            other => ApiError::new(ErrorCode::HubUnreachable, other.to_string()),
        })?;
        Ok(())
    }

    /// Re-mints the D2Id named by a hub-signed demand, optionally re-homed.
    pub fn renew(&self, demand: &RenewalDemand) -> Result<RenewalGrant, ApiError> {
        let hub_key = self
            .registry
            .hub_key(demand.hub.url())
            .ok_or_else(|| ApiError::new(ErrorCode::BadSignature, "demand from an unknown hub"))?;
        demand.verify(hub_key)?;
        if demand.d2id.hub != demand.hub {
            return Err(ApiError::new(ErrorCode::HubRejected, "hub may only renew its own identities"));
        }
        if self.registry.hub_key(demand.target_hub.url()).is_none() {
            return Err(ApiError::new(ErrorCode::HubRejected, "target is not an accredited hub"));
        }
        let _rot = self.rotation.lock().unwrap();
        let mut st = self.lock();
        let identifier = st
            .store
            .find_by_d2id(&demand.d2id)
            .map(str::to_string)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownD2Id, "no row for that D2Id"))?;
        let new_d2id = D2Id::new(demand.target_hub.clone(), DidToken::mint(&mut st.rng));
        let temp = self.mint_unique_temp(&mut st);
        let ProviderState { store, .. } = &mut *st;
        let user = store.users.get_mut(&identifier).expect("found above");
        let row = user.row.as_mut().expect("found above");
        store.temp_index.remove(&row.temp);
        row.d2id = new_d2id.clone();
        row.temp = temp.clone();
        let d2vc = row.d2vc.clone();
        user.temp_status = TempStatus::default();
        store.temp_index.insert(temp.clone(), identifier);
        Ok(RenewalGrant {
            old_d2id: demand.d2id.clone(),
            new_d2id: new_d2id.clone(),
            d2vc,
            rotation: RotationNotice::signed(new_d2id, temp, &self.config.signing_key),
        })
    }

    fn route(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        let segs = req.segments();
        match (req.method, segs.as_slice()) {
            (Method::Post, ["login"]) => {
                let body: LoginRequest = req.body_as()?;
                reply(LoginResponse { session: self.login(&body.identifier, &body.password)? })
            }
            (Method::Post, ["d2", "issue"]) => reply(self.issue(&req.body_as()?)?),
            (Method::Post, ["d2", "complete"]) => {
                self.complete(&req.body_as()?)?;
                reply(Ack::OK)
            }
            (Method::Post, ["d2", "lookup"]) => reply(self.lookup(&req.body_as()?)?),
            (Method::Post, ["d2", "verify"]) => reply(self.answer_predicate(&req.body_as()?)?),
            (Method::Post, ["d2", "verify-mediated"]) => {
                self.answer_mediated(&req.body_as()?)?;
                reply(Ack::OK)
            }
            (Method::Post, ["d2", "renew"]) => reply(self.renew(&req.body_as()?)?),
            (Method::Post, ["d2", "rotate"]) => {
                self.rotation_needed(&req.body_as()?)?;
                reply(Ack::OK)
            }
            (Method::Post, ["d2", "result"]) => {
                self.on_discovery_response(&req.body_as()?)?;
                reply(Ack::OK)
            }
            (Method::Post, ["kyc"]) => reply(self.start_kyc(&req.body_as()?)?),
            (Method::Get, ["kyc", id]) => {
                let id = RequestId(id.to_string());
                reply(self.kyc_report(&id).ok_or_else(|| ApiError::new(ErrorCode::UnknownRequest, "unknown KYC run"))?)
            }
            (Method::Get, [".well-known", "d2-issuer"]) => reply(self.info()),
            _ => Err(ApiError::not_found(&req.path)),
        }
    }
}

impl Node for ProviderNode {
    fn base_url(&self) -> &NodeUrl {
        &self.config.url
    }

    fn handle(&self, req: &ApiRequest) -> Result<Value, ApiError> {
        self.route(req)
    }
}
