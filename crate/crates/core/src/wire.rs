//! Messages exchanged between hubs, providers and agents.
//!
//! All signatures cover the canonical JSON of a dedicated body value; the
//! signature field itself is never part of what is signed. Agent-issued
//! authorizations are wrapped in [`AgentOp`] so a signature for one operation
//! can never be replayed as another.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::canonical::canonical_bytes;
use crate::crypto::{
    self, CryptoError, EncryptionKeyPair, EncryptionPublicKey, Nonce128, SealedBox, Signature, SigningKeyPair,
    SigningPublicKey,
};
use crate::error::ApiError;
use crate::model::{CapabilityType, D2Id, D2Vc, HubAddress, NodeUrl, TempD2Id};

macro_rules! token_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            /// 128 random bits, base64url.
            pub fn random(rng: &mut impl RngCore) -> Self {
                let mut b = [0u8; 16];
                rng.fill_bytes(&mut b);
                Self(URL_SAFE_NO_PAD.encode(b))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

token_newtype!(
    /// Correlates an alert, the user's decision and the final response.
    RequestId
);
token_newtype!(
    /// Hub account handle.
    AccountId
);
token_newtype!(SessionToken);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupRequest {
    pub identifier: String,
    pub requester: NodeUrl,
}

/// Where to find a user and the pseudonym to present there. Never contains
/// the identifier or any D2Id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupResponse {
    pub hub: HubAddress,
    pub temp: TempD2Id,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMode {
    Direct,
    Mediated,
}

/// Collapses case, punctuation and whitespace so two spellings of the same
/// address compare equal.
pub fn normalize_address(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Minimal-disclosure question put to an issuer. Each variant maps to exactly
/// one capability class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    AgeOver { years: u32 },
    AddressMatches { address: String },
    NationalityEquals { code: String },
    AuthChallenge { challenge: Nonce128 },
}

impl Predicate {
    pub fn capability(&self) -> CapabilityType {
        match self {
            Self::AgeOver { .. } => CapabilityType::AgeValidation,
            Self::AddressMatches { .. } => CapabilityType::AddressValidation,
            Self::NationalityEquals { .. } => CapabilityType::ProofOfNationality,
            Self::AuthChallenge { .. } => CapabilityType::Authentication,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::AgeOver { years } if *years > 200 => Err(format!("implausible age bound {years}")),
            Self::AddressMatches { address } if normalize_address(address).is_empty() => Err("empty address".into()),
            Self::NationalityEquals { code } if code.len() != 2 || !code.bytes().all(|b| b.is_ascii_uppercase()) => {
                Err(format!("`{code}` is not an ISO-3166 alpha-2 code"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-capability query the hub forwards on the requester's behalf.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatedQuery {
    pub predicate: Predicate,
    pub nonce: Nonce128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryRequest {
    pub temp: TempD2Id,
    pub requester: NodeUrl,
    pub wanted: Vec<CapabilityType>,
    pub mode: DiscoveryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requester_pubkey: Option<EncryptionPublicKey>,
    pub request_id: RequestId,
    /// Mediated mode only: what to ask each selected issuer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub queries: BTreeMap<CapabilityType, MediatedQuery>,
}

impl DiscoveryRequest {
    pub fn validate(&self) -> Result<(), ApiError> {
        if self.wanted.is_empty() {
            return Err(ApiError::malformed("no capabilities requested"));
        }
        let distinct: BTreeSet<_> = self.wanted.iter().collect();
        if distinct.len() != self.wanted.len() {
            return Err(ApiError::malformed("duplicate capability in request"));
        }
        match self.mode {
            DiscoveryMode::Direct => {
                if !self.queries.is_empty() {
                    return Err(ApiError::malformed("queries are only sent in mediated mode"));
                }
            }
            DiscoveryMode::Mediated => {
                if self.requester_pubkey.is_none() {
                    return Err(ApiError::malformed("mediated mode requires requester_pubkey"));
                }
                let keys: BTreeSet<_> = self.queries.keys().collect();
                if keys != distinct {
                    return Err(ApiError::malformed("mediated queries must cover exactly the wanted set"));
                }
                for (cap, q) in &self.queries {
                    q.predicate.validate().map_err(ApiError::malformed)?;
                    if &q.predicate.capability() != cap {
                        return Err(ApiError::malformed(format!(
                            "predicate {:?} does not belong to capability {cap}",
                            q.predicate
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryAccepted {
    pub request_id: RequestId,
}

/// What the user sees when someone asks about them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAlert {
    pub request_id: RequestId,
    pub requester: NodeUrl,
    pub wanted: Vec<CapabilityType>,
    pub candidates: BTreeMap<CapabilityType, Vec<NodeUrl>>,
    pub mode: DiscoveryMode,
    pub deadline: DateTime<Utc>,
}

impl UserAlert {
    /// True when every wanted capability has at least one candidate issuer.
    pub fn actionable(&self) -> bool {
        self.wanted.iter().all(|c| self.candidates.get(c).is_some_and(|v| !v.is_empty()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve { selection: BTreeMap<CapabilityType, NodeUrl> },
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserDecision {
    pub request_id: RequestId,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecisionProblem {
    WrongRequest,
    SelectionKeys,
    OutsideCandidates(CapabilityType, NodeUrl),
}

impl UserDecision {
    /// Checks an approval against the alert it answers.
    pub fn check_against(&self, alert: &UserAlert) -> Result<(), DecisionProblem> {
        if self.request_id != alert.request_id {
            return Err(DecisionProblem::WrongRequest);
        }
        let Verdict::Approve { selection } = &self.verdict else {
            return Ok(());
        };
        let keys: BTreeSet<_> = selection.keys().collect();
        let wanted: BTreeSet<_> = alert.wanted.iter().collect();
        if keys != wanted {
            return Err(DecisionProblem::SelectionKeys);
        }
        for (cap, issuer) in selection {
            let ok = alert.candidates.get(cap).is_some_and(|c| c.contains(issuer));
            if !ok {
                return Err(DecisionProblem::OutsideCandidates(cap.clone(), issuer.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub issuer: NodeUrl,
    pub temp: TempD2Id,
}

pub type SignedEncryptedAttestation = SealedBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedGrant {
    pub issuer: NodeUrl,
    pub sealed: SignedEncryptedAttestation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    Declined,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Granted {
        grants: BTreeMap<CapabilityType, Grant>,
    },
    /// Carries no issuer information.
    Denied {
        reason: DenyReason,
    },
    MediatedResult {
        attestations: BTreeMap<CapabilityType, SealedGrant>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryResponse {
    pub request_id: RequestId,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateQuery {
    pub temp: TempD2Id,
    pub predicate: Predicate,
    pub requester: NodeUrl,
    pub nonce: Nonce128,
}

/// The signed part of an [`Attestation`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationBody {
    pub issuer: NodeUrl,
    pub predicate: Predicate,
    pub result: bool,
    pub nonce: Nonce128,
    pub issued_at: DateTime<Utc>,
}

impl AttestationBody {
    pub fn sign(self, key: &SigningKeyPair) -> Attestation {
        let signature = key.sign(&self);
        Attestation {
            issuer: self.issuer,
            predicate: self.predicate,
            result: self.result,
            nonce: self.nonce,
            issued_at: self.issued_at,
            signature,
        }
    }
}

/// Signed boolean answer to a predicate. Holds no attribute value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attestation {
    pub issuer: NodeUrl,
    pub predicate: Predicate,
    pub result: bool,
    pub nonce: Nonce128,
    pub issued_at: DateTime<Utc>,
    pub signature: Signature,
}

impl Attestation {
    pub fn body(&self) -> AttestationBody {
        AttestationBody {
            issuer: self.issuer.clone(),
            predicate: self.predicate.clone(),
            result: self.result,
            nonce: self.nonce,
            issued_at: self.issued_at,
        }
    }

    pub fn verify(&self, issuer_key: &SigningPublicKey) -> Result<(), CryptoError> {
        crypto::verify(issuer_key, &self.body(), &self.signature)
    }
}

/// Sign-then-encrypt: the issuer signature ends up inside the ciphertext.
pub fn seal_attestation<R: RngCore + CryptoRng>(
    body: AttestationBody,
    requester_pubkey: &EncryptionPublicKey,
    issuer_key: &SigningKeyPair,
    rng: &mut R,
) -> Result<SignedEncryptedAttestation, CryptoError> {
    let att = body.sign(issuer_key);
    crypto::seal_to(&canonical_bytes(&att), requester_pubkey, rng)
}

/// Accepts a sealed attestation only if it decrypts under `requester` and the
/// inner signature verifies under `issuer_pubkey`.
pub fn open_attestation(
    sealed: &SignedEncryptedAttestation,
    requester: &EncryptionKeyPair,
    issuer_pubkey: &SigningPublicKey,
) -> Result<Attestation, CryptoError> {
    let plain = crypto::open_sealed(sealed, requester)?;
    let att: Attestation = serde_json::from_slice(&plain).map_err(|_| CryptoError::DecryptError)?;
    att.verify(issuer_pubkey)?;
    Ok(att)
}

#[derive(Serialize)]
struct RotationBody<'a> {
    op: &'static str,
    d2id: &'a D2Id,
    new_temp: &'a TempD2Id,
}

/// Issuer-signed instruction to bind a fresh TempD2Id to a D2Id at the hub.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationNotice {
    pub d2id: D2Id,
    pub new_temp: TempD2Id,
    pub issuer_signature: Signature,
}

impl RotationNotice {
    pub fn signed(d2id: D2Id, new_temp: TempD2Id, key: &SigningKeyPair) -> Self {
        let issuer_signature = key.sign(&RotationBody { op: "rotate", d2id: &d2id, new_temp: &new_temp });
        Self { d2id, new_temp, issuer_signature }
    }

    pub fn verify(&self, issuer_key: &SigningPublicKey) -> Result<(), CryptoError> {
        let body = RotationBody { op: "rotate", d2id: &self.d2id, new_temp: &self.new_temp };
        crypto::verify(issuer_key, &body, &self.issuer_signature)
    }
}

#[derive(Serialize)]
struct RotationNeededBody<'a> {
    op: &'static str,
    d2id: &'a D2Id,
}

/// Hub-signed event: the TempD2Id of `d2id` was consumed and must be replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationNeeded {
    pub d2id: D2Id,
    pub hub_signature: Signature,
}

impl RotationNeeded {
    pub fn signed(d2id: D2Id, key: &SigningKeyPair) -> Self {
        let hub_signature = key.sign(&RotationNeededBody { op: "rotation_needed", d2id: &d2id });
        Self { d2id, hub_signature }
    }

    pub fn verify(&self, hub_key: &SigningPublicKey) -> Result<(), CryptoError> {
        crypto::verify(hub_key, &RotationNeededBody { op: "rotation_needed", d2id: &self.d2id }, &self.hub_signature)
    }
}

#[derive(Serialize)]
struct RenewalBody<'a> {
    op: &'static str,
    d2id: &'a D2Id,
    target_hub: &'a HubAddress,
    hub: &'a HubAddress,
}

/// Hub-signed demand that an issuer re-mint a D2Id, optionally under another hub.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenewalDemand {
    pub d2id: D2Id,
    pub target_hub: HubAddress,
    pub hub: HubAddress,
    pub hub_signature: Signature,
}

impl RenewalDemand {
    pub fn signed(d2id: D2Id, target_hub: HubAddress, hub: HubAddress, key: &SigningKeyPair) -> Self {
        let hub_signature = key.sign(&RenewalBody { op: "renew", d2id: &d2id, target_hub: &target_hub, hub: &hub });
        Self { d2id, target_hub, hub, hub_signature }
    }

    pub fn verify(&self, hub_key: &SigningPublicKey) -> Result<(), CryptoError> {
        let body = RenewalBody { op: "renew", d2id: &self.d2id, target_hub: &self.target_hub, hub: &self.hub };
        crypto::verify(hub_key, &body, &self.hub_signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenewalGrant {
    pub old_d2id: D2Id,
    pub new_d2id: D2Id,
    pub d2vc: D2Vc,
    /// Installs the first TempD2Id of the new D2Id.
    pub rotation: RotationNotice,
}

/// Hub → issuer in mediated mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatedForward {
    pub request_id: RequestId,
    pub relay: HubAddress,
    pub capability: CapabilityType,
    pub query: PredicateQuery,
    pub requester_pubkey: EncryptionPublicKey,
}

/// Issuer → hub in mediated mode; forwarded to the requester verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayPayload {
    pub capability: CapabilityType,
    pub issuer: NodeUrl,
    pub sealed: SignedEncryptedAttestation,
}

/// Everything an agent key can authorize. The `op` tag separates domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AgentOp {
    RegisterRow { account_id: AccountId, d2id: D2Id, d2vc: D2Vc },
    DeleteRow { account_id: AccountId, d2id: D2Id },
    Decision { account_id: AccountId, decision: UserDecision },
    Renew { account_id: AccountId },
    Migrate { account_id: AccountId, target_hub: HubAddress, target_account_id: AccountId },
    AcceptMigration { account_id: AccountId, source_hub: HubAddress, source_account_id: AccountId },
    DeleteAccount { account_id: AccountId },
    CompleteRegistration { identifier: String, d2id: D2Id, d2vc: D2Vc },
}

impl AgentOp {
    pub fn sign(&self, key: &SigningKeyPair) -> Signature {
        key.sign(self)
    }

    pub fn verify(&self, key: &SigningPublicKey, sig: &Signature) -> Result<(), CryptoError> {
        crypto::verify(key, self, sig)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateAccountRequest {
    pub agent_pubkey: SigningPublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateAccountResponse {
    pub account_id: AccountId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowAuth {
    /// Signature over [`AgentOp::RegisterRow`] by the account key.
    Agent { signature: Signature },
    /// Rows pushed by the source hub during migration; signature over
    /// [`AgentOp::AcceptMigration`] by the target account key.
    Migration { source_hub: HubAddress, source_account_id: AccountId, authorization: Signature },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRowRequest {
    pub d2id: D2Id,
    pub d2vc: D2Vc,
    pub auth: RowAuth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteRowRequest {
    pub d2id: D2Id,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: UserDecision,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrateRequest {
    pub target_hub: HubAddress,
    pub target_account_id: AccountId,
    pub target_authorization: Signature,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboxResponse {
    pub alerts: Vec<UserAlert>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenewedRow {
    pub old_d2id: D2Id,
    pub new_d2id: D2Id,
    pub d2vc: D2Vc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowFailure {
    pub d2id: D2Id,
    pub issuer: NodeUrl,
    pub code: crate::error::ErrorCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RenewalReport {
    pub renewed: Vec<RenewedRow>,
    pub failed: Vec<RowFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_hub: Option<HubAddress>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginRequest {
    pub identifier: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginResponse {
    pub session: SessionToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueRequest {
    pub session: SessionToken,
    pub agent_pubkey: SigningPublicKey,
    /// Subset of the user's capabilities to advertise; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<BTreeSet<CapabilityType>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueResponse {
    pub did: crate::model::DidToken,
    pub d2vc: D2Vc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub identifier: String,
    pub d2id: D2Id,
    pub d2vc: D2Vc,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuerInfo {
    pub issuer: NodeUrl,
    pub signing_key: SigningPublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

impl Ack {
    pub const OK: Ack = Ack { ok: true };
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn url(s: &str) -> NodeUrl {
        NodeUrl::parse(s).unwrap()
    }

    fn body() -> AttestationBody {
        AttestationBody {
            issuer: url("https://gov.example"),
            predicate: Predicate::AgeOver { years: 18 },
            result: true,
            nonce: Nonce128([9; 16]),
            issued_at: Utc.with_ymd_and_hms(2024, 6, 1, 12, 0, 0).unwrap(),
        }
    }

    #[test]
    fn seal_then_open() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let issuer = SigningKeyPair::generate(&mut rng);
        let requester = EncryptionKeyPair::generate(&mut rng);
        let sealed = seal_attestation(body(), &requester.public(), &issuer, &mut rng).unwrap();
        let att = open_attestation(&sealed, &requester, &issuer.public()).unwrap();
        assert!(att.result);
        assert_eq!(att.predicate, Predicate::AgeOver { years: 18 });
        assert_eq!(att.body(), body());
    }

    #[test]
    fn open_with_wrong_key_or_truncated() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let issuer = SigningKeyPair::generate(&mut rng);
        let requester = EncryptionKeyPair::generate(&mut rng);
        let stranger = EncryptionKeyPair::generate(&mut rng);
        let sealed = seal_attestation(body(), &requester.public(), &issuer, &mut rng).unwrap();
        assert_eq!(open_attestation(&sealed, &stranger, &issuer.public()), Err(CryptoError::DecryptError));
        let mut short = sealed.clone();
        short.ciphertext.0.truncate(short.ciphertext.0.len() / 2);
        assert_eq!(open_attestation(&short, &requester, &issuer.public()), Err(CryptoError::DecryptError));
    }

    #[test]
    fn resigned_by_other_issuer_is_bad_signature() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let issuer = SigningKeyPair::generate(&mut rng);
        let impostor = SigningKeyPair::generate(&mut rng);
        let requester = EncryptionKeyPair::generate(&mut rng);
        let sealed = seal_attestation(body(), &requester.public(), &impostor, &mut rng).unwrap();
        assert_eq!(open_attestation(&sealed, &requester, &issuer.public()), Err(CryptoError::BadSignature));
    }

    #[test]
    fn bit_flips_never_open() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let issuer = SigningKeyPair::generate(&mut rng);
        let requester = EncryptionKeyPair::generate(&mut rng);
        let sealed = seal_attestation(body(), &requester.public(), &issuer, &mut rng).unwrap();
        let len = sealed.ciphertext.0.len();
        for _ in 0..100 {
            let mut bad = sealed.clone();
            let pos = (rng.next_u32() as usize) % len;
            let bit = 1u8 << (rng.next_u32() % 8);
            bad.ciphertext.0[pos] ^= bit;
            assert_eq!(open_attestation(&bad, &requester, &issuer.public()), Err(CryptoError::DecryptError));
        }
    }

    #[test]
    fn ciphertext_hides_plaintext() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let issuer = SigningKeyPair::generate(&mut rng);
        let requester = EncryptionKeyPair::generate(&mut rng);
        let sealed = seal_attestation(body(), &requester.public(), &issuer, &mut rng).unwrap();
        let wire = canonical_bytes(&sealed);
        let text = String::from_utf8(wire).unwrap();
        for needle in ["gov.example", "age_over", "issued_at", "2024-06-01", "result"] {
            assert!(!text.contains(needle), "{needle} leaked");
        }
    }

    #[test]
    fn mediated_requires_pubkey_and_queries() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let mut req = DiscoveryRequest {
            temp: crate::model::mint_temp_d2id(&mut rng),
            requester: url("https://health.example"),
            wanted: vec![CapabilityType::AgeValidation],
            mode: DiscoveryMode::Mediated,
            requester_pubkey: None,
            request_id: RequestId::random(&mut rng),
            queries: BTreeMap::new(),
        };
        assert!(req.validate().is_err());
        req.requester_pubkey = Some(EncryptionKeyPair::generate(&mut rng).public());
        assert!(req.validate().is_err());
        req.queries.insert(
            CapabilityType::AgeValidation,
            MediatedQuery { predicate: Predicate::NationalityEquals { code: "GR".into() }, nonce: Nonce128([0; 16]) },
        );
        assert!(req.validate().is_err());
        req.queries.insert(
            CapabilityType::AgeValidation,
            MediatedQuery { predicate: Predicate::AgeOver { years: 18 }, nonce: Nonce128([0; 16]) },
        );
        req.validate().unwrap();
        req.wanted.clear();
        assert!(req.validate().is_err());
    }

    #[test]
    fn decision_checks() {
        let gov = url("https://gov.example");
        let telco = url("https://telco.example");
        let alert = UserAlert {
            request_id: RequestId("r1".into()),
            requester: url("https://bank.example"),
            wanted: vec![CapabilityType::AgeValidation, CapabilityType::AddressValidation],
            candidates: BTreeMap::from([
                (CapabilityType::AgeValidation, vec![gov.clone()]),
                (CapabilityType::AddressValidation, vec![telco.clone()]),
            ]),
            mode: DiscoveryMode::Direct,
            deadline: Utc.with_ymd_and_hms(2024, 6, 1, 0, 10, 0).unwrap(),
        };
        let approve = |sel: Vec<(CapabilityType, NodeUrl)>| UserDecision {
            request_id: RequestId("r1".into()),
            verdict: Verdict::Approve { selection: sel.into_iter().collect() },
        };
        approve(vec![(CapabilityType::AgeValidation, gov.clone()), (CapabilityType::AddressValidation, telco.clone())])
            .check_against(&alert)
            .unwrap();
        assert_eq!(
            approve(vec![(CapabilityType::AgeValidation, gov.clone())]).check_against(&alert),
            Err(DecisionProblem::SelectionKeys)
        );
        assert!(matches!(
            approve(vec![
                (CapabilityType::AgeValidation, telco.clone()),
                (CapabilityType::AddressValidation, telco.clone()),
            ])
            .check_against(&alert),
            Err(DecisionProblem::OutsideCandidates(..))
        ));
        let reject = UserDecision { request_id: RequestId("r1".into()), verdict: Verdict::Reject };
        reject.check_against(&alert).unwrap();
    }

    #[test]
    fn address_normalization() {
        assert_eq!(normalize_address("  12 Main St., Athens "), "12 main st athens");
        assert_eq!(normalize_address("12 MAIN st Athens"), "12 main st athens");
        assert!(Predicate::AddressMatches { address: " ,. ".into() }.validate().is_err());
        assert!(Predicate::NationalityEquals { code: "gr".into() }.validate().is_err());
        assert!(Predicate::NationalityEquals { code: "GR".into() }.validate().is_ok());
    }
}
