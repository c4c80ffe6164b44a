//! Random instances of every wire message, and field-mutation helpers.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, TimeZone, Utc};
use d2_core::crypto::{
    AeadNonce, Bytes, EncryptionKeyPair, EncryptionPublicKey, EnvelopeHeader, Nonce128, SealedBox, Signature,
    SigningKeyPair, SigningPublicKey,
};
use d2_core::model::{
    mint_temp_d2id, AgentRow, CapabilityType, D2Id, D2Vc, DidToken, HubAddress, HubRow, NodeUrl, ProviderRow, TempD2Id,
};
use d2_core::trust::{RegistryBody, TrustRegistry};
use d2_core::wire::*;
use d2_core::ErrorCode;
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

/// Draws structured values from a seeded RNG and free text from proptest.
#[derive(Debug)]
pub struct Gen {
    rng: ChaCha20Rng,
    texts: Vec<String>,
    next_text: usize,
    keys: Vec<SigningKeyPair>,
}

pub fn gen_strategy() -> impl Strategy<Value = Gen> {
    (any::<[u8; 32]>(), prop::collection::vec("\\PC{0,24}", 6)).prop_map(|(seed, texts)| Gen::new(seed, texts))
}

const HOSTS: &[&str] = &["bank", "gov", "telco", "email", "hub1", "hub2", "healthcare", "x-y", "n0de"];
const TLDS: &[&str] = &["com", "example", "org", "co.uk"];

impl Gen {
    pub fn new(seed: [u8; 32], texts: Vec<String>) -> Self {
        let keys = (0u8..4).map(|i| SigningKeyPair::from_seed([i + 1; 32])).collect();
        Self { rng: ChaCha20Rng::from_seed(seed), texts, next_text: 0, keys }
    }

    pub fn from_u64(seed: u64) -> Self {
        let mut s = [0u8; 32];
        s[..8].copy_from_slice(&seed.to_le_bytes());
        Self::new(s, vec!["alice@example.com".into(), "12 Rue de la Paix".into(), "FR".into(), "ü ✓ \"q\"\n".into()])
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn text(&mut self) -> String {
        if self.texts.is_empty() {
            return String::new();
        }
        let t = self.texts[self.next_text % self.texts.len()].clone();
        self.next_text += 1;
        t
    }

    pub fn bool(&mut self) -> bool {
        self.rng.gen()
    }

    pub fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.rng.gen_range(0..xs.len())]
    }

    pub fn key(&mut self) -> SigningKeyPair {
        self.pick(&self.keys.clone()).clone()
    }

    pub fn url(&mut self) -> NodeUrl {
        let host = *self.pick(HOSTS);
        let tld = *self.pick(TLDS);
        let s = match self.rng.gen_range(0..4) {
            0 => format!("https://{host}.{tld}"),
            1 => format!("http://{host}.{tld}:{}", self.rng.gen_range(1..65535u32)),
            2 => format!("https://{host}{}.{tld}/d2", self.rng.gen_range(0..100u32)),
            _ => format!("http://127.0.0.1:{}", self.rng.gen_range(1024..65535u32)),
        };
        NodeUrl::parse(&s).expect("generated urls are valid")
    }

    pub fn hub(&mut self) -> HubAddress {
        HubAddress::from(self.url())
    }

    pub fn temp(&mut self) -> TempD2Id {
        mint_temp_d2id(&mut self.rng)
    }

    pub fn did(&mut self) -> DidToken {
        DidToken::mint(&mut self.rng)
    }

    pub fn d2id(&mut self) -> D2Id {
        D2Id::new(self.hub(), self.did())
    }

    pub fn capability(&mut self) -> CapabilityType {
        match self.rng.gen_range(0..5) {
            0 => CapabilityType::Authentication,
            1 => CapabilityType::AgeValidation,
            2 => CapabilityType::AddressValidation,
            3 => CapabilityType::ProofOfNationality,
            _ => CapabilityType::from(format!("Custom {}", self.rng.gen_range(0..50u32))),
        }
    }

    pub fn capabilities(&mut self, min: usize) -> BTreeSet<CapabilityType> {
        let n = self.rng.gen_range(min..=min + 3);
        (0..n).map(|_| self.capability()).collect::<BTreeSet<_>>()
    }

    pub fn d2vc(&mut self) -> D2Vc {
        let mut caps = self.capabilities(1);
        caps.insert(CapabilityType::Authentication);
        D2Vc::new(self.url(), caps).expect("non-empty")
    }

    pub fn nonce(&mut self) -> Nonce128 {
        Nonce128::random(&mut self.rng)
    }

    pub fn time(&mut self) -> DateTime<Utc> {
        let secs = self.rng.gen_range(0..4_102_444_800i64);
        let nanos = if self.bool() { 0 } else { self.rng.gen_range(0..1_000_000_000u32) };
        Utc.timestamp_opt(secs, nanos).single().expect("in range")
    }

    pub fn signature(&mut self) -> Signature {
        let mut b = [0u8; 64];
        self.rng.fill_bytes(&mut b);
        Signature(b)
    }

    pub fn signing_pub(&mut self) -> SigningPublicKey {
        self.key().public()
    }

    pub fn enc_pub(&mut self) -> EncryptionPublicKey {
        let mut b = [0u8; 32];
        self.rng.fill_bytes(&mut b);
        EncryptionKeyPair::from_bytes(b).public()
    }

    pub fn request_id(&mut self) -> RequestId {
        RequestId::random(&mut self.rng)
    }

    pub fn account_id(&mut self) -> AccountId {
        AccountId::random(&mut self.rng)
    }

    pub fn predicate(&mut self) -> Predicate {
        match self.rng.gen_range(0..4) {
            0 => Predicate::AgeOver { years: self.rng.gen_range(0..150) },
            1 => Predicate::AddressMatches { address: self.text() },
            2 => Predicate::NationalityEquals { code: self.text() },
            _ => Predicate::AuthChallenge { challenge: self.nonce() },
        }
    }

    pub fn mode(&mut self) -> DiscoveryMode {
        if self.bool() {
            DiscoveryMode::Direct
        } else {
            DiscoveryMode::Mediated
        }
    }

    fn vec<T>(&mut self, max: usize, mut f: impl FnMut(&mut Self) -> T) -> Vec<T> {
        let n = self.rng.gen_range(0..=max);
        (0..n).map(|_| f(self)).collect()
    }

    fn cap_map<T>(&mut self, max: usize, mut f: impl FnMut(&mut Self) -> T) -> BTreeMap<CapabilityType, T> {
        let n = self.rng.gen_range(0..=max);
        (0..n).map(|_| (self.capability(), f(self))).collect()
    }

    pub fn sealed(&mut self) -> SealedBox {
        let mut nonce = [0u8; 12];
        self.rng.fill_bytes(&mut nonce);
        let len = self.rng.gen_range(16..200);
        let mut ct = vec![0u8; len];
        self.rng.fill_bytes(&mut ct);
        SealedBox {
            header: EnvelopeHeader::default(),
            sender_eph_pubkey: self.enc_pub(),
            nonce: AeadNonce(nonce),
            ciphertext: Bytes(ct),
        }
    }

    pub fn attestation(&mut self) -> Attestation {
        let key = self.key();
        AttestationBody {
            issuer: self.url(),
            predicate: self.predicate(),
            result: self.bool(),
            nonce: self.nonce(),
            issued_at: self.time(),
        }
        .sign(&key)
    }

    pub fn rotation_notice(&mut self) -> RotationNotice {
        let key = self.key();
        RotationNotice::signed(self.d2id(), self.temp(), &key)
    }

    pub fn rotation_needed(&mut self) -> RotationNeeded {
        let key = self.key();
        RotationNeeded::signed(self.d2id(), &key)
    }

    pub fn renewal_demand(&mut self) -> RenewalDemand {
        let key = self.key();
        RenewalDemand::signed(self.d2id(), self.hub(), self.hub(), &key)
    }

    pub fn verdict(&mut self) -> Verdict {
        if self.bool() {
            Verdict::Approve { selection: self.cap_map(3, |g| g.url()) }
        } else {
            Verdict::Reject
        }
    }

    pub fn decision(&mut self) -> UserDecision {
        UserDecision { request_id: self.request_id(), verdict: self.verdict() }
    }

    pub fn alert(&mut self) -> UserAlert {
        UserAlert {
            request_id: self.request_id(),
            requester: self.url(),
            wanted: self.capabilities(1).into_iter().collect(),
            candidates: self.cap_map(3, |g| g.vec(3, |g| g.url())),
            mode: self.mode(),
            deadline: self.time(),
        }
    }

    pub fn agent_op(&mut self) -> AgentOp {
        match self.rng.gen_range(0..8) {
            0 => AgentOp::RegisterRow { account_id: self.account_id(), d2id: self.d2id(), d2vc: self.d2vc() },
            1 => AgentOp::DeleteRow { account_id: self.account_id(), d2id: self.d2id() },
            2 => AgentOp::Decision { account_id: self.account_id(), decision: self.decision() },
            3 => AgentOp::Renew { account_id: self.account_id() },
            4 => AgentOp::Migrate {
                account_id: self.account_id(),
                target_hub: self.hub(),
                target_account_id: self.account_id(),
            },
            5 => AgentOp::AcceptMigration {
                account_id: self.account_id(),
                source_hub: self.hub(),
                source_account_id: self.account_id(),
            },
            6 => AgentOp::DeleteAccount { account_id: self.account_id() },
            _ => AgentOp::CompleteRegistration { identifier: self.text(), d2id: self.d2id(), d2vc: self.d2vc() },
        }
    }

    pub fn outcome(&mut self) -> Outcome {
        match self.rng.gen_range(0..3) {
            0 => Outcome::Granted { grants: self.cap_map(3, |g| Grant { issuer: g.url(), temp: g.temp() }) },
            1 => Outcome::Denied { reason: if self.bool() { DenyReason::Declined } else { DenyReason::Timeout } },
            _ => Outcome::MediatedResult {
                attestations: self.cap_map(3, |g| SealedGrant { issuer: g.url(), sealed: g.sealed() }),
            },
        }
    }

    pub fn error_code(&mut self) -> ErrorCode {
        *self.pick(&[
            ErrorCode::IssuerUnreachable,
            ErrorCode::TargetUnreachable,
            ErrorCode::HubRejected,
            ErrorCode::BadSignature,
            ErrorCode::UnknownD2Id,
        ])
    }

    pub fn registry(&mut self) -> TrustRegistry {
        let body = RegistryBody {
            version: self.rng.gen_range(1..10),
            hubs: (0..self.rng.gen_range(0..3)).map(|_| (self.url(), self.signing_pub())).collect(),
            issuers: (0..self.rng.gen_range(0..4)).map(|_| (self.url(), self.signing_pub())).collect(),
        };
        let key = self.key();
        TrustRegistry::sign(body, &key)
    }
}

/// Serializes, deserializes and re-serializes one random instance of `$t`.
pub type Check = fn(&mut Gen) -> Result<(), String>;

fn round_trip<T>(x: &T) -> Result<(), String>
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug,
{
    let text = serde_json::to_string(x).map_err(|e| e.to_string())?;
    let back: T = serde_json::from_str(&text).map_err(|e| format!("{e}: {text}"))?;
    if &back != x {
        return Err(format!("decoded value differs: {text}"));
    }
    let canon = d2_core::canonical::canonical_bytes(x);
    let again: T = serde_json::from_slice(&canon).map_err(|e| format!("canonical: {e}"))?;
    if d2_core::canonical::canonical_bytes(&again) != canon {
        return Err("canonical bytes not stable".into());
    }
    Ok(())
}

macro_rules! checks {
    ($($name:literal => |$g:ident| $e:expr),* $(,)?) => {
        pub const ROUND_TRIPS: &[(&str, Check)] = &[
            $(($name, |$g: &mut Gen| round_trip(&$e))),*
        ];
    };
}

checks! {
    "NodeUrl" => |g| g.url(),
    "HubAddress" => |g| g.hub(),
    "TempD2Id" => |g| g.temp(),
    "DidToken" => |g| g.did(),
    "D2Id" => |g| g.d2id(),
    "D2Vc" => |g| g.d2vc(),
    "CapabilityType" => |g| g.capability(),
    "HubRow" => |g| HubRow { temp: if g.bool() { Some(g.temp()) } else { None }, d2id: g.d2id(), d2vc: g.d2vc() },
    "ProviderRow" => |g| ProviderRow { identifier: g.text(), temp: g.temp(), d2id: g.d2id(), d2vc: g.d2vc() },
    "AgentRow" => |g| AgentRow { identifier: g.text(), d2id: g.d2id(), d2vc: g.d2vc() },
    "LookupRequest" => |g| LookupRequest { identifier: g.text(), requester: g.url() },
    "LookupResponse" => |g| LookupResponse { hub: g.hub(), temp: g.temp() },
    "Predicate" => |g| g.predicate(),
    "MediatedQuery" => |g| MediatedQuery { predicate: g.predicate(), nonce: g.nonce() },
    "DiscoveryRequest" => |g| DiscoveryRequest {
        temp: g.temp(),
        requester: g.url(),
        wanted: g.capabilities(1).into_iter().collect(),
        mode: g.mode(),
        requester_pubkey: if g.bool() { Some(g.enc_pub()) } else { None },
        request_id: g.request_id(),
        queries: g.cap_map(3, |g| MediatedQuery { predicate: g.predicate(), nonce: g.nonce() }),
    },
    "DiscoveryAccepted" => |g| DiscoveryAccepted { request_id: g.request_id() },
    "UserAlert" => |g| g.alert(),
    "Verdict" => |g| g.verdict(),
    "UserDecision" => |g| g.decision(),
    "Grant" => |g| Grant { issuer: g.url(), temp: g.temp() },
    "SealedGrant" => |g| SealedGrant { issuer: g.url(), sealed: g.sealed() },
    "SignedEncryptedAttestation" => |g| g.sealed(),
    "Outcome" => |g| g.outcome(),
    "DiscoveryResponse" => |g| DiscoveryResponse { request_id: g.request_id(), outcome: g.outcome() },
    "PredicateQuery" => |g| PredicateQuery { temp: g.temp(), predicate: g.predicate(), requester: g.url(), nonce: g.nonce() },
    "Attestation" => |g| g.attestation(),
    "RotationNotice" => |g| g.rotation_notice(),
    "RotationNeeded" => |g| g.rotation_needed(),
    "RenewalDemand" => |g| g.renewal_demand(),
    "RenewalGrant" => |g| RenewalGrant { old_d2id: g.d2id(), new_d2id: g.d2id(), d2vc: g.d2vc(), rotation: g.rotation_notice() },
    "MediatedForward" => |g| MediatedForward {
        request_id: g.request_id(),
        relay: g.hub(),
        capability: g.capability(),
        query: PredicateQuery { temp: g.temp(), predicate: g.predicate(), requester: g.url(), nonce: g.nonce() },
        requester_pubkey: g.enc_pub(),
    },
    "RelayPayload" => |g| RelayPayload { capability: g.capability(), issuer: g.url(), sealed: g.sealed() },
    "AgentOp" => |g| g.agent_op(),
    "CreateAccountRequest" => |g| CreateAccountRequest { agent_pubkey: g.signing_pub() },
    "CreateAccountResponse" => |g| CreateAccountResponse { account_id: g.account_id() },
    "RegisterRowRequest" => |g| RegisterRowRequest {
        d2id: g.d2id(),
        d2vc: g.d2vc(),
        auth: if g.bool() {
            RowAuth::Agent { signature: g.signature() }
        } else {
            RowAuth::Migration { source_hub: g.hub(), source_account_id: g.account_id(), authorization: g.signature() }
        },
    },
    "DeleteRowRequest" => |g| DeleteRowRequest { d2id: g.d2id(), signature: g.signature() },
    "DecisionRequest" => |g| DecisionRequest { decision: g.decision(), signature: g.signature() },
    "SignedRequest" => |g| SignedRequest { signature: g.signature() },
    "MigrateRequest" => |g| MigrateRequest {
        target_hub: g.hub(),
        target_account_id: g.account_id(),
        target_authorization: g.signature(),
        signature: g.signature(),
    },
    "InboxResponse" => |g| InboxResponse { alerts: g.vec(3, |g| g.alert()) },
    "RenewalReport" => |g| RenewalReport {
        renewed: g.vec(3, |g| RenewedRow { old_d2id: g.d2id(), new_d2id: g.d2id(), d2vc: g.d2vc() }),
        failed: g.vec(3, |g| RowFailure { d2id: g.d2id(), issuer: g.url(), code: g.error_code() }),
        target_hub: if g.bool() { Some(g.hub()) } else { None },
    },
    "LoginRequest" => |g| LoginRequest { identifier: g.text(), password: g.text() },
    "LoginResponse" => |g| LoginResponse { session: SessionToken::random(g.rng()) },
    "IssueRequest" => |g| IssueRequest {
        session: SessionToken::random(g.rng()),
        agent_pubkey: g.signing_pub(),
        capabilities: if g.bool() { Some(g.capabilities(1)) } else { None },
    },
    "IssueResponse" => |g| IssueResponse { did: g.did(), d2vc: g.d2vc() },
    "CompleteRequest" => |g| CompleteRequest { identifier: g.text(), d2id: g.d2id(), d2vc: g.d2vc(), signature: g.signature() },
    "IssuerInfo" => |g| IssuerInfo { issuer: g.url(), signing_key: g.signing_pub() },
    "Ack" => |g| Ack { ok: g.bool() },
    "TrustRegistry" => |g| g.registry(),
}

/// JSON pointer paths of every leaf in `v`.
pub fn leaf_paths(v: &Value) -> Vec<String> {
    fn walk(v: &Value, at: String, out: &mut Vec<String>) {
        match v {
            Value::Object(o) if !o.is_empty() => {
                for (k, x) in o {
                    walk(x, format!("{at}/{}", k.replace('~', "~0").replace('/', "~1")), out);
                }
            }
            Value::Array(a) if !a.is_empty() => {
                for (i, x) in a.iter().enumerate() {
                    walk(x, format!("{at}/{i}"), out);
                }
            }
            _ => out.push(at),
        }
    }
    let mut out = Vec::new();
    walk(v, String::new(), &mut out);
    out
}

/// Shifts one character of an encoded value to another of the same class,
/// choosing a position near the middle so prefixes such as `https://` and
/// base64 tail bits stay valid.
pub fn mutate_string(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    if chars.is_empty() {
        return "x".into();
    }
    let start = chars.len() / 2;
    let pos = (start..chars.len()).chain(0..start).find(|&i| chars[i].is_ascii_alphanumeric());
    let Some(i) = pos else {
        return format!("{s}x");
    };
    let c = chars[i];
    let next = match c {
        '9' => '1',
        '0'..='8' => (c as u8 + 1) as char,
        'z' => 'a',
        'k' => 'm', // skips `l`, absent from base58
        'a'..='y' => (c as u8 + 1) as char,
        'Z' => 'A',
        'H' => 'J', // skips `I`
        'N' => 'P', // skips `O`
        'A'..='Y' => (c as u8 + 1) as char,
        _ => unreachable!(),
    };
    let mut out = chars;
    out[i] = next;
    out.into_iter().collect()
}

/// Replaces the leaf at `path` with a different value of the same JSON type.
pub fn mutate_leaf(v: &Value, path: &str) -> Value {
    let mut m = v.clone();
    let leaf = m.pointer_mut(path).expect("path from leaf_paths");
    *leaf = match leaf.take() {
        Value::Bool(b) => Value::Bool(!b),
        Value::Number(n) => match n.as_u64() {
            Some(u) => Value::from(u.wrapping_add(1) % 1_000_000),
            None => Value::from(n.as_f64().unwrap_or(0.0) + 1.0),
        },
        Value::String(s) => Value::String(mutate_string(&s)),
        Value::Null => Value::from("x"),
        Value::Array(_) => Value::Array(vec![Value::from("x")]),
        Value::Object(_) => serde_json::json!({"x": 1}),
    };
    m
}
