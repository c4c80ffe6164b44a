//! Requester side: bootstrap a discovery and check what comes back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ProviderNode, ProviderState};
use crate::crypto::{CryptoError, Nonce128};
use crate::error::{ApiError, ErrorCode};
use crate::model::{CapabilityType, HubAddress, NodeUrl};
use crate::transport::CallError;
use crate::wire::*;

/// Starts a verification of the user known to `bootstrap` as `identifier`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KycStart {
    pub identifier: String,
    pub bootstrap: NodeUrl,
    pub mode: DiscoveryMode,
    pub predicates: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum KycState {
    Pending,
    Complete,
    Denied { reason: DenyReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityCheck {
    pub predicate: Predicate,
    pub nonce: Nonce128,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issuer: Option<NodeUrl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KycReport {
    pub request_id: RequestId,
    pub hub: HubAddress,
    pub mode: DiscoveryMode,
    #[serde(flatten)]
    pub state: KycState,
    pub checks: BTreeMap<CapabilityType, CapabilityCheck>,
    /// Verified attestations as received.
    pub attestations: Vec<Attestation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<bool>,
}

impl KycReport {
    fn finish(&mut self) {
        self.state = KycState::Complete;
        self.verdict = Some(self.checks.values().all(|c| c.result == Some(true)));
    }
}

fn remote(e: CallError, unreachable: ErrorCode) -> ApiError {
    match e {
        CallError::Remote(api) => api,
        other => ApiError::new(unreachable, other.to_string()),
    }
}

impl ProviderNode {
    pub fn kyc_report(&self, id: &RequestId) -> Option<KycReport> {
        self.lock().kyc.get(id).cloned()
    }

    pub fn start_kyc(&self, start: &KycStart) -> Result<KycReport, ApiError> {
        if start.predicates.is_empty() {
            return Err(ApiError::malformed("nothing to verify"));
        }
        let mut checks = BTreeMap::new();
        let request_id = {
            let mut st = self.lock();
            let ProviderState { rng, .. } = &mut *st;
            for p in &start.predicates {
                p.validate().map_err(|m| ApiError::new(ErrorCode::MalformedPredicate, m))?;
                let check = CapabilityCheck {
                    predicate: p.clone(),
                    nonce: Nonce128::random(rng),
                    issuer: None,
                    result: None,
                    error: None,
                };
                if checks.insert(p.capability(), check).is_some() {
                    return Err(ApiError::malformed("one predicate per capability"));
                }
            }
            RequestId::random(rng)
        };
        let client = self.client();
        let found = client
            .lookup(
                &start.bootstrap,
                &LookupRequest { identifier: start.identifier.clone(), requester: self.config.url.clone() },
            )
            .map_err(|e| remote(e, ErrorCode::ProviderRejected))?;
        let queries = match start.mode {
            DiscoveryMode::Direct => BTreeMap::new(),
            DiscoveryMode::Mediated => checks
                .iter()
                .map(|(cap, c)| (cap.clone(), MediatedQuery { predicate: c.predicate.clone(), nonce: c.nonce }))
                .collect(),
        };
        let discovery = DiscoveryRequest {
            temp: found.temp,
            requester: self.config.url.clone(),
            wanted: checks.keys().cloned().collect(),
            mode: start.mode,
            requester_pubkey: (start.mode == DiscoveryMode::Mediated).then(|| self.config.encryption_key.public()),
            request_id: request_id.clone(),
            queries,
        };
        let report = KycReport {
            request_id: request_id.clone(),
            hub: found.hub.clone(),
            mode: start.mode,
            state: KycState::Pending,
            checks,
            attestations: Vec::new(),
            verdict: None,
        };
        // Recorded first: the hub may deliver a denial before `discover` returns.
        self.lock().kyc.insert(request_id.clone(), report);
        if let Err(e) = client.discover(&found.hub, &discovery) {
            self.lock().kyc.remove(&request_id);
            return Err(remote(e, ErrorCode::HubUnreachable));
        }
        Ok(self.kyc_report(&request_id).expect("inserted above"))
    }

    /// Hub delivery of a discovery outcome.
    pub fn on_discovery_response(&self, resp: &DiscoveryResponse) -> Result<(), ApiError> {
        let mut report = {
            let st = self.lock();
            match st.kyc.get(&resp.request_id) {
                Some(r) if r.state == KycState::Pending => r.clone(),
                _ => return Err(ApiError::new(ErrorCode::UnknownRequest, "no pending KYC run")),
            }
        };
        match &resp.outcome {
            Outcome::Denied { reason } => {
                report.state = KycState::Denied { reason: *reason };
                report.verdict = Some(false);
            }
            Outcome::Granted { grants } => {
                if report.mode != DiscoveryMode::Direct {
                    return Err(ApiError::malformed("direct grant for a mediated request"));
                }
                for (cap, check) in report.checks.iter_mut() {
                    let Some(grant) = grants.get(cap) else {
                        check.error = Some(ErrorCode::NotFound);
                        continue;
                    };
                    check.issuer = Some(grant.issuer.clone());
                    match self.query_issuer(grant, check) {
                        Ok(att) => {
                            check.result = Some(att.result);
                            report.attestations.push(att);
                        }
                        Err(code) => check.error = Some(code),
                    }
                }
                report.finish();
            }
            Outcome::MediatedResult { attestations } => {
                if report.mode != DiscoveryMode::Mediated {
                    return Err(ApiError::malformed("mediated result for a direct request"));
                }
                for (cap, check) in report.checks.iter_mut() {
                    let Some(sealed) = attestations.get(cap) else {
                        check.error = Some(ErrorCode::NotFound);
                        continue;
                    };
                    check.issuer = Some(sealed.issuer.clone());
                    match self.open_mediated(sealed, check) {
                        Ok(att) => {
                            check.result = Some(att.result);
                            report.attestations.push(att);
                        }
                        Err(code) => check.error = Some(code),
                    }
                }
                report.finish();
            }
        }
        self.lock().kyc.insert(resp.request_id.clone(), report);
        Ok(())
    }

    fn trusted_key(&self, issuer: &NodeUrl) -> Result<crate::crypto::SigningPublicKey, ErrorCode> {
        if !self.config.trust_list.contains(issuer) {
            return Err(ErrorCode::UntrustedIssuer);
        }
        self.registry.issuer_key(issuer).copied().ok_or(ErrorCode::UntrustedIssuer)
    }

    fn check_attestation(att: &Attestation, issuer: &NodeUrl, check: &CapabilityCheck) -> Result<(), ErrorCode> {
        if &att.issuer != issuer || att.predicate != check.predicate || att.nonce != check.nonce {
            return Err(ErrorCode::BadSignature);
        }
        Ok(())
    }

    fn query_issuer(&self, grant: &Grant, check: &CapabilityCheck) -> Result<Attestation, ErrorCode> {
        let key = self.trusted_key(&grant.issuer)?;
        let query = PredicateQuery {
            temp: grant.temp.clone(),
            predicate: check.predicate.clone(),
            requester: self.config.url.clone(),
            nonce: check.nonce,
        };
        let att =
            self.client().verify(&grant.issuer, &query).map_err(|e| e.code().unwrap_or(ErrorCode::ProviderRejected))?;
        att.verify(&key).map_err(|_| ErrorCode::BadSignature)?;
        Self::check_attestation(&att, &grant.issuer, check)?;
        Ok(att)
    }

    fn open_mediated(&self, sealed: &SealedGrant, check: &CapabilityCheck) -> Result<Attestation, ErrorCode> {
        let key = self.trusted_key(&sealed.issuer)?;
        let att = open_attestation(&sealed.sealed, &self.config.encryption_key, &key).map_err(|e| match e {
            CryptoError::DecryptError => ErrorCode::DecryptError,
            CryptoError::KeyError(_) => ErrorCode::KeyError,
            CryptoError::BadSignature => ErrorCode::BadSignature,
        })?;
        Self::check_attestation(&att, &sealed.issuer, check)?;
        Ok(att)
    }
}
