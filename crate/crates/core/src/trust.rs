//! Static, authority-signed registry of accredited hubs and known issuers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, CryptoError, Signature, SigningKeyPair, SigningPublicKey};
use crate::model::NodeUrl;

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("registry signature does not verify under the pinned authority key")]
    BadSignature,
    #[error("registry authority key does not match the pinned key")]
    WrongAuthority,
    #[error("reading trust registry: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing trust registry: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegistryBody {
    pub version: u32,
    /// Accredited hubs and their signing keys.
    pub hubs: BTreeMap<NodeUrl, SigningPublicKey>,
    /// Issuer signing keys, as published at `/.well-known/d2-issuer`.
    pub issuers: BTreeMap<NodeUrl, SigningPublicKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustRegistry {
    #[serde(flatten)]
    pub body: RegistryBody,
    pub authority: SigningPublicKey,
    pub signature: Signature,
}

impl TrustRegistry {
    pub fn sign(body: RegistryBody, authority: &SigningKeyPair) -> Self {
        let signature = authority.sign(&body);
        Self { body, authority: authority.public(), signature }
    }

    pub fn verify(&self, pinned: Option<&SigningPublicKey>) -> Result<(), TrustError> {
        if pinned.is_some_and(|p| p != &self.authority) {
            return Err(TrustError::WrongAuthority);
        }
        crypto::verify(&self.authority, &self.body, &self.signature).map_err(|e| match e {
            CryptoError::BadSignature | CryptoError::KeyError(_) | CryptoError::DecryptError => {
                TrustError::BadSignature
            }
        })
    }

    pub fn load(path: &Path, pinned: Option<&SigningPublicKey>) -> Result<Self, TrustError> {
        let reg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        reg.verify(pinned)?;
        Ok(reg)
    }

    pub fn hub_key(&self, hub: &NodeUrl) -> Option<&SigningPublicKey> {
        self.body.hubs.get(hub)
    }

    pub fn issuer_key(&self, issuer: &NodeUrl) -> Option<&SigningPublicKey> {
        self.body.issuers.get(issuer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn signed_registry_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let authority = SigningKeyPair::generate(&mut rng);
        let hub = SigningKeyPair::generate(&mut rng);
        let mut body = RegistryBody { version: 1, ..Default::default() };
        body.hubs.insert(NodeUrl::parse("https://hub1.example").unwrap(), hub.public());
        let reg = TrustRegistry::sign(body, &authority);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&reg).unwrap()).unwrap();
        let loaded = TrustRegistry::load(&path, Some(&authority.public())).unwrap();
        assert_eq!(loaded, reg);

        let other = SigningKeyPair::generate(&mut rng);
        assert!(matches!(TrustRegistry::load(&path, Some(&other.public())), Err(TrustError::WrongAuthority)));

        let mut tampered = reg.clone();
        tampered.body.issuers.insert(NodeUrl::parse("https://evil.example").unwrap(), other.public());
        assert!(matches!(tampered.verify(None), Err(TrustError::BadSignature)));
    }
}
