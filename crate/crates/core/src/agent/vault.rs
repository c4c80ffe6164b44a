use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::policy::Policy;
use crate::crypto::{self, Bytes, CryptoError, KdfParams, SigningKeyPair};
use crate::model::{AgentRow, D2Id, HubAddress};
use crate::wire::AccountId;

const VAULT_AAD: &[u8] = b"d2/vault/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountRef {
    pub account_id: AccountId,
    pub key: SigningKeyPair,
}

/// Everything the agent keeps about its user.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vault {
    pub rows: Vec<AgentRow>,
    pub accounts: BTreeMap<HubAddress, AccountRef>,
    pub policies: Vec<Policy>,
    /// Rows whose last renewal or migration failed.
    #[serde(default)]
    pub quarantined: BTreeSet<D2Id>,
}

impl Vault {
    pub fn row_mut(&mut self, d2id: &D2Id) -> Option<&mut AgentRow> {
        self.rows.iter_mut().find(|r| &r.d2id == d2id)
    }
}

/// On-disk form: only KDF parameters and ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedVault {
    pub v: u32,
    pub kdf: KdfParams,
    pub salt: Bytes,
    pub blob: Bytes,
}

impl SealedVault {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("sealed vault serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        serde_json::from_slice(bytes).map_err(|_| CryptoError::DecryptError)
    }
}

/// A PIN-derived key plus the salt it was derived with.
#[derive(Clone)]
pub struct VaultKey {
    kdf: KdfParams,
    salt: Vec<u8>,
    key: [u8; 32],
}

impl VaultKey {
    pub fn derive(pin: &str, kdf: KdfParams, rng: &mut impl RngCore) -> Result<Self, CryptoError> {
        let mut salt = vec![0u8; 16];
        rng.fill_bytes(&mut salt);
        let key = crypto::derive_pin_key(pin, &salt, kdf)?;
        Ok(Self { kdf, salt, key })
    }

    pub fn for_sealed(pin: &str, sealed: &SealedVault) -> Result<Self, CryptoError> {
        let key = crypto::derive_pin_key(pin, &sealed.salt.0, sealed.kdf)?;
        Ok(Self { kdf: sealed.kdf, salt: sealed.salt.0.clone(), key })
    }

    pub fn seal(&self, vault: &Vault, rng: &mut impl RngCore) -> SealedVault {
        let plain = serde_json::to_vec(vault).expect("vault serializes");
        SealedVault {
            v: 1,
            kdf: self.kdf,
            salt: Bytes(self.salt.clone()),
            blob: Bytes(crypto::encrypt_at_rest(&self.key, VAULT_AAD, &plain, rng)),
        }
    }

    /// Fails with `DecryptError` for a wrong PIN or a tampered blob.
    pub fn open(&self, sealed: &SealedVault) -> Result<Vault, CryptoError> {
        let plain = crypto::decrypt_at_rest(&self.key, VAULT_AAD, &sealed.blob.0)?;
        serde_json::from_slice(&plain).map_err(|_| CryptoError::DecryptError)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn wrong_pin_is_an_error_not_garbage() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut v = Vault::default();
        v.accounts.insert(
            HubAddress::parse("https://hub1.example").unwrap(),
            AccountRef { account_id: AccountId("acct".into()), key: SigningKeyPair::generate(&mut rng) },
        );
        let key = VaultKey::derive("1234", KdfParams::fast(), &mut rng).unwrap();
        let sealed = key.seal(&v, &mut rng);
        assert_eq!(VaultKey::for_sealed("1234", &sealed).unwrap().open(&sealed).unwrap(), v);
        let wrong = VaultKey::for_sealed("4321", &sealed).unwrap();
        assert!(matches!(wrong.open(&sealed), Err(CryptoError::DecryptError)));
    }
}
