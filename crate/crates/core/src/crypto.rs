//! Key material, signatures and the symmetric/asymmetric envelopes.
//!
//! Signatures are Ed25519 over canonical JSON. Mediated responses use an
//! ephemeral-static X25519 agreement, HKDF-SHA256 and AES-256-GCM. Stores at
//! rest (hub database, agent vault) use AES-256-GCM directly, with the vault
//! key stretched from a PIN by Argon2id.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;

use crate::canonical::canonical_bytes;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("malformed key material: {0}")]
    KeyError(String),
    #[error("authenticated decryption failed")]
    DecryptError,
    #[error("signature verification failed")]
    BadSignature,
}

/// Serde adapter for fixed-size byte arrays as unpadded base64url.
macro_rules! b64_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn to_b64(&self) -> String {
                URL_SAFE_NO_PAD.encode(self.0)
            }

            pub fn from_b64(s: &str) -> Result<Self, CryptoError> {
                let bytes = URL_SAFE_NO_PAD.decode(s).map_err(|e| CryptoError::KeyError(e.to_string()))?;
                let arr: [u8; $len] = bytes
                    .try_into()
                    .map_err(|v: Vec<u8>| CryptoError::KeyError(format!("expected {} bytes, got {}", $len, v.len())))?;
                Ok(Self(arr))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_b64())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_b64())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_b64(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

b64_newtype!(SigningPublicKey, 32);
b64_newtype!(Signature, 64);
b64_newtype!(EncryptionPublicKey, 32);
b64_newtype!(Nonce128, 16);
b64_newtype!(AeadNonce, 12);

impl Nonce128 {
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(b)
    }
}

/// Variable-length bytes as unpadded base64url.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Bytes(pub Vec<u8>);

impl fmt::Debug for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bytes({} bytes)", self.0.len())
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&URL_SAFE_NO_PAD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        URL_SAFE_NO_PAD.decode(s).map(Bytes).map_err(serde::de::Error::custom)
    }
}

impl SigningPublicKey {
    pub fn verifying_key(&self) -> Result<ed25519_dalek::VerifyingKey, CryptoError> {
        ed25519_dalek::VerifyingKey::from_bytes(&self.0).map_err(|e| CryptoError::KeyError(e.to_string()))
    }
}

/// Ed25519 key pair.
#[derive(Clone, PartialEq, Eq)]
pub struct SigningKeyPair(ed25519_dalek::SigningKey);

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self(ed25519_dalek::SigningKey::generate(rng))
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn seed(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public(&self) -> SigningPublicKey {
        SigningPublicKey(self.0.verifying_key().to_bytes())
    }

    pub fn sign_bytes(&self, msg: &[u8]) -> Signature {
        Signature(self.0.sign(msg).to_bytes())
    }

    /// Signs the canonical JSON encoding of `value`.
    pub fn sign<T: Serialize + ?Sized>(&self, value: &T) -> Signature {
        self.sign_bytes(&canonical_bytes(value))
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SigningKeyPair").field(&self.public()).finish()
    }
}

impl Serialize for SigningKeyPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&URL_SAFE_NO_PAD.encode(self.seed()))
    }
}

impl<'de> Deserialize<'de> for SigningKeyPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = URL_SAFE_NO_PAD.decode(s).map_err(serde::de::Error::custom)?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| serde::de::Error::custom("signing seed must be 32 bytes"))?;
        Ok(Self::from_seed(seed))
    }
}

pub fn verify_bytes(key: &SigningPublicKey, msg: &[u8], sig: &Signature) -> Result<(), CryptoError> {
    let vk = key.verifying_key()?;
    vk.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig.0)).map_err(|_| CryptoError::BadSignature)
}

/// Verifies a signature made by [`SigningKeyPair::sign`].
pub fn verify<T: Serialize + ?Sized>(key: &SigningPublicKey, value: &T, sig: &Signature) -> Result<(), CryptoError> {
    verify_bytes(key, &canonical_bytes(value), sig)
}

/// X25519 static key pair held by a requester for mediated responses.
#[derive(Clone)]
pub struct EncryptionKeyPair(x25519_dalek::StaticSecret);

impl EncryptionKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self(x25519_dalek::StaticSecret::from(seed))
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(x25519_dalek::StaticSecret::from(bytes))
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public(&self) -> EncryptionPublicKey {
        EncryptionPublicKey(x25519_dalek::PublicKey::from(&self.0).to_bytes())
    }
}

impl fmt::Debug for EncryptionKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("EncryptionKeyPair").field(&self.public()).finish()
    }
}

/// Algorithm identifiers carried with every sealed payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeHeader {
    pub v: u32,
    pub sig: String,
    pub kx: String,
    pub aead: String,
}

impl Default for EnvelopeHeader {
    fn default() -> Self {
        Self { v: 1, sig: "ed25519".into(), kx: "x25519".into(), aead: "aes256gcm".into() }
    }
}

/// Hybrid ciphertext addressed to one X25519 public key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBox {
    pub header: EnvelopeHeader,
    pub sender_eph_pubkey: EncryptionPublicKey,
    pub nonce: AeadNonce,
    pub ciphertext: Bytes,
}

const SEAL_INFO: &[u8] = b"d2/sealed-attestation/v1";

fn agreed_key(shared: &[u8; 32], eph: &EncryptionPublicKey, recipient: &EncryptionPublicKey) -> [u8; 32] {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(&eph.0);
    salt[32..].copy_from_slice(&recipient.0);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(SEAL_INFO, &mut okm).expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

fn seal_aad(header: &EnvelopeHeader, eph: &EncryptionPublicKey) -> Vec<u8> {
    let mut aad = canonical_bytes(header);
    aad.extend_from_slice(&eph.0);
    aad
}

fn check_point(key: &EncryptionPublicKey) -> Result<(), CryptoError> {
    // All-zero (and other low-order) points yield an all-zero shared secret.
    if key.0 == [0u8; 32] {
        return Err(CryptoError::KeyError("low-order X25519 public key".into()));
    }
    Ok(())
}

/// Encrypts `plaintext` so only the holder of `recipient`'s secret can read it.
pub fn seal_to<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    recipient: &EncryptionPublicKey,
    rng: &mut R,
) -> Result<SealedBox, CryptoError> {
    check_point(recipient)?;
    let eph = EncryptionKeyPair::generate(rng);
    let eph_pub = eph.public();
    let shared = eph.0.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.0));
    if !shared.was_contributory() {
        return Err(CryptoError::KeyError("non-contributory key agreement".into()));
    }
    let key = agreed_key(shared.as_bytes(), &eph_pub, recipient);
    let header = EnvelopeHeader::default();
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let cipher = Aes256Gcm::new_from_slice(&key).expect("32-byte key");
    let aad = seal_aad(&header, &eph_pub);
    let ciphertext = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &aad })
        .map_err(|_| CryptoError::KeyError("encryption failed".into()))?;
    Ok(SealedBox { header, sender_eph_pubkey: eph_pub, nonce: AeadNonce(nonce), ciphertext: Bytes(ciphertext) })
}

/// Reverses [`seal_to`]. Any tampering, a wrong key or an unknown algorithm
/// header yields [`CryptoError::DecryptError`].
pub fn open_sealed(sealed: &SealedBox, recipient: &EncryptionKeyPair) -> Result<Vec<u8>, CryptoError> {
    if sealed.header != EnvelopeHeader::default() {
        return Err(CryptoError::DecryptError);
    }
    let shared = recipient.0.diffie_hellman(&x25519_dalek::PublicKey::from(sealed.sender_eph_pubkey.0));
    if !shared.was_contributory() {
        return Err(CryptoError::DecryptError);
    }
    let key = agreed_key(shared.as_bytes(), &sealed.sender_eph_pubkey, &recipient.public());
    let cipher = Aes256Gcm::new_from_slice(&key).expect("32-byte key");
    let aad = seal_aad(&sealed.header, &sealed.sender_eph_pubkey);
    cipher
        .decrypt(Nonce::from_slice(&sealed.nonce.0), Payload { msg: &sealed.ciphertext.0, aad: &aad })
        .map_err(|_| CryptoError::DecryptError)
}

/// Symmetric AES-256-GCM box for data at rest. Layout: `nonce || ciphertext`.
pub fn encrypt_at_rest<R: RngCore>(key: &[u8; 32], aad: &[u8], plaintext: &[u8], rng: &mut R) -> Vec<u8> {
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption of in-memory data");
    let mut out = Vec::with_capacity(12 + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

pub fn decrypt_at_rest(key: &[u8; 32], aad: &[u8], blob: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if blob.len() < 12 + 16 {
        return Err(CryptoError::DecryptError);
    }
    let (nonce, ct) = blob.split_at(12);
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    cipher.decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad }).map_err(|_| CryptoError::DecryptError)
}

/// Argon2id cost parameters for PIN stretching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdfParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
}

impl Default for KdfParams {
    fn default() -> Self {
        Self { m_cost_kib: 19 * 1024, t_cost: 2, p_cost: 1 }
    }
}

impl KdfParams {
    /// Cheap parameters for simulations and tests.
    pub fn fast() -> Self {
        Self { m_cost_kib: 64, t_cost: 1, p_cost: 1 }
    }
}

pub fn derive_pin_key(pin: &str, salt: &[u8], params: KdfParams) -> Result<[u8; 32], CryptoError> {
    let p = argon2::Params::new(params.m_cost_kib, params.t_cost, params.p_cost, Some(32))
        .map_err(|e| CryptoError::KeyError(e.to_string()))?;
    let argon = argon2::Argon2::new(argon2::Algorithm::Argon2id, argon2::Version::V0x13, p);
    let mut key = [0u8; 32];
    argon.hash_password_into(pin.as_bytes(), salt, &mut key).map_err(|e| CryptoError::KeyError(e.to_string()))?;
    Ok(key)
}

/// Salted SHA-256 password digest for seeded provider accounts.
pub fn password_digest(salt: &[u8], password: &str) -> [u8; 32] {
    use sha2::Digest;
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    h.finalize().into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use serde_json::json;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(3)
    }

    #[test]
    fn sign_and_verify_canonical() {
        let kp = SigningKeyPair::generate(&mut rng());
        let sig = kp.sign(&json!({"b": 2, "a": 1}));
        verify(&kp.public(), &json!({"a": 1, "b": 2}), &sig).unwrap();
        assert_eq!(verify(&kp.public(), &json!({"a": 1, "b": 3}), &sig), Err(CryptoError::BadSignature));
    }

    #[test]
    fn seal_roundtrip_and_wrong_key() {
        let mut r = rng();
        let recipient = EncryptionKeyPair::generate(&mut r);
        let other = EncryptionKeyPair::generate(&mut r);
        let sealed = seal_to(b"hello", &recipient.public(), &mut r).unwrap();
        assert_eq!(open_sealed(&sealed, &recipient).unwrap(), b"hello");
        assert_eq!(open_sealed(&sealed, &other), Err(CryptoError::DecryptError));
    }

    #[test]
    fn seal_rejects_zero_key() {
        let err = seal_to(b"x", &EncryptionPublicKey([0; 32]), &mut rng()).unwrap_err();
        assert!(matches!(err, CryptoError::KeyError(_)));
    }

    #[test]
    fn sealed_header_is_bound() {
        let mut r = rng();
        let recipient = EncryptionKeyPair::generate(&mut r);
        let mut sealed = seal_to(b"hello", &recipient.public(), &mut r).unwrap();
        sealed.header.aead = "chacha20poly1305".into();
        assert_eq!(open_sealed(&sealed, &recipient), Err(CryptoError::DecryptError));
        let value = serde_json::to_value(EnvelopeHeader::default()).unwrap();
        assert_eq!(value, json!({"v": 1, "sig": "ed25519", "kx": "x25519", "aead": "aes256gcm"}));
    }

    #[test]
    fn at_rest_roundtrip() {
        let key = [7u8; 32];
        let blob = encrypt_at_rest(&key, b"aad", b"secret", &mut rng());
        assert_eq!(decrypt_at_rest(&key, b"aad", &blob).unwrap(), b"secret");
        assert!(decrypt_at_rest(&[8u8; 32], b"aad", &blob).is_err());
        assert!(decrypt_at_rest(&key, b"other", &blob).is_err());
        assert!(decrypt_at_rest(&key, b"aad", &blob[..10]).is_err());
    }

    #[test]
    fn pin_kdf_is_deterministic() {
        let a = derive_pin_key("1234", b"saltsaltsaltsalt", KdfParams::fast()).unwrap();
        let b = derive_pin_key("1234", b"saltsaltsaltsalt", KdfParams::fast()).unwrap();
        let c = derive_pin_key("1235", b"saltsaltsaltsalt", KdfParams::fast()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn key_decoding_errors() {
        assert!(matches!(SigningPublicKey::from_b64("abc"), Err(CryptoError::KeyError(_))));
        assert!(matches!(EncryptionPublicKey::from_b64("!!"), Err(CryptoError::KeyError(_))));
    }
}
