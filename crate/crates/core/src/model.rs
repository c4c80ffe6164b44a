//! Identity pointers and capability documents shared by every node role.
//!
//! A [`D2Id`] is a hub address joined to an issuer-minted [`DidToken`]; it is
//! only ever exchanged between the issuer and the hub. Everyone else sees a
//! [`TempD2Id`], a single-use random pseudonym. A [`D2Vc`] advertises what an
//! issuer can attest about the identity and never carries attribute values.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator between the hub address and the DID token in a canonical D2Id.
pub const D2ID_SEPARATOR: char = '|';

/// Prefix of every DID token minted by a provider.
pub const DID_PREFIX: &str = "did:d2:";

/// Length of the base58 body of a DID token (128 bits).
pub const DID_BODY_LEN: usize = 22;

/// Length of a base64url TempD2Id (128 bits, no padding).
pub const TEMP_LEN: usize = 22;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("malformed D2Id: {0}")]
    MalformedD2Id(String),
    #[error("invalid node URL `{0}`")]
    InvalidUrl(String),
    #[error("invalid DID token `{0}`")]
    InvalidDid(String),
    #[error("invalid TempD2Id `{0}`")]
    InvalidTemp(String),
    #[error("a D2Vc must list at least one capability")]
    EmptyCapabilities,
}

fn parse_node_url(s: &str) -> Result<(), ModelError> {
    let bad = || ModelError::InvalidUrl(s.to_string());
    if s.is_empty() || s.contains(D2ID_SEPARATOR) || s.ends_with('/') {
        return Err(bad());
    }
    if s.chars().any(char::is_whitespace) {
        return Err(bad());
    }
    let url = url::Url::parse(s).map_err(|_| bad())?;
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
        return Err(bad());
    }
    if url.query().is_some() || url.fragment().is_some() {
        return Err(bad());
    }
    Ok(())
}

/// Absolute base URL of a node (provider, requester or hub).
///
/// Stored exactly as given; must not end with `/` and never contains the
/// D2Id separator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeUrl(String);

impl NodeUrl {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        parse_node_url(s)?;
        Ok(Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Host component, used for policy pattern matching.
    pub fn host(&self) -> String {
        url::Url::parse(&self.0).ok().and_then(|u| u.host_str().map(str::to_string)).unwrap_or_default()
    }
}

impl TryFrom<String> for NodeUrl {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        parse_node_url(&s)?;
        Ok(Self(s))
    }
}

impl From<NodeUrl> for String {
    fn from(u: NodeUrl) -> Self {
        u.0
    }
}

impl FromStr for NodeUrl {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for NodeUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Discoverable address of a hub.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HubAddress(NodeUrl);

impl HubAddress {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        NodeUrl::parse(s).map(Self)
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    pub fn url(&self) -> &NodeUrl {
        &self.0
    }
}

impl From<NodeUrl> for HubAddress {
    fn from(u: NodeUrl) -> Self {
        Self(u)
    }
}

impl FromStr for HubAddress {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for HubAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

const BASE58_ALPHABET: &[u8] = b"123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz";

fn check_did(s: &str) -> Result<(), ModelError> {
    let body = s.strip_prefix(DID_PREFIX).ok_or_else(|| ModelError::InvalidDid(s.to_string()))?;
    let alphabet_ok = body.len() == DID_BODY_LEN && body.bytes().all(|b| BASE58_ALPHABET.contains(&b));
    if !alphabet_ok {
        return Err(ModelError::InvalidDid(s.to_string()));
    }
    // 22 base58 digits can exceed 128 bits; reject those.
    match bs58::decode(body).into_vec() {
        Ok(bytes) if significant_len(&bytes) <= 16 => Ok(()),
        _ => Err(ModelError::InvalidDid(s.to_string())),
    }
}

fn significant_len(bytes: &[u8]) -> usize {
    bytes.iter().skip_while(|b| **b == 0).count()
}

/// Opaque `did:d2:` token minted by an issuing provider.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DidToken(String);

impl DidToken {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        check_did(s)?;
        Ok(Self(s.to_string()))
    }

    /// Mints a fresh token from 128 random bits.
    pub fn mint(rng: &mut impl RngCore) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        let body = bs58::encode(bytes).into_string();
        // Leading '1' is the zero digit; padding keeps the numeric value.
        let padded = format!("{:1>width$}", body, width = DID_BODY_LEN);
        Self(format!("{DID_PREFIX}{padded}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DidToken {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        check_did(&s)?;
        Ok(Self(s))
    }
}

impl From<DidToken> for String {
    fn from(d: DidToken) -> Self {
        d.0
    }
}

impl fmt::Display for DidToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Globally resolvable identity pointer: `<hub>|<did>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct D2Id {
    pub hub: HubAddress,
    pub did: DidToken,
}

impl D2Id {
    pub fn new(hub: HubAddress, did: DidToken) -> Self {
        Self { hub, did }
    }

    pub fn encode(&self) -> String {
        encode_d2id(self)
    }
}

pub fn encode_d2id(d2id: &D2Id) -> String {
    format!("{}{}{}", d2id.hub.as_str(), D2ID_SEPARATOR, d2id.did.as_str())
}

pub fn decode_d2id(s: &str) -> Result<D2Id, ModelError> {
    let malformed = |why: &str| ModelError::MalformedD2Id(format!("{why}: {s:?}"));
    let mut parts = s.split(D2ID_SEPARATOR);
    let (hub, did) = match (parts.next(), parts.next(), parts.next()) {
        (Some(hub), Some(did), None) => (hub, did),
        (_, None, _) => return Err(malformed("missing separator")),
        _ => return Err(malformed("multiple separators")),
    };
    let hub = HubAddress::parse(hub).map_err(|e| malformed(&e.to_string()))?;
    let did = DidToken::parse(did).map_err(|e| malformed(&e.to_string()))?;
    Ok(D2Id { hub, did })
}

impl TryFrom<String> for D2Id {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        decode_d2id(&s)
    }
}

impl From<D2Id> for String {
    fn from(d: D2Id) -> Self {
        encode_d2id(&d)
    }
}

impl FromStr for D2Id {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        decode_d2id(s)
    }
}

impl fmt::Display for D2Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&encode_d2id(self))
    }
}

fn check_temp(s: &str) -> Result<(), ModelError> {
    let ok = s.len() == TEMP_LEN
        && matches!(URL_SAFE_NO_PAD.decode(s), Ok(bytes) if bytes.len() == 16)
        // Only canonical encodings: the last char must carry no stray bits.
        && URL_SAFE_NO_PAD.encode(URL_SAFE_NO_PAD.decode(s).unwrap_or_default()) == s;
    if ok {
        Ok(())
    } else {
        Err(ModelError::InvalidTemp(s.to_string()))
    }
}

/// Single-use random pseudonym shared in place of a D2Id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TempD2Id(String);

impl TempD2Id {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        check_temp(s)?;
        Ok(Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Mints 128 random bits as a TempD2Id. Hub-level uniqueness is checked on
/// insert, not here.
pub fn mint_temp_d2id(rng: &mut impl RngCore) -> TempD2Id {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    TempD2Id(URL_SAFE_NO_PAD.encode(bytes))
}

impl TryFrom<String> for TempD2Id {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        check_temp(&s)?;
        Ok(Self(s))
    }
}

impl From<TempD2Id> for String {
    fn from(t: TempD2Id) -> Self {
        t.0
    }
}

impl fmt::Display for TempD2Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Something an issuer can attest about an identity.
///
/// Unknown tags are kept verbatim so newer capability names survive a
/// round trip through older nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum CapabilityType {
    Authentication,
    AgeValidation,
    AddressValidation,
    ProofOfNationality,
    Other(String),
}

impl CapabilityType {
    pub fn as_str(&self) -> &str {
        match self {
            Self::Authentication => "Authentication",
            Self::AgeValidation => "Age Validation",
            Self::AddressValidation => "Address Validation",
            Self::ProofOfNationality => "Proof of Nationality",
            Self::Other(s) => s,
        }
    }
}

impl From<String> for CapabilityType {
    fn from(s: String) -> Self {
        match s.as_str() {
            "Authentication" => Self::Authentication,
            "Age Validation" => Self::AgeValidation,
            "Address Validation" => Self::AddressValidation,
            "Proof of Nationality" => Self::ProofOfNationality,
            _ => Self::Other(s),
        }
    }
}

impl From<&str> for CapabilityType {
    fn from(s: &str) -> Self {
        Self::from(s.to_string())
    }
}

impl From<CapabilityType> for String {
    fn from(c: CapabilityType) -> Self {
        match c {
            CapabilityType::Other(s) => s,
            known => known.as_str().to_string(),
        }
    }
}

impl fmt::Display for CapabilityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct D2VcRepr {
    issuer: NodeUrl,
    types: BTreeSet<CapabilityType>,
}

/// Claim-free capability document: who issued the identity and what it can
/// attest. There is deliberately no place for attribute values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "D2VcRepr")]
pub struct D2Vc {
    issuer: NodeUrl,
    types: BTreeSet<CapabilityType>,
}

impl D2Vc {
    pub fn new(issuer: NodeUrl, types: impl IntoIterator<Item = CapabilityType>) -> Result<Self, ModelError> {
        let types: BTreeSet<_> = types.into_iter().collect();
        if types.is_empty() {
            return Err(ModelError::EmptyCapabilities);
        }
        Ok(Self { issuer, types })
    }

    pub fn issuer(&self) -> &NodeUrl {
        &self.issuer
    }

    pub fn types(&self) -> &BTreeSet<CapabilityType> {
        &self.types
    }

    pub fn supports(&self, cap: &CapabilityType) -> bool {
        self.types.contains(cap)
    }
}

impl TryFrom<D2VcRepr> for D2Vc {
    type Error = ModelError;
    fn try_from(r: D2VcRepr) -> Result<Self, Self::Error> {
        D2Vc::new(r.issuer, r.types)
    }
}

/// One identity as the hub sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubRow {
    /// Absent between consumption (or registration) and the next rotation.
    pub temp: Option<TempD2Id>,
    pub d2id: D2Id,
    pub d2vc: D2Vc,
}

/// One identity as its issuing provider sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRow {
    pub identifier: String,
    pub temp: TempD2Id,
    pub d2id: D2Id,
    pub d2vc: D2Vc,
}

/// One identity as the user's agent sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRow {
    pub identifier: String,
    pub d2id: D2Id,
    pub d2vc: D2Vc,
}
