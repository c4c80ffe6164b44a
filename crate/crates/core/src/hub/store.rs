use std::collections::{BTreeMap, BTreeSet, VecDeque};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, EncryptionPublicKey, SigningPublicKey};
use crate::model::{CapabilityType, D2Id, HubRow, NodeUrl, TempD2Id};
use crate::wire::{AccountId, DiscoveryMode, MediatedQuery, RequestId, SealedGrant, UserAlert};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempState {
    Active,
    Consumed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempEntry {
    pub account_id: AccountId,
    pub d2id: D2Id,
    pub state: TempState,
    /// Handed to a requester inside a direct-mode grant.
    #[serde(default)]
    pub disclosed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendingStage {
    AwaitingUser,
    /// Mediated mode: waiting for sealed issuer answers.
    Collecting {
        selection: BTreeMap<CapabilityType, NodeUrl>,
        collected: BTreeMap<CapabilityType, SealedGrant>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRequest {
    pub requester: NodeUrl,
    pub wanted: Vec<CapabilityType>,
    pub mode: DiscoveryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requester_pubkey: Option<EncryptionPublicKey>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub queries: BTreeMap<CapabilityType, MediatedQuery>,
    pub candidates: BTreeMap<CapabilityType, Vec<NodeUrl>>,
    pub deadline: DateTime<Utc>,
    pub stage: PendingStage,
}

impl PendingRequest {
    pub fn alert(&self, request_id: &RequestId) -> UserAlert {
        UserAlert {
            request_id: request_id.clone(),
            requester: self.requester.clone(),
            wanted: self.wanted.clone(),
            candidates: self.candidates.clone(),
            mode: self.mode,
            deadline: self.deadline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubAccount {
    pub account_id: AccountId,
    pub agent_pubkey: SigningPublicKey,
    pub rows: Vec<HubRow>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub quarantined: BTreeSet<D2Id>,
    #[serde(default)]
    pub inbox: VecDeque<UserAlert>,
    #[serde(default)]
    pub pending: BTreeMap<RequestId, PendingRequest>,
}

impl HubAccount {
    pub fn new(account_id: AccountId, agent_pubkey: SigningPublicKey) -> Self {
        Self {
            account_id,
            agent_pubkey,
            rows: Vec::new(),
            quarantined: BTreeSet::new(),
            inbox: VecDeque::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn row(&self, d2id: &D2Id) -> Option<&HubRow> {
        self.rows.iter().find(|r| &r.d2id == d2id)
    }

    pub fn row_mut(&mut self, d2id: &D2Id) -> Option<&mut HubRow> {
        self.rows.iter_mut().find(|r| &r.d2id == d2id)
    }

    /// Issuers able to answer `cap` right now: the row advertises it and has
    /// a live TempD2Id.
    pub fn candidates_for(&self, cap: &CapabilityType) -> Vec<NodeUrl> {
        let set: BTreeSet<_> = self
            .rows
            .iter()
            .filter(|r| r.temp.is_some() && r.d2vc.supports(cap))
            .map(|r| r.d2vc.issuer().clone())
            .collect();
        set.into_iter().collect()
    }

    /// Row selected for a grant: issued by `issuer`, supports `cap`, live temp.
    pub fn grant_row(&self, cap: &CapabilityType, issuer: &NodeUrl) -> Option<&HubRow> {
        self.rows.iter().find(|r| r.temp.is_some() && r.d2vc.issuer() == issuer && r.d2vc.supports(cap))
    }
}

/// Everything a hub persists.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HubStore {
    pub accounts: BTreeMap<AccountId, HubAccount>,
    pub temp_index: BTreeMap<TempD2Id, TempEntry>,
    pub d2id_index: BTreeMap<D2Id, AccountId>,
}

#[derive(Serialize, Deserialize)]
struct EncryptedStore {
    v: u32,
    aead: String,
    blob: String,
}

const STORE_AAD: &[u8] = b"d2/hub-store/v1";

impl HubStore {
    pub fn insert_row(&mut self, account_id: &AccountId, row: HubRow) {
        self.d2id_index.insert(row.d2id.clone(), account_id.clone());
        if let Some(t) = &row.temp {
            self.temp_index.insert(
                t.clone(),
                TempEntry {
                    account_id: account_id.clone(),
                    d2id: row.d2id.clone(),
                    state: TempState::Active,
                    disclosed: false,
                },
            );
        }
        if let Some(acct) = self.accounts.get_mut(account_id) {
            acct.rows.push(row);
            acct.rows.sort_by(|a, b| a.d2id.cmp(&b.d2id));
        }
    }

    /// Drops every temp index entry (active or consumed) pointing at `d2id`.
    pub fn forget_temps(&mut self, d2id: &D2Id) {
        self.temp_index.retain(|_, e| &e.d2id != d2id);
    }

    pub fn remove_row(&mut self, d2id: &D2Id) -> Option<HubRow> {
        let account_id = self.d2id_index.remove(d2id)?;
        self.forget_temps(d2id);
        let acct = self.accounts.get_mut(&account_id)?;
        acct.quarantined.remove(d2id);
        let pos = acct.rows.iter().position(|r| &r.d2id == d2id)?;
        Some(acct.rows.remove(pos))
    }

    pub fn remove_account(&mut self, account_id: &AccountId) -> Option<HubAccount> {
        let acct = self.accounts.remove(account_id)?;
        for row in &acct.rows {
            self.d2id_index.remove(&row.d2id);
            self.forget_temps(&row.d2id);
        }
        Some(acct)
    }

    /// Pulls the live temp out of a row and marks the row quarantined.
    pub fn quarantine(&mut self, d2id: &D2Id) {
        self.forget_temps(d2id);
        if let Some(account_id) = self.d2id_index.get(d2id).cloned() {
            if let Some(acct) = self.accounts.get_mut(&account_id) {
                if let Some(row) = acct.row_mut(d2id) {
                    row.temp = None;
                }
                acct.quarantined.insert(d2id.clone());
            }
        }
    }

    pub fn find_pending(&self, request_id: &RequestId) -> Option<&AccountId> {
        self.accounts.iter().find(|(_, a)| a.pending.contains_key(request_id)).map(|(id, _)| id)
    }

    /// Checks that both indices mirror the account rows exactly.
    pub fn audit(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut seen_temps = BTreeSet::new();
        let mut row_count = 0usize;
        for (id, acct) in &self.accounts {
            if &acct.account_id != id {
                problems.push(format!("account {id} stored under the wrong key"));
            }
            for row in &acct.rows {
                row_count += 1;
                match self.d2id_index.get(&row.d2id) {
                    Some(owner) if owner == id => {}
                    _ => problems.push(format!("row {} missing from d2id index", row.d2id)),
                }
                if let Some(t) = &row.temp {
                    if !seen_temps.insert(t.clone()) {
                        problems.push(format!("temp {t} shared by two rows"));
                    }
                    match self.temp_index.get(t) {
                        Some(e) if e.state == TempState::Active && e.d2id == row.d2id && &e.account_id == id => {}
                        _ => problems.push(format!("temp {t} of {} not indexed as active", row.d2id)),
                    }
                }
                if acct.quarantined.contains(&row.d2id) && row.temp.is_some() {
                    problems.push(format!("quarantined row {} still has a temp", row.d2id));
                }
            }
            for q in &acct.quarantined {
                if acct.row(q).is_none() {
                    problems.push(format!("quarantine entry {q} has no row"));
                }
            }
        }
        if self.d2id_index.len() != row_count {
            problems.push(format!("d2id index has {} entries for {row_count} rows", self.d2id_index.len()));
        }
        for (t, e) in &self.temp_index {
            let row = self.accounts.get(&e.account_id).and_then(|a| a.row(&e.d2id));
            match (row, e.state) {
                (None, _) => problems.push(format!("temp {t} points at a missing row")),
                (Some(r), TempState::Active) if r.temp.as_ref() != Some(t) => {
                    problems.push(format!("active temp {t} is not the row's temp"))
                }
                (Some(r), TempState::Consumed) if r.temp.is_some() => {
                    problems.push(format!("consumed temp {t} but row {} already rotated", r.d2id))
                }
                _ => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Serialized form, optionally wrapped in AES-256-GCM.
    pub fn to_bytes(&self, key: Option<&[u8; 32]>, rng: &mut impl RngCore) -> Vec<u8> {
        let plain = serde_json::to_vec(self).expect("hub store serializes");
        match key {
            None => plain,
            Some(k) => {
                let blob = crypto::encrypt_at_rest(k, STORE_AAD, &plain, rng);
                serde_json::to_vec(&EncryptedStore {
                    v: 1,
                    aead: "aes256gcm".into(),
                    blob: URL_SAFE_NO_PAD.encode(blob),
                })
                .expect("envelope serializes")
            }
        }
    }

    pub fn from_bytes(bytes: &[u8], key: Option<&[u8; 32]>) -> Result<Self, String> {
        match key {
            None => serde_json::from_slice(bytes).map_err(|e| e.to_string()),
            Some(k) => {
                let env: EncryptedStore = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
                let blob = URL_SAFE_NO_PAD.decode(env.blob).map_err(|e| e.to_string())?;
                let plain = crypto::decrypt_at_rest(k, STORE_AAD, &blob).map_err(|e| e.to_string())?;
                serde_json::from_slice(&plain).map_err(|e| e.to_string())
            }
        }
    }
}
