use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, Bytes, SigningPublicKey};
use crate::model::{CapabilityType, D2Vc, DidToken, ProviderRow, TempD2Id};
use crate::wire::{normalize_address, Predicate};

/// One entry of a provider's `users.json` seed file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSeed {
    pub identifier: String,
    pub password: String,
    pub birthdate: NaiveDate,
    pub address: String,
    pub nationality: String,
    pub capabilities: BTreeSet<CapabilityType>,
}

pub fn load_users(path: &Path) -> std::io::Result<Vec<UserSeed>> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// What the provider knows about the person behind an account. Never leaves
/// the provider except as predicate booleans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub birthdate: NaiveDate,
    pub address: String,
    pub nationality: String,
    pub password_salt: Bytes,
    pub password_hash: Bytes,
}

/// Issued but not yet confirmed by the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingIssue {
    pub did: DidToken,
    pub d2vc: D2Vc,
    pub agent_pubkey: SigningPublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TempStatus {
    /// Current temp is consumed or not installed at the hub.
    pub stale: bool,
    pub disclosed_at: Option<DateTime<Utc>>,
    pub failed_attempts: u32,
    pub retry_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEntry {
    pub attributes: AttributeRecord,
    pub capabilities: BTreeSet<CapabilityType>,
    pub pending: Option<PendingIssue>,
    pub row: Option<ProviderRow>,
    /// Key of the agent that completed registration.
    pub agent_pubkey: Option<SigningPublicKey>,
    #[serde(default)]
    pub temp_status: TempStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProviderStore {
    pub users: BTreeMap<String, UserEntry>,
    /// Live temps only; consumed temps are removed.
    pub temp_index: BTreeMap<TempD2Id, String>,
}

impl ProviderStore {
    pub fn seed(seeds: &[UserSeed], rng: &mut impl RngCore) -> Self {
        let mut store = Self::default();
        for s in seeds {
            let mut salt = vec![0u8; 16];
            rng.fill_bytes(&mut salt);
            let hash = crypto::password_digest(&salt, &s.password);
            store.users.insert(
                s.identifier.clone(),
                UserEntry {
                    attributes: AttributeRecord {
                        birthdate: s.birthdate,
                        address: s.address.clone(),
                        nationality: s.nationality.clone(),
                        password_salt: Bytes(salt),
                        password_hash: Bytes(hash.to_vec()),
                    },
                    capabilities: s.capabilities.clone(),
                    pending: None,
                    row: None,
                    agent_pubkey: None,
                    temp_status: TempStatus::default(),
                },
            );
        }
        store
    }

    pub fn check_password(&self, identifier: &str, password: &str) -> Option<bool> {
        use subtle::ConstantTimeEq;
        let u = self.users.get(identifier)?;
        let digest = crypto::password_digest(&u.attributes.password_salt.0, password);
        Some(bool::from(digest.ct_eq(u.attributes.password_hash.0.as_slice())))
    }

    pub fn rows(&self) -> impl Iterator<Item = &ProviderRow> {
        self.users.values().filter_map(|u| u.row.as_ref())
    }

    pub fn find_by_d2id(&self, d2id: &crate::model::D2Id) -> Option<&str> {
        self.users.iter().find(|(_, u)| u.row.as_ref().is_some_and(|r| &r.d2id == d2id)).map(|(id, _)| id.as_str())
    }

    /// Checks that the temp index mirrors the live row temps.
    pub fn audit(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        for (t, id) in &self.temp_index {
            match self.users.get(id).and_then(|u| u.row.as_ref()) {
                Some(r) if &r.temp == t => {}
                _ => problems.push(format!("temp {t} indexed for {id} but not its row temp")),
            }
        }
        for (id, u) in &self.users {
            if let Some(r) = &u.row {
                let live = self.temp_index.get(&r.temp) == Some(id);
                if live == u.temp_status.stale {
                    problems.push(format!("row {id}: stale flag disagrees with index"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Whole years elapsed from `birth` to `today` (proleptic Gregorian). A
/// 29 February birthday completes its year on 1 March in common years.
pub fn whole_years(birth: NaiveDate, today: NaiveDate) -> i32 {
    let mut years = today.year() - birth.year();
    if (today.month(), today.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    years
}

/// Evaluates a predicate against a record. Only the boolean leaves.
pub fn evaluate(pred: &Predicate, attrs: &AttributeRecord, today: NaiveDate) -> bool {
    match pred {
        Predicate::AgeOver { years } => whole_years(attrs.birthdate, today) >= *years as i32,
        Predicate::AddressMatches { address } => normalize_address(address) == normalize_address(&attrs.address),
        Predicate::NationalityEquals { code } => attrs.nationality.eq_ignore_ascii_case(code),
        Predicate::AuthChallenge { .. } => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    // Independent oracle: count anniversaries one by one.
    fn anniversaries(birth: NaiveDate, today: NaiveDate) -> i32 {
        let mut n = 0;
        loop {
            let y = birth.year() + n + 1;
            let anniv = NaiveDate::from_ymd_opt(y, birth.month(), birth.day()).unwrap_or_else(|| d(y, 3, 1));
            if anniv > today {
                return n;
            }
            n += 1;
        }
    }

    fn attrs(birth: NaiveDate) -> AttributeRecord {
        AttributeRecord {
            birthdate: birth,
            address: "12 Rue de la Paix, 75002 Paris".into(),
            nationality: "FR".into(),
            password_salt: Bytes(vec![]),
            password_hash: Bytes(vec![]),
        }
    }

    #[test]
    fn age_examples() {
        let a = attrs(d(2000, 1, 1));
        let today = d(2024, 6, 1);
        assert_eq!(anniversaries(a.birthdate, today), 24);
        assert!(evaluate(&Predicate::AgeOver { years: 18 }, &a, today));
        assert!(!evaluate(&Predicate::AgeOver { years: 30 }, &a, today));
    }

    #[test]
    fn leap_day_birthdays() {
        let b = d(2004, 2, 29);
        assert_eq!(whole_years(b, d(2022, 2, 28)), 17);
        assert_eq!(whole_years(b, d(2022, 3, 1)), 18);
        assert_eq!(whole_years(b, d(2024, 2, 29)), 20);
    }

    #[test]
    fn whole_years_matches_anniversary_count() {
        let mut day = d(1990, 1, 1);
        let births = [d(1980, 2, 29), d(1999, 12, 31), d(2001, 3, 1), d(1975, 7, 15)];
        while day < d(2030, 1, 1) {
            for b in births.into_iter().filter(|b| *b <= day) {
                assert_eq!(whole_years(b, day), anniversaries(b, day), "{b} -> {day}");
            }
            day += chrono::Duration::days(13);
        }
    }

    #[test]
    fn address_and_nationality() {
        let a = attrs(d(1990, 5, 5));
        let today = d(2024, 1, 1);
        let yes = Predicate::AddressMatches { address: "12 rue de la paix 75002 PARIS".into() };
        let no = Predicate::AddressMatches { address: "13 rue de la paix 75002 paris".into() };
        assert!(evaluate(&yes, &a, today));
        assert!(!evaluate(&no, &a, today));
        assert!(evaluate(&Predicate::NationalityEquals { code: "FR".into() }, &a, today));
        assert!(!evaluate(&Predicate::NationalityEquals { code: "DE".into() }, &a, today));
    }
}
