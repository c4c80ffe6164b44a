//! Invariants over randomly generated values.

mod common;

use std::collections::BTreeMap;

use common::{gen_strategy, Gen};
use d2_core::agent::{evaluate_policy, Action, Policy, PolicyAction, Vault, VaultKey};
use d2_core::canonical::canonical_bytes;
use d2_core::crypto::{open_sealed, seal_to, verify, EncryptionKeyPair, KdfParams};
use d2_core::harness::{derive_seed, username};
use d2_core::model::{decode_d2id, encode_d2id, AgentRow, D2Id, TempD2Id};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{Map, Value};

fn shuffled(v: &Value, rng: &mut ChaCha20Rng) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(&String, &Value)> = m.iter().collect();
            for i in (1..entries.len()).rev() {
                entries.swap(i, rng.gen_range(0..=i));
            }
            let mut out = Map::new();
            for (k, x) in entries {
                out.insert(k.clone(), shuffled(x, rng));
            }
            Value::Object(out)
        }
        Value::Array(xs) => Value::Array(xs.iter().map(|x| shuffled(x, rng)).collect()),
        other => other.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn d2id_encoding_round_trips(mut g in gen_strategy()) {
        let id = g.d2id();
        let s = encode_d2id(&id);
        prop_assert_eq!(s.matches('|').count(), 1);
        prop_assert_eq!(decode_d2id(&s).unwrap(), id.clone());
        let via_serde: D2Id = serde_json::from_value(serde_json::to_value(&id).unwrap()).unwrap();
        prop_assert_eq!(via_serde, id);
    }

    #[test]
    fn temp_ids_parse_what_they_render(mut g in gen_strategy()) {
        let t = g.temp();
        prop_assert_eq!(t.as_str().len(), 22);
        prop_assert_eq!(TempD2Id::parse(t.as_str()).unwrap(), t);
    }

    #[test]
    fn extra_separators_are_rejected(mut g in gen_strategy(), tail in "[a-z]{1,8}") {
        let s = format!("{}|{tail}", encode_d2id(&g.d2id()));
        prop_assert!(decode_d2id(&s).is_err());
    }

    #[test]
    fn canonical_bytes_ignore_key_order(mut g in gen_strategy(), shuffle in any::<u64>()) {
        let v = serde_json::to_value(g.alert()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(shuffle);
        prop_assert_eq!(canonical_bytes(&v), canonical_bytes(&shuffled(&v, &mut rng)));
    }

    #[test]
    fn signatures_survive_reserialization(mut g in gen_strategy()) {
        let key = g.key();
        let att = g.attestation();
        let sig = key.sign(&att);
        let reparsed: Value = serde_json::from_slice(&serde_json::to_vec(&att).unwrap()).unwrap();
        prop_assert!(verify(&key.public(), &reparsed, &sig).is_ok());
    }

    #[test]
    fn sealed_boxes_open_only_intact_and_for_the_recipient(
        mut g in gen_strategy(),
        plain in prop::collection::vec(any::<u8>(), 0..512),
        flip in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let recipient = EncryptionKeyPair::generate(g.rng());
        let other = EncryptionKeyPair::generate(g.rng());
        let sealed = seal_to(&plain, &recipient.public(), g.rng()).unwrap();
        prop_assert_eq!(open_sealed(&sealed, &recipient).unwrap(), plain);
        prop_assert!(open_sealed(&sealed, &other).is_err());
        let mut bad = sealed.clone();
        let i = flip.index(bad.ciphertext.0.len());
        bad.ciphertext.0[i] ^= 1 << bit;
        prop_assert!(open_sealed(&bad, &recipient).is_err());
        let mut cut = sealed;
        cut.ciphertext.0.pop();
        prop_assert!(open_sealed(&cut, &recipient).is_err());
    }

    #[test]
    fn policy_evaluation_is_deterministic_and_stays_within_candidates(mut g in gen_strategy()) {
        let alert = g.alert();
        let mut policies = Vec::new();
        for _ in 0..g.rng().gen_range(0..4) {
            let requester = if g.bool() { "*".to_string() } else { g.url().host() };
            let action = match g.rng().gen_range(0..3) {
                0 => PolicyAction::AutoReject,
                1 => PolicyAction::Ask,
                _ => {
                    let mut preferred = BTreeMap::new();
                    for cap in &alert.wanted {
                        let pick = match alert.candidates.get(cap) {
                            Some(c) if !c.is_empty() && g.bool() => c[g.rng().gen_range(0..c.len())].clone(),
                            _ => g.url(),
                        };
                        preferred.insert(cap.clone(), pick);
                    }
                    PolicyAction::AutoApprove { preferred }
                }
            };
            policies.push(Policy { requester, capabilities: Default::default(), action });
        }
        let first = evaluate_policy(&policies, &alert);
        prop_assert_eq!(&first, &evaluate_policy(&policies, &alert));
        match first {
            Action::Approve(selection) => {
                prop_assert_eq!(selection.len(), alert.wanted.iter().collect::<std::collections::BTreeSet<_>>().len());
                for (cap, issuer) in &selection {
                    prop_assert!(alert.candidates[cap].contains(issuer));
                }
            }
            Action::Reject | Action::Ask => {}
        }
        if policies.is_empty() {
            prop_assert_eq!(evaluate_policy(&policies, &alert), Action::Ask);
        }
    }

    #[test]
    fn derived_seeds_and_usernames_are_stable(seed in any::<u64>(), label in "[a-z_]{1,12}") {
        prop_assert_eq!(derive_seed(seed, &label), derive_seed(seed, &label));
        prop_assert_ne!(derive_seed(seed, &label), derive_seed(seed, &format!("{label}x")));
        let u = username(seed, &label);
        prop_assert_eq!(u.len(), 24);
        prop_assert!(u.chars().all(|c| c.is_ascii_alphanumeric()));
        prop_assert_eq!(u, username(seed, &label));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sealed_vaults_hide_identifiers_and_round_trip(mut g in gen_strategy(), n in 1usize..5) {
        const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
        let mut vault = Vault::default();
        for _ in 0..n {
            let identifier: String = (0..24).map(|_| ALNUM[g.rng().gen_range(0..ALNUM.len())] as char).collect();
            let row = AgentRow { identifier, d2id: g.d2id(), d2vc: g.d2vc() };
            vault.rows.push(row);
        }
        let key = VaultKey::derive("4821", KdfParams::fast(), g.rng()).unwrap();
        let sealed = key.seal(&vault, g.rng());
        let bytes = sealed.to_bytes();
        for row in &vault.rows {
            for needle in [row.identifier.as_str(), row.d2id.did.as_str()] {
                prop_assert!(!bytes.windows(needle.len()).any(|w| w == needle.as_bytes()));
            }
        }
        let back = d2_core::agent::SealedVault::from_bytes(&bytes).unwrap();
        let reopened = VaultKey::for_sealed("4821", &back).unwrap().open(&back).unwrap();
        prop_assert_eq!(reopened, vault);
        prop_assert!(VaultKey::for_sealed("4822", &back).unwrap().open(&back).is_err());
    }
}

#[test]
fn temp_mints_do_not_collide() {
    let mut g = Gen::from_u64(7);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..100_000 {
        assert!(seen.insert(g.temp()));
    }
}
