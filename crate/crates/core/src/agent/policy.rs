//! Automatic answers to hub alerts. Rules are tried in order; the first
//! whose matcher fits decides. No match means ask the user.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use wildmatch::WildMatch;

use crate::model::{CapabilityType, NodeUrl};
use crate::wire::UserAlert;

pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum PolicyAction {
    AutoApprove { preferred: BTreeMap<CapabilityType, NodeUrl> },
    AutoReject,
    Ask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    /// Glob over the requester host, e.g. `*.ads.example`.
    pub requester: String,
    /// The rule applies only if every wanted capability is listed here.
    /// Empty matches any request.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub capabilities: BTreeSet<CapabilityType>,
    #[serde(flatten)]
    pub action: PolicyAction,
}

impl Policy {
    pub fn matches(&self, alert: &UserAlert) -> bool {
        let host_ok = WildMatch::new(&self.requester).matches(&alert.requester.host());
        let caps_ok = self.capabilities.is_empty() || alert.wanted.iter().all(|c| self.capabilities.contains(c));
        host_ok && caps_ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Approve(BTreeMap<CapabilityType, NodeUrl>),
    Reject,
    Ask,
}

pub fn evaluate(policies: &[Policy], alert: &UserAlert) -> Action {
    let Some(rule) = policies.iter().find(|p| p.matches(alert)) else {
        return Action::Ask;
    };
    match &rule.action {
        PolicyAction::AutoReject => Action::Reject,
        PolicyAction::Ask => Action::Ask,
        PolicyAction::AutoApprove { preferred } => {
            let mut selection = BTreeMap::new();
            for cap in &alert.wanted {
                let usable =
                    preferred.get(cap).filter(|issuer| alert.candidates.get(cap).is_some_and(|c| c.contains(issuer)));
                match usable {
                    Some(issuer) => {
                        selection.insert(cap.clone(), issuer.clone());
                    }
                    None => return Action::Ask,
                }
            }
            Action::Approve(selection)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{DiscoveryMode, RequestId};
    use chrono::TimeZone;

    fn url(s: &str) -> NodeUrl {
        NodeUrl::parse(s).unwrap()
    }

    fn alert(requester: &str) -> UserAlert {
        let age = CapabilityType::AgeValidation;
        UserAlert {
            request_id: RequestId("r1".into()),
            requester: url(requester),
            wanted: vec![age.clone()],
            candidates: [(age, vec![url("https://gov.example")])].into(),
            mode: DiscoveryMode::Direct,
            deadline: chrono::Utc.with_ymd_and_hms(2024, 6, 1, 0, 10, 0).unwrap(),
        }
    }

    #[test]
    fn auto_reject_by_host_glob() {
        let rules = vec![Policy {
            requester: "*.ads.example".into(),
            capabilities: BTreeSet::new(),
            action: PolicyAction::AutoReject,
        }];
        assert_eq!(evaluate(&rules, &alert("https://tracker.ads.example")), Action::Reject);
        assert_eq!(evaluate(&rules, &alert("https://bank.example")), Action::Ask);
    }

    #[test]
    fn auto_approve_falls_back_when_preference_unavailable() {
        let age = CapabilityType::AgeValidation;
        let rule = |issuer: &str| Policy {
            requester: "*".into(),
            capabilities: BTreeSet::new(),
            action: PolicyAction::AutoApprove { preferred: [(age.clone(), url(issuer))].into() },
        };
        let a = alert("https://bank.example");
        assert_eq!(
            evaluate(&[rule("https://gov.example")], &a),
            Action::Approve([(age.clone(), url("https://gov.example"))].into())
        );
        assert_eq!(evaluate(&[rule("https://other.example")], &a), Action::Ask);
    }

    #[test]
    fn first_match_wins() {
        let rules = vec![
            Policy { requester: "bank.example".into(), capabilities: BTreeSet::new(), action: PolicyAction::Ask },
            Policy { requester: "*".into(), capabilities: BTreeSet::new(), action: PolicyAction::AutoReject },
        ];
        assert_eq!(evaluate(&rules, &alert("https://bank.example")), Action::Ask);
        assert_eq!(evaluate(&rules, &alert("https://shop.example")), Action::Reject);
    }
}
