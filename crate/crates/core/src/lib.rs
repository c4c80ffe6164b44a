//! Privacy-preserving identity discovery.
//!
//! A user keeps accounts at a discovery hub holding only opaque
//! `{TempD2Id, D2Id, D2Vc}` rows. Service providers issue identities,
//! answer minimal-disclosure predicate queries, and bootstrap discovery of a
//! user's other issuers through single-use pseudonyms. The user's agent
//! approves or rejects every disclosure.
//!
//! Nodes are transport agnostic: each implements [`transport::Node`] and
//! talks to others through a [`transport::Transport`]. [`transport::SimNetwork`]
//! runs a whole network in-process with a deterministic transcript;
//! [`harness`] drives scripted scenarios over it.

pub mod agent;
pub mod api;
pub mod canonical;
pub mod clock;
pub mod crypto;
pub mod error;
pub mod harness;
pub mod hub;
pub mod model;
pub mod provider;
pub mod transport;
pub mod trust;
pub mod wire;

pub use agent::{AgentConfig, AgentService, UserAgent};
pub use clock::{Clock, SimClock, SystemClock};
pub use error::{ApiError, ErrorCode};
pub use hub::{HubConfig, HubNode};
pub use model::{AgentRow, CapabilityType, D2Id, D2Vc, DidToken, HubAddress, HubRow, NodeUrl, ProviderRow, TempD2Id};
pub use provider::{ProviderConfig, ProviderNode};
pub use transport::{ApiRequest, Node, SimNetwork, Transport};
pub use trust::TrustRegistry;
