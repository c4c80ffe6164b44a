//! Scripted scenarios over a [`Fabric`](crate::transport::Fabric), with
//! built-in privacy checks and adversarial probes.

pub mod probe;
pub mod runner;
pub mod scenario;

pub use probe::{probe, Finding, ProbeKind, ProbeReport};
pub use runner::{derive_seed, run, run_inproc, username, Network, Plan, Report, RunResult, StepOutcome};
pub use scenario::{Check, NodeSpec, Scenario, ScenarioError, Step, TransportKind};
