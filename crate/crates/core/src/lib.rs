//! Decentralized dynamic spectrum access with per-UE deep-Q agents and a
//! model shuffler, plus the PF and DQSA baselines and evaluation metrics.
//!
//! Modules:
//! - [`nnet`]: the two-layer Q network, TD loss and analytic gradient.
//! - [`agent`]: observation encoding, epsilon-greedy, rewards, replay and the
//!   upload/receive protocol.
//! - [`env5g`]: slot-level uplink environment with CQI-driven rates.
//! - [`shuffle`]: model normalization, distance, preferences and matching.
//! - [`baselines`]: proportional fair scheduling and the DQSA reward.
//! - [`metrics`]: utilization, throughput, fairness and the toy game analysis.
//! - [`simctl`]: scenarios, seed streams, the run loop and outputs.

pub mod agent;
pub mod baselines;
pub mod env5g;
pub mod metrics;
pub mod nnet;
pub mod shuffle;
pub mod simctl;

pub use agent::{Action, Agent, AgentConfig};
pub use env5g::{Environment, RbgStatus, SlotOutcome};
pub use nnet::QNetwork;
pub use simctl::{load_scenario, run, RunArtifacts, ScenarioConfig, SimError};
