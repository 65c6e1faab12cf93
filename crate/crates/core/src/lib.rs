//! Adaptive nudging engine.
//!
//! Weekly in-app item-pair recommendations are assigned by a two-arm
//! Bayesian linear contextual bandit (Normal-Inverse-Gamma posteriors,
//! Thompson sampling), while a fixed pure-control group is held out for a
//! randomized comparison. The crate covers the whole loop: event log,
//! eligibility and context features, the bandit, the pair recommender,
//! experiment orchestration, a synthetic pharmacy population, and the
//! impact analysis suite.

pub mod analysis;
pub mod bandit;
pub mod calendar;
pub mod events;
pub mod features;
pub mod index;
pub mod orchestrator;
pub mod recommender;
pub mod simulator;
pub mod util;
