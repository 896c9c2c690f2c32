//! Hierarchical cloud-edge-device task decomposition for heterogeneous robot
//! fleets.
//!
//! The cloud tier ([`cloud_policy`]) splits a task into phased per-robot
//! policies. The edge tier ([`orchestrator`]) decomposes each policy with a
//! [`planner`], aligns the resulting subtasks against registered [`skills`]
//! by cosine similarity ([`similarity`]) and re-decomposes whatever falls
//! below the threshold. The device tier ([`world`]) executes the grounded
//! instruction sequences. [`protocol`] and [`tiers`] wire the three together
//! over newline-delimited JSON.

pub mod cli;
pub mod cloud_policy;
pub mod config;
pub mod instruction;
pub mod orchestrator;
pub mod planner;
pub mod protocol;
pub mod scenario;
pub mod similarity;
pub mod skills;
pub mod tiers;
pub mod vectorizer;
pub mod world;
