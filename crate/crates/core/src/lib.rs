//! Protocol library and deterministic simulator for a decentralized,
//! stake-routed LLM serving market.

pub mod config;
pub mod credits;
pub mod duel;
pub mod gossip;
pub mod ids;
pub mod ledger;
pub mod node;
pub mod scheduler;
pub mod sim;
pub mod theory;
pub mod validate;

/// Crate version, embedded in every run summary.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
