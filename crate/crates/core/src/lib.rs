//! Trust-aware decentralized multi-agent system: verifiable agent identity on a
//! simulated ledger, commit-then-reveal response exchange with conditional key
//! release, delegation-based service discovery, and a virtual-time harness that
//! decomposes interaction latency into on-chain and off-chain cost.

pub mod agents;
pub mod crypto;
pub mod encoding;
pub mod fabric;
pub mod harness;
pub mod identity;
pub mod ledger;
pub mod protocol;
pub mod sim;
