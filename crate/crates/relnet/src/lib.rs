//! Discrete-time simulator and control-policy library for reliable,
//! deadline-constrained least-cost packet routing and service-chain delivery
//! over capacitated networks.
//!
//! Packets carry a remaining *lifetime* (slots until their deadline); a
//! packet whose lifetime reaches zero is dropped. Queues are indexed by
//! (node, lifetime), and policies must deliver a target fraction of the
//! offered traffic before expiry at least cost. The crate provides:
//!
//! - the lifetime-queue simulation engine ([`sim`]),
//! - a virtual-network deficit-queue controller with drift-plus-penalty
//!   weights and max-weight scheduling ([`vnet`]),
//! - the randomized flow-matching policy for average-capacity networks
//!   ([`flowmatch`]),
//! - the iterative peak-capacity controller with look-ahead flow matching
//!   and per-frame capacity adaptation ([`rcnc`]),
//! - LP oracles for the delay-constrained stability region and min-cost
//!   flow, plus a backpressure comparison baseline ([`analysis`]),
//! - a dense simplex solver ([`lp`]) and the experiment harness
//!   ([`experiment`]).

pub mod analysis;
pub mod config;
pub mod experiment;
pub mod flowmatch;
pub mod graph;
pub mod lp;
pub mod rcnc;
pub mod rng;
pub mod sim;
pub mod traffic;
pub mod vnet;

pub use config::ExperimentConfig;
pub use graph::{LayeredGraph, NetworkGraph, Scenario, ServiceChain};
pub use sim::{run_simulation, MetricsTrace, Policy, QueueState};
