//! Deterministic core of the PoFLSC subchain consensus simulator.
//!
//! Miners measure response times to each other, form core pools, train a
//! shared model with federated averaging on private shards, value each
//! member's data with Shapley estimators and record every training,
//! challenge and audit event on a hash-chained subchain ledger.
//!
//! The crate is `no_std` (with `alloc`). Everything that touches files,
//! threads or the command line lives in the companion `poflsc` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod error;
pub mod fedavg;
pub mod ids;
pub mod learner;
pub mod ledger;
pub mod pool;
pub mod rng;
pub mod sim;
pub mod subchain;
pub mod topology;
pub mod trace;
pub mod valuation;
pub mod verification;

pub use error::{Error, Result};
pub use ids::{MinerId, Role, SubchainId};
