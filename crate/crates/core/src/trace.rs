//! Audit trace of pool formation, challenge and audit events.
//!
//! One [`TraceEvent`] becomes one line of the JSON-lines trace file.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ids::{MinerId, SubchainId};
use crate::subchain::Phase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    CandidateAdd { owner: MinerId, peer: MinerId, rt: f64 },
    CandidateEvict { owner: MinerId, peer: MinerId, rt: f64 },
    PoolSeed { pool: SubchainId, members: Vec<MinerId> },
    Propose { pool: SubchainId, proposer: MinerId, candidate: MinerId },
    Confirm { pool: SubchainId, candidate: MinerId },
    Reject { pool: SubchainId, rejecter: MinerId, candidate: MinerId },
    PoolEstablished { pool: SubchainId, members: Vec<MinerId>, host: MinerId },
    PoolDemolished { pool: SubchainId, members: Vec<MinerId> },
    Partnership { pools: Vec<SubchainId>, managers: Vec<MinerId>, merged: SubchainId },
    Phase { subchain: SubchainId, at_ms: f64, from: Phase, to: Phase },
    Challenge { issuer: MinerId, subchain: SubchainId, period: u64, subset: usize, accuracy: f64 },
    Audit { subchain: SubchainId, rounds: u64, passed: bool, failed_round: Option<u64> },
    Winner { subchain: SubchainId, median_accuracy: f64 },
}

/// Event sink; a disabled trace drops everything.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    enabled: bool,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn enabled() -> Self {
        Trace { enabled: true, events: Vec::new() }
    }

    pub fn disabled() -> Self {
        Trace::default()
    }

    pub fn record(&mut self, event: TraceEvent) {
        if self.enabled {
            self.events.push(event);
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}
