//! State of one subchain: its pool, phase, shared model and ledger.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fedavg::RoundRecord;
use crate::ids::{MinerId, Role, SubchainId};
use crate::learner::ModelParams;
use crate::ledger::{ActivationTransaction, ActivationType, Chain, Hash32, Outcome, SubBlock};

/// Phases a subchain moves through within one block, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Initial,
    Core,
    Secondary,
    Verification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subchain {
    pub id: SubchainId,
    pub members: BTreeSet<MinerId>,
    pub host: MinerId,
    phase: Phase,
    /// Current shared model; `None` until the pool starts training.
    pub model: Option<ModelParams>,
    /// Model the recorded rounds start from (audit replay anchor).
    pub genesis: Option<ModelParams>,
    /// Number of updates applied since genesis; the async round counter.
    pub version: u64,
    pub chain: Chain,
    pending: Vec<ActivationTransaction>,
    last_tx_of: BTreeMap<MinerId, u64>,
    pub records: Vec<RoundRecord>,
    /// Held-out accuracy after each sub-block.
    pub accuracy: Vec<f64>,
    /// Subchains this one was merged from.
    pub parents: Vec<SubchainId>,
}

impl Subchain {
    pub fn new(id: SubchainId, members: BTreeSet<MinerId>, host: MinerId, prev_block_head: Hash32) -> Self {
        Subchain {
            id,
            members,
            host,
            phase: Phase::Initial,
            model: None,
            genesis: None,
            version: 0,
            chain: Chain::new(prev_block_head),
            pending: Vec::new(),
            last_tx_of: BTreeMap::new(),
            records: Vec::new(),
            accuracy: Vec::new(),
            parents: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Moves forward to `to`; never moves backwards. Returns whether the
    /// phase changed.
    pub fn advance_to(&mut self, to: Phase) -> bool {
        if to > self.phase {
            self.phase = to;
            true
        } else {
            false
        }
    }

    /// Installs the starting model and enters the core phase.
    pub fn start_training(&mut self, params: ModelParams) {
        self.genesis = Some(params.clone());
        self.model = Some(params);
        self.version = 0;
        self.records.clear();
        self.advance_to(Phase::Core);
    }

    pub fn model_hash(&self) -> Hash32 {
        self.model.as_ref().map_or([0u8; 32], ModelParams::hash)
    }

    pub fn next_tx_number(&self) -> u64 {
        self.chain.next_tx_number() + self.pending.len() as u64
    }

    pub fn pending(&self) -> &[ActivationTransaction] {
        &self.pending
    }

    /// Queues an activation for the next sub-block. The dependency points
    /// to the previous activation involving the same miner.
    pub fn push_activation(
        &mut self,
        activation_type: ActivationType,
        model_hash: Hash32,
        verifier: (MinerId, Role),
        miner: (MinerId, Role),
        data_id: Hash32,
        outcome: Outcome,
    ) -> u64 {
        let tx_number = self.next_tx_number();
        let prev_dependency = self.last_tx_of.insert(miner.0, tx_number);
        self.pending.push(ActivationTransaction {
            tx_number,
            activation_type,
            chain_id: self.id,
            model_hash,
            verifier,
            miner,
            data_id,
            prev_dependency,
            outcome,
        });
        tx_number
    }

    /// Appends all queued activations as the next sub-block.
    pub fn seal_sub_block(&mut self, transfers: Vec<u8>) -> Result<&SubBlock> {
        let payload = core::mem::take(&mut self.pending);
        self.chain.append_sub_block(payload, transfers)
    }

    /// Copy sharing model state and ledger head, for a split.
    pub fn branch(&self) -> Subchain {
        self.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{verify_chain, ChainStatus};

    #[test]
    fn phases_only_move_forward() {
        let mut s = Subchain::new(SubchainId(0), BTreeSet::new(), MinerId(0), [0; 32]);
        assert!(s.advance_to(Phase::Secondary));
        assert!(!s.advance_to(Phase::Core));
        assert_eq!(s.phase(), Phase::Secondary);
    }

    #[test]
    fn activations_chain_by_miner() {
        let mut s = Subchain::new(SubchainId(2), BTreeSet::new(), MinerId(0), [1; 32]);
        let a = s.push_activation(ActivationType::Training, [0; 32], (MinerId(0), Role::Host), (MinerId(5), Role::Trainer), [0; 32], Outcome::None);
        let b = s.push_activation(ActivationType::Training, [0; 32], (MinerId(0), Role::Host), (MinerId(6), Role::Trainer), [0; 32], Outcome::None);
        s.seal_sub_block(Vec::new()).unwrap();
        let c = s.push_activation(ActivationType::Training, [0; 32], (MinerId(0), Role::Host), (MinerId(5), Role::Trainer), [0; 32], Outcome::None);
        s.seal_sub_block(Vec::new()).unwrap();
        assert_eq!((a, b, c), (0, 1, 2));
        assert_eq!(s.chain.blocks[1].payload[0].prev_dependency, Some(0));
        assert_eq!(s.chain.blocks[0].payload[1].prev_dependency, None);
        assert_eq!(verify_chain(&s.chain), ChainStatus::Ok);
    }
}
