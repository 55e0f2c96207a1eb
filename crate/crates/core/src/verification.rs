//! Record checking, periodic challenges, audit by replay and candidacy.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fedavg::{replay_round, RoundRecord};
use crate::ids::{MinerId, Role, SubchainId};
use crate::learner::{self, Dataset, ModelParams, Shard};
use crate::ledger::{verify_chain, ActivationTransaction, ActivationType, Chain, ChainStatus, FailReason, Hash32, Outcome};
use crate::rng;
use crate::subchain::Subchain;
use crate::trace::{Trace, TraceEvent};

/// Random subsets of one issuer's shard for one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeSet {
    pub issuer: MinerId,
    pub period: u64,
    /// Dataset indices, each subset ascending.
    pub subsets: Vec<Vec<usize>>,
    /// Subset index each subchain receives.
    pub assignment: BTreeMap<SubchainId, usize>,
}

impl ChallengeSet {
    pub fn subset_for(&self, subchain: SubchainId) -> Option<(usize, &[usize])> {
        let i = *self.assignment.get(&subchain)?;
        Some((i, &self.subsets[i]))
    }
}

/// Which issuers already generated a set in which period.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IssuanceLog {
    issued: BTreeSet<(MinerId, u64)>,
}

impl IssuanceLog {
    pub fn has_issued(&self, issuer: MinerId, period: u64) -> bool {
        self.issued.contains(&(issuer, period))
    }
}

/// Draws `k_subsets` subsets of `subset_size` samples from the issuer's
/// shard and assigns them round-robin to `subchains` in ascending id order.
pub fn generate_challenge(
    log: &mut IssuanceLog,
    shard: &Shard,
    period: u64,
    k_subsets: usize,
    subset_size: usize,
    subchains: &[SubchainId],
    seed: u64,
) -> Result<ChallengeSet> {
    let issuer = shard.owner;
    if log.has_issued(issuer, period) {
        return Err(Error::AlreadyIssued { issuer, period });
    }
    if subset_size > shard.len() {
        return Err(Error::SubsetTooLarge { requested: subset_size, available: shard.len() });
    }
    if k_subsets == 0 {
        return Err(Error::BadParams("a challenge set needs at least one subset".into()));
    }
    let mut stream = rng::stream(seed, &format!("challenge/{period}"), u64::from(issuer.0));
    let subsets = (0..k_subsets)
        .map(|_| {
            let mut s: Vec<usize> = rand::seq::index::sample(&mut stream, shard.len(), subset_size)
                .into_iter()
                .map(|p| shard.indices[p])
                .collect();
            s.sort_unstable();
            s
        })
        .collect();
    let mut targets = subchains.to_vec();
    targets.sort_unstable();
    targets.dedup();
    let assignment = targets.into_iter().enumerate().map(|(i, s)| (s, i % k_subsets)).collect();
    log.issued.insert((issuer, period));
    Ok(ChallengeSet { issuer, period, subsets, assignment })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubchainTally {
    pub challenges_received: u64,
    pub audits_passed: u64,
    pub audits_failed: u64,
    pub challenge_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityTally {
    pub passed: u64,
    pub failed: u64,
}

impl ReliabilityTally {
    /// Pass rate smoothed by one prior pass: starts at 1.0.
    pub fn reliability(&self) -> f64 {
        (self.passed + 1) as f64 / (self.passed + self.failed + 1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerificationState {
    pub subchains: BTreeMap<SubchainId, SubchainTally>,
    pub miners: BTreeMap<MinerId, ReliabilityTally>,
    answered: BTreeSet<(MinerId, SubchainId, u64)>,
}

impl VerificationState {
    pub fn tally(&self, id: SubchainId) -> SubchainTally {
        self.subchains.get(&id).cloned().unwrap_or_default()
    }

    pub fn reliability(&self, miner: MinerId) -> f64 {
        self.miners.get(&miner).map_or(1.0, ReliabilityTally::reliability)
    }
}

/// True once both thresholds are reached (inclusive).
pub fn candidacy_check(tally: &SubchainTally, audits_min: u64, challenges_min: u64) -> bool {
    tally.audits_passed >= audits_min && tally.challenges_received >= challenges_min
}

fn subset_digest(subset: &[usize]) -> Hash32 {
    let mut h = Sha256::new();
    h.update(b"poflsc/challenge");
    for &i in subset {
        h.update((i as u64).to_be_bytes());
    }
    h.finalize().into()
}

/// Evaluates the subchain's current model on a challenge subset and queues
/// a CHALLENGE activation carrying the accuracy.
#[allow(clippy::too_many_arguments)]
pub fn respond_challenge(
    sub: &mut Subchain,
    state: &mut VerificationState,
    issuer: MinerId,
    period: u64,
    subset_index: usize,
    subset: &[usize],
    dataset: &Dataset,
    trace: &mut Trace,
) -> Result<ActivationTransaction> {
    let model = sub.model.as_ref().ok_or(Error::NoModel(sub.id))?;
    if state.answered.contains(&(issuer, sub.id, period)) {
        return Err(Error::AlreadyIssued { issuer, period });
    }
    let accuracy = learner::evaluate_on(model, dataset, subset)?;
    let model_hash = sub.model_hash();
    sub.push_activation(
        ActivationType::Challenge,
        model_hash,
        (issuer, Role::DataContributor),
        (sub.host, Role::Host),
        subset_digest(subset),
        Outcome::Accuracy { value: accuracy },
    );
    state.answered.insert((issuer, sub.id, period));
    let tally = state.subchains.entry(sub.id).or_default();
    tally.challenges_received += 1;
    tally.challenge_accuracies.push(accuracy);
    trace.record(TraceEvent::Challenge { issuer, subchain: sub.id, period, subset: subset_index, accuracy });
    Ok(sub.pending().last().cloned().expect("activation was just queued"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuditOutcome {
    Pass { rounds: u64 },
    Fail { round: u64 },
}

/// Repeats every recorded round from `genesis` and compares hashes. The
/// first round whose input, update or output hash differs is reported.
pub fn audit_replay(genesis: &ModelParams, records: &[RoundRecord], dataset: &Dataset, shards: &[Shard]) -> Result<AuditOutcome> {
    for r in records {
        if let Some(&m) = r.contributors.iter().find(|m| !r.seeds_used.contains_key(m)) {
            return Err(Error::MissingSeeds { round: r.round, miner: m });
        }
    }
    let mut model = genesis.clone();
    for r in records {
        if model.hash() != r.pre_hash {
            return Ok(AuditOutcome::Fail { round: r.round });
        }
        let (next, update_hashes) = replay_round(&model, r, dataset, shards)?;
        model = next;
        if update_hashes != r.update_hashes || model.hash() != r.post_hash {
            return Ok(AuditOutcome::Fail { round: r.round });
        }
    }
    Ok(AuditOutcome::Pass { rounds: records.len() as u64 })
}

/// Audits a subchain's whole history, queues an AUDIT activation and
/// updates tallies. A failed audit lowers the reliability of that round's
/// contributors and earns the subchain no candidacy credit.
pub fn audit_subchain(
    sub: &mut Subchain,
    state: &mut VerificationState,
    auditor: MinerId,
    dataset: &Dataset,
    shards: &[Shard],
    trace: &mut Trace,
) -> Result<AuditOutcome> {
    let genesis = sub.genesis.as_ref().ok_or(Error::NoModel(sub.id))?;
    let outcome = audit_replay(genesis, &sub.records, dataset, shards)?;
    let (ledger_outcome, participants): (Outcome, BTreeSet<MinerId>) = match outcome {
        AuditOutcome::Pass { rounds } => (
            Outcome::AuditPassed { rounds },
            sub.records.iter().flat_map(|r| r.contributors.iter().copied()).collect(),
        ),
        AuditOutcome::Fail { round } => (
            Outcome::AuditFailed { round },
            sub.records.iter().filter(|r| r.round == round).flat_map(|r| r.contributors.iter().copied()).collect(),
        ),
    };
    let mut h = Sha256::new();
    h.update(b"poflsc/audit");
    for r in &sub.records {
        h.update(r.post_hash);
    }
    let model_hash = sub.model_hash();
    sub.push_activation(ActivationType::Audit, model_hash, (auditor, Role::Auditor), (sub.host, Role::Host), h.finalize().into(), ledger_outcome);
    let tally = state.subchains.entry(sub.id).or_default();
    let passed = matches!(outcome, AuditOutcome::Pass { .. });
    if passed {
        tally.audits_passed += 1;
    } else {
        tally.audits_failed += 1;
    }
    for m in participants {
        let t = state.miners.entry(m).or_default();
        if passed {
            t.passed += 1;
        } else {
            t.failed += 1;
        }
    }
    let failed_round = match outcome {
        AuditOutcome::Fail { round } => Some(round),
        AuditOutcome::Pass { .. } => None,
    };
    trace.record(TraceEvent::Audit { subchain: sub.id, rounds: sub.records.len() as u64, passed, failed_round });
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Finding {
    /// Structural failure reported by [`verify_chain`].
    Chain { index: u64, reason: FailReason },
    /// A CHALLENGE or AUDIT activation without its result.
    MissingResult { tx_number: u64 },
}

/// Per-node activity as recorded on the ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTally {
    pub as_miner: u64,
    pub as_verifier: u64,
    pub audits_passed: u64,
    pub audits_failed: u64,
}

impl NodeTally {
    pub fn reliability(&self) -> f64 {
        ReliabilityTally { passed: self.audits_passed, failed: self.audits_failed }.reliability()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeOneReport {
    pub findings: Vec<Finding>,
    pub tallies: BTreeMap<MinerId, NodeTally>,
}

impl TypeOneReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks structure and that every challenge and audit carries a result.
/// Audit outcomes count against the audited host.
pub fn type_one_check(chain: &Chain) -> TypeOneReport {
    let mut report = TypeOneReport::default();
    if let ChainStatus::Fail { index, reason } = verify_chain(chain) {
        report.findings.push(Finding::Chain { index, reason });
    }
    for (_, tx) in chain.transactions() {
        let has_result = match tx.activation_type {
            ActivationType::Training => true,
            ActivationType::Challenge => matches!(tx.outcome, Outcome::Accuracy { .. }),
            ActivationType::Audit => matches!(tx.outcome, Outcome::AuditPassed { .. } | Outcome::AuditFailed { .. }),
        };
        if !has_result {
            report.findings.push(Finding::MissingResult { tx_number: tx.tx_number });
        }
        report.tallies.entry(tx.verifier.0).or_default().as_verifier += 1;
        let node = report.tallies.entry(tx.miner.0).or_default();
        node.as_miner += 1;
        match tx.outcome {
            Outcome::AuditPassed { .. } => node.audits_passed += 1,
            Outcome::AuditFailed { .. } => node.audits_failed += 1,
            _ => {}
        }
    }
    report
}
