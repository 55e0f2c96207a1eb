//! Discrete-event simulation of one block.
//!
//! Phase 1 (pool formation) takes no simulated time. Every sub-block then
//! runs one global round per active subchain: members upload in the order
//! their scheduled work finishes, the host closes the round, data
//! contributors challenge, an auditor replays the history and the host
//! seals a sub-block. After `core_rounds` sub-blocks the pool managers form
//! partnerships, partnered subchains merge and training turns
//! asynchronous. Subchains that collect enough audits and challenges enter
//! verification, and the candidate with the best median challenge accuracy
//! wins the block.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::fedavg::{run_global_round, TrainingContext};
use crate::ids::{MinerId, SubchainId};
use crate::learner::{self, Architecture, Dataset, ModelParams, Shard};
use crate::ledger::{select_winner, sha256, Chain, Hash32};
use crate::pool::{build_all_lists, form_core_pools, form_partnerships, select_host, split_merge};
use crate::rng;
use crate::subchain::{Phase, Subchain};
use crate::topology::{gen_response_matrix, MinerProfile, ResponseTimeMatrix, Topology};
use crate::trace::{Trace, TraceEvent};
use crate::valuation::{
    exact_shapley, g_shapley, loo_values, pool_shrink_experiment, reservation_order, tmc_shapley, Estimator,
    FederatedValue, GShapleyParams, Memoized, ReservationOrder, ShapleyReport, TmcParams,
};
use crate::verification::{
    audit_subchain, candidacy_check, generate_challenge, respond_challenge, IssuanceLog, VerificationState,
};

/// Uploads land in the first part of a sub-block; the rest is reserved for
/// closing the round, challenges, audits and sealing, in that order.
const UPLOAD_WINDOW: f64 = 0.7;
const CLOSE_AT: f64 = 0.8;
const CHALLENGE_AT: f64 = 0.85;
const AUDIT_AT: f64 = 0.9;
const SEAL_AT: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Upload,
    RoundClose,
    Challenge,
    Audit,
    Seal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub at: f64,
    pub actor: MinerId,
    pub kind: EventKind,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
struct Queued {
    event: EventRecord,
    seq: u64,
}

impl Queued {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.event
            .at
            .total_cmp(&other.event.at)
            .then(self.event.actor.cmp(&other.event.actor))
            .then(self.event.kind.cmp(&other.event.kind))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp_key(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

/// Pops events in `(at, actor, kind)` order; equal keys in insertion order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Queued>>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue::default()
    }

    pub fn push(&mut self, event: EventRecord) {
        self.heap.push(Reverse(Queued { event, seq: self.seq }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<EventRecord> {
        self.heap.pop().map(|Reverse(q)| q.event)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub now: f64,
    pub sub_block_time: f64,
}

impl SimClock {
    pub fn sub_block_index(&self) -> u64 {
        libm::floor(self.now / self.sub_block_time) as u64
    }
}

fn subchain_payload(id: SubchainId) -> Vec<u8> {
    id.0.to_be_bytes().to_vec()
}

fn payload_subchain(payload: &[u8]) -> SubchainId {
    let mut b = [0u8; 4];
    b.copy_from_slice(&payload[..4]);
    SubchainId(u32::from_be_bytes(b))
}

/// A miner's subchains by SV descending (ties to the lower id), cut at the
/// first one whose round time no longer fits in `capacity`.
pub fn schedule_subchains(
    sv_by_subchain: &BTreeMap<SubchainId, f64>,
    round_time: &BTreeMap<SubchainId, f64>,
    capacity: f64,
) -> Vec<SubchainId> {
    let mut ranked: Vec<(SubchainId, f64)> = sv_by_subchain.iter().map(|(&s, &v)| (s, v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut used = 0.0;
    let mut out = Vec::new();
    for (s, _) in ranked {
        let Some(&t) = round_time.get(&s) else { continue };
        if used + t > capacity {
            break;
        }
        used += t;
        out.push(s);
    }
    out
}

/// Enters verification once the subchain is a candidate and its latest
/// accuracy reaches `floor`. Only a secondary-phase subchain moves.
pub fn advance_phase(sub: &mut Subchain, state: &VerificationState, config: &ScenarioConfig) -> Phase {
    if sub.phase() == Phase::Secondary {
        let tally = state.tally(sub.id);
        let qualified = sub.accuracy.last().is_some_and(|&a| a >= config.qualification_floor);
        if qualified && candidacy_check(&tally, config.audits_min, config.challenges_min) {
            sub.advance_to(Phase::Verification);
        }
    }
    sub.phase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub id: SubchainId,
    pub members: Vec<MinerId>,
    pub host: MinerId,
}

/// Everything phase 1 produces, plus the data the block trains on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ScenarioConfig,
    pub topology: Topology,
    /// Compute time of one local epoch per miner, ms.
    pub epoch_ms: Vec<f64>,
    pub profiles: Vec<MinerProfile>,
    pub dataset: Dataset,
    pub holdout: Vec<usize>,
    pub shards: Vec<Shard>,
    pub params0: ModelParams,
    pub pools: Vec<PoolSummary>,
    pub trace: Trace,
}

impl Prepared {
    /// Response time `a` measures to `b`: network time plus `a`'s own
    /// local training time.
    pub fn effective_rt(&self, a: MinerId, b: MinerId) -> f64 {
        self.topology.matrix().between(a, b) + f64::from(self.config.local_epochs) * self.epoch_ms[a.index()]
    }

    pub fn pool(&self, id: SubchainId) -> Option<&PoolSummary> {
        self.pools.iter().find(|p| p.id == id)
    }

    /// The pool the valuation experiments run on: the lowest id.
    pub fn demonstration_pool(&self) -> &PoolSummary {
        &self.pools[0]
    }

    pub fn value_function(&self, pool: SubchainId) -> FederatedValue<'_> {
        FederatedValue {
            dataset: &self.dataset,
            shards: &self.shards,
            holdout: &self.holdout,
            params0: self.params0.clone(),
            rounds: self.config.value_rounds,
            local_epochs: self.config.local_epochs,
            learning_rate: self.config.learning_rate,
            seed: rng::derive_seed(self.config.master_seed, "value", u64::from(pool.0)),
        }
    }

    pub fn tmc_params(&self, pool: SubchainId) -> TmcParams {
        TmcParams {
            truncation_tol: self.config.truncation_tol,
            permutations: self.config.permutations,
            seed: rng::derive_seed(self.config.master_seed, "permutations", u64::from(pool.0)),
        }
    }

    pub fn g_shapley_params(&self, pool: SubchainId) -> GShapleyParams<'_> {
        GShapleyParams {
            params0: &self.params0,
            dataset: &self.dataset,
            shards: &self.shards,
            holdout: &self.holdout,
            learning_rate: self.config.learning_rate,
            permutations: self.config.permutations,
            seed: rng::derive_seed(self.config.master_seed, "permutations", u64::from(pool.0)),
        }
    }
}

/// Synthetic dataset described by the config.
pub fn synth_from_config(config: &ScenarioConfig) -> Result<Dataset> {
    let d = &config.dataset;
    if d.uses_idx() {
        return Err(Error::ConfigInvalid { field: "dataset", reason: String::from("IDX input must be loaded by the caller") });
    }
    learner::synth_dataset(
        d.classes,
        d.per_class,
        d.dim,
        d.separation,
        rng::derive_seed(config.master_seed, "dataset", 0),
    )
}

/// Inputs loaded from files that replace generated ones.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<Dataset>,
    pub matrix: Option<ResponseTimeMatrix>,
}

/// Validates the config, builds data and topology and forms core pools.
pub fn prepare(config: &ScenarioConfig, overrides: Overrides, trace: Trace) -> Result<Prepared> {
    config.validate()?;
    let seed = config.master_seed;
    let dataset = match overrides.dataset {
        Some(ds) => ds,
        None => synth_from_config(config)?,
    };
    let (holdout, train) = learner::holdout_split(dataset.len(), config.holdout_fraction, rng::derive_seed(seed, "holdout", 0));
    let shards = learner::shard_pool(&train, config.miner_count, config.samples_per_miner, rng::derive_seed(seed, "shards", 0))
        .map_err(|e| Error::ConfigInvalid { field: "dataset", reason: format!("{e}") })?;
    let arch = match config.hidden {
        None => Architecture::Logistic { inputs: dataset.dim(), classes: dataset.classes() },
        Some(hidden) => Architecture::Mlp { inputs: dataset.dim(), hidden, classes: dataset.classes() },
    };
    let params0 = ModelParams::init(arch, rng::derive_seed(seed, "init", 0));

    let matrix = match overrides.matrix {
        Some(m) if m.len() != config.miner_count => {
            return Err(Error::ConfigInvalid {
                field: "response_matrix",
                reason: format!("matrix covers {} miners, config has {}", m.len(), config.miner_count),
            })
        }
        Some(m) => m,
        None => gen_response_matrix(config.miner_count, config.rt_mean, config.rt_std, seed)?,
    };
    let topology = Topology::new(matrix);
    let epoch_ms = (0..config.miner_count as u64)
        .map(|m| rng::normal(&mut rng::stream(seed, "epoch-time", m), config.epoch_ms_mean, config.epoch_ms_std).max(0.0))
        .collect();
    let profiles = topology.miners().map(MinerProfile::new).collect();

    let mut prep = Prepared {
        config: config.clone(),
        topology,
        epoch_ms,
        profiles,
        dataset,
        holdout,
        shards,
        params0,
        pools: Vec::new(),
        trace,
    };
    let miners: Vec<MinerId> = prep.topology.miners().collect();
    let mut trace = core::mem::take(&mut prep.trace);
    let lists = build_all_lists(
        &miners,
        |a, b| prep.topology.sees(a, b),
        |a, b| prep.effective_rt(a, b),
        config.sub_block_time,
        &mut trace,
    );
    let pools = form_core_pools(&lists, config.core_pool_threshold, config.pool_size_cap, 0, &mut trace);
    if pools.is_empty() {
        return Err(Error::NoPoolFormed);
    }
    for (id, members) in pools {
        let host = select_host(&members, &prep.profiles, prep.topology.matrix());
        trace.record(TraceEvent::PoolEstablished { pool: id, members: members.iter().copied().collect(), host });
        prep.pools.push(PoolSummary { id, members: members.into_iter().collect(), host });
    }
    prep.trace = trace;
    Ok(prep)
}

/// Source of Monte Carlo Shapley estimates. Implementations may spread
/// permutations over threads but must return the sequential result.
pub trait Valuator {
    fn tmc(&self, members: &[MinerId], v: &FederatedValue<'_>, params: &TmcParams) -> Result<ShapleyReport>;
    fn g_shapley(&self, members: &[MinerId], params: &GShapleyParams<'_>) -> Result<ShapleyReport>;
}

/// Single-threaded estimator with a coalition cache.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Valuator for Sequential {
    fn tmc(&self, members: &[MinerId], v: &FederatedValue<'_>, params: &TmcParams) -> Result<ShapleyReport> {
        let memo = Memoized::new(v.clone());
        tmc_shapley(members, &memo, params)
    }

    fn g_shapley(&self, members: &[MinerId], params: &GShapleyParams<'_>) -> Result<ShapleyReport> {
        g_shapley(members, params)
    }
}

/// Values every member of `pool` with `estimator`.
pub fn valuate_pool(prep: &Prepared, pool: &PoolSummary, estimator: Estimator, valuator: &dyn Valuator) -> Result<ShapleyReport> {
    let v = prep.value_function(pool.id);
    match estimator {
        Estimator::Loo => Ok(ShapleyReport::point(Estimator::Loo, &loo_values(&pool.members, &Memoized::new(v)))),
        Estimator::Exact => Ok(ShapleyReport::point(Estimator::Exact, &exact_shapley(&pool.members, &Memoized::new(v))?)),
        Estimator::Tmc => valuator.tmc(&pool.members, &v, &prep.tmc_params(pool.id)),
        Estimator::GShapley => valuator.g_shapley(&pool.members, &prep.g_shapley_params(pool.id)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkPoint {
    pub size: usize,
    pub descending: f64,
    pub ascending: f64,
}

/// Accuracy at 60% of the pool under both orders, read both as absolute
/// accuracy and as a drop relative to the full pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SixtyPercent {
    pub size: usize,
    pub full: f64,
    pub descending: f64,
    pub ascending: f64,
    pub descending_relative_drop: f64,
    pub ascending_relative_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkCurve {
    pub estimator: Estimator,
    /// Pool size from full down to 1.
    pub points: Vec<ShrinkPoint>,
    /// Trapezoid area over sizes 1..n.
    pub auc_descending: f64,
    pub auc_ascending: f64,
    /// Fraction of sizes `2..=n` where descending ≥ ascending.
    pub dominance: f64,
    pub sixty_percent: SixtyPercent,
}

fn trapezoid(values_by_size: &[f64]) -> f64 {
    values_by_size.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum()
}

/// Shrinks the pool along both reservation orders of `report`.
pub fn shrink_curve(prep: &Prepared, pool: &PoolSummary, report: &ShapleyReport) -> ShrinkCurve {
    let v = Memoized::new(prep.value_function(pool.id));
    let desc = pool_shrink_experiment(&reservation_order(report, ReservationOrder::Descending), &v);
    let asc = pool_shrink_experiment(&reservation_order(report, ReservationOrder::Ascending), &v);
    let points: Vec<ShrinkPoint> = desc
        .iter()
        .zip(&asc)
        .map(|(&(size, d), &(_, a))| ShrinkPoint { size, descending: d, ascending: a })
        .collect();
    let by_size = |f: fn(&ShrinkPoint) -> f64| -> Vec<f64> { points.iter().rev().map(f).collect() };
    let auc_descending = trapezoid(&by_size(|p| p.descending));
    let auc_ascending = trapezoid(&by_size(|p| p.ascending));
    let contested: Vec<&ShrinkPoint> = points.iter().filter(|p| p.size >= 2).collect();
    let dominance = if contested.is_empty() {
        1.0
    } else {
        contested.iter().filter(|p| p.descending >= p.ascending).count() as f64 / contested.len() as f64
    };
    let n = points.len();
    let size = (libm::round(0.6 * n as f64) as usize).clamp(1, n.max(1));
    let at = points.iter().find(|p| p.size == size).copied().unwrap_or(ShrinkPoint { size, descending: 0.0, ascending: 0.0 });
    let full = points.first().map_or(0.0, |p| p.descending);
    let drop = |x: f64| if full > 0.0 { (full - x) / full } else { 0.0 };
    ShrinkCurve {
        estimator: report.estimator,
        points,
        auc_descending,
        auc_ascending,
        dominance,
        sixty_percent: SixtyPercent {
            size,
            full,
            descending: at.descending,
            ascending: at.ascending,
            descending_relative_drop: drop(at.descending),
            ascending_relative_drop: drop(at.ascending),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerDigest {
    pub sub_blocks: usize,
    pub transactions: u64,
    pub head: String,
}

impl LedgerDigest {
    pub fn of(chain: &Chain) -> Self {
        LedgerDigest {
            sub_blocks: chain.len(),
            transactions: chain.transaction_count(),
            head: hex::encode(chain.head()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubchainSummary {
    pub id: SubchainId,
    pub parents: Vec<SubchainId>,
    pub members: Vec<MinerId>,
    pub host: MinerId,
    pub phase: Phase,
    /// True once merged into a partnership subchain.
    pub retired: bool,
    /// Held-out accuracy after each sub-block.
    pub accuracy: Vec<f64>,
    pub challenges_received: u64,
    pub challenge_accuracies: Vec<f64>,
    pub audits_passed: u64,
    pub audits_failed: u64,
    pub ledger: LedgerDigest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinnerSummary {
    pub subchain: SubchainId,
    pub median_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: ScenarioConfig,
    pub pools: Vec<PoolSummary>,
    pub demonstration_pool: SubchainId,
    pub shapley: Vec<ShapleyReport>,
    /// Demonstration pool members in the configured reservation order.
    pub reservation: Vec<MinerId>,
    pub shrink: Vec<ShrinkCurve>,
    pub subchains: Vec<SubchainSummary>,
    pub winner: Option<WinnerSummary>,
    /// Reliability of every miner touched by an audit.
    pub reliability: BTreeMap<MinerId, f64>,
    /// Largest per-sub-block work any miner was scheduled for, ms.
    pub max_scheduled_load_ms: f64,
}

/// Report plus the artefacts it summarises.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    /// Every subchain, retired parents included, ascending id.
    pub subchains: Vec<Subchain>,
    pub dataset: Dataset,
    pub shards: Vec<Shard>,
    pub holdout: Vec<usize>,
    pub trace: Vec<TraceEvent>,
}

impl ScenarioOutcome {
    pub fn subchain(&self, id: SubchainId) -> Option<&Subchain> {
        self.subchains.iter().find(|s| s.id == id)
    }

    /// The chain written as the block record: the winner's, else the
    /// lowest-id active subchain's.
    pub fn primary_chain(&self) -> &Chain {
        let id = self.report.winner.map(|w| w.subchain).unwrap_or_else(|| {
            self.report.subchains.iter().find(|s| !s.retired).map_or(self.subchains[0].id, |s| s.id)
        });
        &self.subchain(id).expect("winner exists").chain
    }
}

/// Runs one block on the configured synthetic dataset.
pub fn run_block(config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    run_block_with(config, Overrides::default(), &Sequential)
}

pub fn run_block_with(config: &ScenarioConfig, overrides: Overrides, valuator: &dyn Valuator) -> Result<ScenarioOutcome> {
    let prep = prepare(config, overrides, Trace::enabled())?;
    let mut sv: BTreeMap<SubchainId, BTreeMap<MinerId, f64>> = BTreeMap::new();
    let mut demo_reports = Vec::new();
    for pool in &prep.pools {
        let report = valuate_pool(&prep, pool, config.sv_estimator, valuator)?;
        sv.insert(pool.id, report.values.iter().map(|v| (v.miner, v.mean)).collect());
        if pool.id == prep.demonstration_pool().id {
            demo_reports.push(report);
        }
    }
    let demo = prep.demonstration_pool().clone();
    for &e in config.estimators().iter().skip(1) {
        demo_reports.push(valuate_pool(&prep, &demo, e, valuator)?);
    }
    let shrink = demo_reports.iter().map(|r| shrink_curve(&prep, &demo, r)).collect();
    let reservation = reservation_order(&demo_reports[0], config.reservation_order);

    let mut block = Block::new(prep, sv);
    block.run()?;
    block.finish(demo.id, demo_reports, reservation, shrink)
}

struct Block {
    prep: Prepared,
    sv: BTreeMap<SubchainId, BTreeMap<MinerId, f64>>,
    active: BTreeMap<SubchainId, Subchain>,
    retired: Vec<Subchain>,
    state: VerificationState,
    issuance: IssuanceLog,
    trace: Trace,
    max_load: f64,
}

impl Block {
    fn new(mut prep: Prepared, sv: BTreeMap<SubchainId, BTreeMap<MinerId, f64>>) -> Self {
        let trace = core::mem::take(&mut prep.trace);
        let head = genesis_head(prep.config.master_seed);
        let mut active = BTreeMap::new();
        for pool in &prep.pools {
            let mut sub = Subchain::new(pool.id, pool.members.iter().copied().collect(), pool.host, head);
            sub.start_training(prep.params0.clone());
            active.insert(pool.id, sub);
        }
        let mut block = Block {
            prep,
            sv,
            active,
            retired: Vec::new(),
            state: VerificationState::default(),
            issuance: IssuanceLog::default(),
            trace,
            max_load: 0.0,
        };
        let ids: Vec<SubchainId> = block.active.keys().copied().collect();
        for id in ids {
            block.trace.record(TraceEvent::Phase { subchain: id, at_ms: 0.0, from: Phase::Initial, to: Phase::Core });
        }
        block
    }

    fn config(&self) -> &ScenarioConfig {
        &self.prep.config
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.config().clone();
        for k in 0..u64::from(cfg.sub_blocks) {
            self.run_sub_block(k)?;
            if k + 1 == u64::from(cfg.core_rounds) && k + 1 < u64::from(cfg.sub_blocks) {
                self.enter_secondary((k + 1) as f64 * cfg.sub_block_time)?;
            }
        }
        Ok(())
    }

    fn round_time(&self, miner: MinerId, sub: &Subchain) -> f64 {
        self.prep.effective_rt(miner, sub.host)
    }

    fn run_sub_block(&mut self, k: u64) -> Result<()> {
        let t = self.config().sub_block_time;
        let t0 = k as f64 * t;
        let mut queue = EventQueue::new();

        let mut memberships: BTreeMap<MinerId, BTreeMap<SubchainId, f64>> = BTreeMap::new();
        for (&id, sub) in &self.active {
            let values = self.sv.get(&id);
            for &m in &sub.members {
                let v = values.and_then(|vals| vals.get(&m)).copied().unwrap_or(0.0);
                memberships.entry(m).or_default().insert(id, v);
            }
        }
        for (&m, svs) in &memberships {
            let times: BTreeMap<SubchainId, f64> =
                svs.keys().map(|&s| (s, self.round_time(m, &self.active[&s]))).collect();
            let mut used = 0.0;
            for s in schedule_subchains(svs, &times, t) {
                used += times[&s];
                queue.push(EventRecord { at: t0 + UPLOAD_WINDOW * used, actor: m, kind: EventKind::Upload, payload: subchain_payload(s) });
            }
            self.max_load = self.max_load.max(used);
        }
        for (&id, sub) in &self.active {
            queue.push(EventRecord { at: t0 + CLOSE_AT * t, actor: sub.host, kind: EventKind::RoundClose, payload: subchain_payload(id) });
            queue.push(EventRecord { at: t0 + SEAL_AT * t, actor: sub.host, kind: EventKind::Seal, payload: subchain_payload(id) });
            if sub.phase() >= Phase::Secondary {
                let auditor = self.pick_auditor(k, sub);
                queue.push(EventRecord { at: t0 + AUDIT_AT * t, actor: auditor, kind: EventKind::Audit, payload: subchain_payload(id) });
            }
        }
        if self.active.values().any(|s| s.phase() >= Phase::Secondary) {
            for issuer in self.pick_issuers(k) {
                queue.push(EventRecord { at: t0 + CHALLENGE_AT * t, actor: issuer, kind: EventKind::Challenge, payload: Vec::new() });
            }
        }

        let mut uploads: BTreeMap<SubchainId, Vec<MinerId>> = BTreeMap::new();
        while let Some(ev) = queue.pop() {
            match ev.kind {
                EventKind::Upload => uploads.entry(payload_subchain(&ev.payload)).or_default().push(ev.actor),
                EventKind::RoundClose => {
                    let id = payload_subchain(&ev.payload);
                    let Some(contributors) = uploads.remove(&id) else { continue };
                    let ctx = TrainingContext {
                        dataset: &self.prep.dataset,
                        shards: &self.prep.shards,
                        local_epochs: self.prep.config.local_epochs,
                        learning_rate: self.prep.config.learning_rate,
                        decay: self.prep.config.staleness_decay,
                        master_seed: self.prep.config.master_seed,
                    };
                    let sub = self.active.get_mut(&id).expect("active subchain");
                    run_global_round(sub, &contributors, k, &ctx, None)?;
                }
                EventKind::Challenge => self.challenge(ev.actor, k)?,
                EventKind::Audit => {
                    let id = payload_subchain(&ev.payload);
                    let sub = self.active.get_mut(&id).expect("active subchain");
                    audit_subchain(sub, &mut self.state, ev.actor, &self.prep.dataset, &self.prep.shards, &mut self.trace)?;
                }
                EventKind::Seal => {
                    let id = payload_subchain(&ev.payload);
                    let sub = self.active.get_mut(&id).expect("active subchain");
                    let model = sub.model.as_ref().ok_or(Error::NoModel(id))?;
                    sub.accuracy.push(learner::evaluate_on(model, &self.prep.dataset, &self.prep.holdout)?);
                    let before = sub.phase();
                    let after = advance_phase(sub, &self.state, &self.prep.config);
                    if after != before {
                        self.trace.record(TraceEvent::Phase { subchain: id, at_ms: ev.at, from: before, to: after });
                    }
                    sub.seal_sub_block(Vec::new())?;
                }
            }
        }
        Ok(())
    }

    /// A seeded non-member, or any miner when the pool covers everyone.
    fn pick_auditor(&self, k: u64, sub: &Subchain) -> MinerId {
        let outsiders: Vec<MinerId> = self.prep.topology.miners().filter(|m| !sub.members.contains(m)).collect();
        let pool: Vec<MinerId> = if outsiders.is_empty() { self.prep.topology.miners().collect() } else { outsiders };
        let mut stream = rng::stream(self.prep.config.master_seed, &format!("auditor/{k}"), u64::from(sub.id.0));
        pool[stream.random_range(0..pool.len())]
    }

    fn pick_issuers(&self, k: u64) -> Vec<MinerId> {
        let n = self.prep.config.miner_count;
        let count = self.prep.config.challenge_issuers.min(n);
        let mut stream = rng::stream(self.prep.config.master_seed, "issuers", k);
        let mut picks: Vec<MinerId> = rand::seq::index::sample(&mut stream, n, count).into_iter().map(|i| MinerId(i as u32)).collect();
        picks.sort_unstable();
        picks
    }

    fn challenge(&mut self, issuer: MinerId, period: u64) -> Result<()> {
        let targets: Vec<SubchainId> =
            self.active.values().filter(|s| s.phase() >= Phase::Secondary).map(|s| s.id).collect();
        if targets.is_empty() {
            return Ok(());
        }
        let cfg = &self.prep.config;
        let set = generate_challenge(
            &mut self.issuance,
            &self.prep.shards[issuer.index()],
            period,
            cfg.challenge_subsets,
            cfg.challenge_subset_size,
            &targets,
            cfg.master_seed,
        )?;
        for id in targets {
            let (index, subset) = set.subset_for(id).expect("every target is assigned");
            let sub = self.active.get_mut(&id).expect("active subchain");
            respond_challenge(sub, &mut self.state, issuer, period, index, subset, &self.prep.dataset, &mut self.trace)?;
        }
        Ok(())
    }

    /// Partnerships among pool managers, split/merge, then asynchronous
    /// training for every remaining subchain.
    fn enter_secondary(&mut self, at_ms: f64) -> Result<()> {
        let managers: Vec<(SubchainId, MinerId)> = self.active.values().map(|s| (s.id, s.host)).collect();
        let prep = &self.prep;
        let partnerships = form_partnerships(
            &managers,
            |a, b| prep.effective_rt(a, b),
            prep.config.sub_block_time,
            prep.config.partnership_threshold,
            &mut self.trace,
        );
        let next_id = self.active.keys().next_back().map_or(0, |s| s.0 + 1)
            .max(self.retired.iter().map(|s| s.id.0 + 1).max().unwrap_or(0));
        let parents: Vec<Subchain> = self.active.values().cloned().collect();
        let profiles = &prep.profiles;
        let matrix = prep.topology.matrix();
        let merged = split_merge(
            core::mem::take(&mut self.active).into_values().collect(),
            &partnerships,
            next_id,
            |members| select_host(members, profiles, matrix),
        )?;
        let survivors: BTreeSet<SubchainId> = merged.iter().map(|s| s.id).collect();
        for p in parents {
            if !survivors.contains(&p.id) {
                self.retired.push(p);
            }
        }
        for sub in merged {
            if !sub.parents.is_empty() {
                self.trace.record(TraceEvent::Partnership {
                    pools: sub.parents.clone(),
                    managers: partnerships
                        .iter()
                        .find(|p| p.pools.iter().copied().eq(sub.parents.iter().copied()))
                        .map_or_else(Vec::new, |p| p.managers.iter().copied().collect()),
                    merged: sub.id,
                });
                let mut values: BTreeMap<MinerId, f64> = BTreeMap::new();
                for &m in &sub.members {
                    let own: Vec<f64> =
                        sub.parents.iter().filter_map(|p| self.sv.get(p).and_then(|v| v.get(&m))).copied().collect();
                    values.insert(m, own.iter().sum::<f64>() / own.len().max(1) as f64);
                }
                self.sv.insert(sub.id, values);
            }
            self.active.insert(sub.id, sub);
        }
        let ids: Vec<SubchainId> = self.active.keys().copied().collect();
        for id in ids {
            let sub = self.active.get_mut(&id).expect("active subchain");
            let before = sub.phase();
            if sub.advance_to(Phase::Secondary) {
                self.trace.record(TraceEvent::Phase { subchain: id, at_ms, from: before, to: Phase::Secondary });
            }
        }
        Ok(())
    }

    fn finish(
        mut self,
        demonstration_pool: SubchainId,
        shapley: Vec<ShapleyReport>,
        reservation: Vec<MinerId>,
        shrink: Vec<ShrinkCurve>,
    ) -> Result<ScenarioOutcome> {
        let candidates: Vec<(SubchainId, Vec<f64>)> = self
            .active
            .values()
            .filter(|s| s.phase() == Phase::Verification)
            .map(|s| (s.id, self.state.tally(s.id).challenge_accuracies))
            .collect();
        let winner = match select_winner(candidates.iter().map(|(id, a)| (*id, a.as_slice()))) {
            Ok((subchain, median_accuracy)) => {
                if let Some(m) = median_accuracy {
                    self.trace.record(TraceEvent::Winner { subchain, median_accuracy: m });
                }
                Some(WinnerSummary { subchain, median_accuracy })
            }
            Err(Error::NoCandidate) => None,
            Err(e) => return Err(e),
        };
        let retired_ids: BTreeSet<SubchainId> = self.retired.iter().map(|s| s.id).collect();
        let mut all: Vec<Subchain> = self.retired.into_iter().chain(self.active.into_values()).collect();
        all.sort_by_key(|s| s.id);
        let summaries = all
            .iter()
            .map(|s| {
                let tally = self.state.tally(s.id);
                SubchainSummary {
                    id: s.id,
                    parents: s.parents.clone(),
                    members: s.members.iter().copied().collect(),
                    host: s.host,
                    phase: s.phase(),
                    retired: retired_ids.contains(&s.id),
                    accuracy: s.accuracy.clone(),
                    challenges_received: tally.challenges_received,
                    challenge_accuracies: tally.challenge_accuracies,
                    audits_passed: tally.audits_passed,
                    audits_failed: tally.audits_failed,
                    ledger: LedgerDigest::of(&s.chain),
                }
            })
            .collect();
        let reliability = self.state.miners.iter().map(|(&m, t)| (m, t.reliability())).collect();
        let report = ScenarioReport {
            config: self.prep.config.clone(),
            pools: self.prep.pools.clone(),
            demonstration_pool,
            shapley,
            reservation,
            shrink,
            subchains: summaries,
            winner,
            reliability,
            max_scheduled_load_ms: self.max_load,
        };
        Ok(ScenarioOutcome {
            report,
            subchains: all,
            dataset: self.prep.dataset,
            shards: self.prep.shards,
            holdout: self.prep.holdout,
            trace: self.trace.into_events(),
        })
    }
}

/// Stand-in for the previous main-block head.
pub fn genesis_head(master_seed: u64) -> Hash32 {
    let mut bytes = Vec::from(&b"poflsc/main-block"[..]);
    bytes.extend_from_slice(&master_seed.to_be_bytes());
    sha256(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(pairs: &[(u32, f64)]) -> BTreeMap<SubchainId, f64> {
        pairs.iter().map(|&(s, v)| (SubchainId(s), v)).collect()
    }

    #[test]
    fn schedule_by_value_then_id() {
        let times = sv(&[(0, 10.0), (1, 10.0)]);
        assert_eq!(schedule_subchains(&sv(&[(0, 0.5), (1, 0.9)]), &times, 100.0), vec![SubchainId(1), SubchainId(0)]);
        assert_eq!(schedule_subchains(&sv(&[(0, 0.5), (1, 0.5)]), &times, 100.0), vec![SubchainId(0), SubchainId(1)]);
        assert!(schedule_subchains(&BTreeMap::new(), &times, 100.0).is_empty());
    }

    #[test]
    fn schedule_fills_capacity_greedily() {
        let times = sv(&[(0, 40.0), (1, 40.0), (2, 40.0)]);
        let got = schedule_subchains(&sv(&[(0, 0.1), (1, 0.3), (2, 0.2)]), &times, 100.0);
        assert_eq!(got, vec![SubchainId(1), SubchainId(2)]);
    }

    #[test]
    fn queue_orders_by_time_actor_kind_then_insertion() {
        let mut q = EventQueue::new();
        let ev = |at, actor, kind, tag: u8| EventRecord { at, actor: MinerId(actor), kind, payload: vec![tag] };
        q.push(ev(2.0, 0, EventKind::Upload, 0));
        q.push(ev(1.0, 5, EventKind::Seal, 1));
        q.push(ev(1.0, 5, EventKind::Upload, 2));
        q.push(ev(1.0, 3, EventKind::Seal, 3));
        q.push(ev(1.0, 5, EventKind::Upload, 4));
        let order: Vec<u8> = core::iter::from_fn(|| q.pop()).map(|e| e.payload[0]).collect();
        assert_eq!(order, vec![3, 2, 4, 1, 0]);
    }

    #[test]
    fn clock_index() {
        let c = SimClock { now: 2500.0, sub_block_time: 1000.0 };
        assert_eq!(c.sub_block_index(), 2);
    }
}
