//! Federated aggregation.
//!
//! The core phase runs synchronous FedAvg: the host waits for every
//! scheduled member and applies the sample-weighted mean of their deltas.
//! Later phases apply each update on arrival, discounted by its staleness.
//! Summation always runs in a fixed order so results are bit-stable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ids::{MinerId, Role, SubchainId};
use crate::learner::{self, Dataset, GradientUpdate, ModelParams, Shard};
use crate::ledger::{hex32, ActivationType, Hash32, Outcome};
use crate::rng;
use crate::subchain::{Phase, Subchain};

/// Weight applied to an update that is `staleness` versions old.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StalenessDecay {
    /// `1 / (1 + staleness)`.
    #[default]
    Inverse,
    /// `(1 + staleness)^-exponent`.
    Polynomial { exponent: f64 },
}

impl StalenessDecay {
    pub fn weight(self, staleness: u64) -> f64 {
        match self {
            StalenessDecay::Inverse => 1.0 / (1.0 + staleness as f64),
            StalenessDecay::Polynomial { exponent } => libm::pow(1.0 + staleness as f64, -exponent),
        }
    }
}

/// `params + sum_i w_i * delta_i` with `w_i = samples_i / sum samples`,
/// summed in ascending miner order.
pub fn aggregate_sync(params: &ModelParams, updates: &[GradientUpdate]) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::EmptyRound);
    }
    for u in updates {
        if u.delta.len() != params.dim() {
            return Err(Error::DimensionMismatch { expected: params.dim(), found: u.delta.len() });
        }
    }
    let mut order: Vec<&GradientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.miner);
    let total: usize = order.iter().map(|u| u.samples_used).sum();
    let mut acc = vec![0.0; params.dim()];
    for u in &order {
        let w = if total == 0 {
            1.0 / order.len() as f64
        } else {
            u.samples_used as f64 / total as f64
        };
        for (a, d) in acc.iter_mut().zip(&u.delta) {
            *a += w * d;
        }
    }
    let mut out = params.clone();
    out.add_scaled(&acc, 1.0)?;
    Ok(out)
}

/// Staleness of an update computed at `update_round` and applied at
/// `current_round`.
pub fn staleness(update_round: u64, current_round: u64) -> Result<u64> {
    current_round
        .checked_sub(update_round)
        .ok_or(Error::StaleNegative { update_round, current_round })
}

/// `params + decay(staleness) * delta`.
pub fn apply_async(
    params: &ModelParams,
    update: &GradientUpdate,
    current_round: u64,
    decay: StalenessDecay,
) -> Result<ModelParams> {
    if update.delta.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: update.delta.len() });
    }
    let s = staleness(update.round, current_round)?;
    let w = decay.weight(s);
    let mut acc = vec![0.0; params.dim()];
    for (a, d) in acc.iter_mut().zip(&update.delta) {
        *a += w * d;
    }
    let mut out = params.clone();
    out.add_scaled(&acc, 1.0)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationMode {
    Sync,
    Async,
}

/// Everything an auditor needs to repeat one global round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub subchain: SubchainId,
    /// Sub-block index the round ran in.
    pub round: u64,
    pub mode: AggregationMode,
    /// Contributors in application order.
    pub contributors: Vec<MinerId>,
    /// Staleness each contributor's update was applied with (all zero for sync).
    pub staleness: Vec<u64>,
    #[serde(with = "hex32")]
    pub pre_hash: Hash32,
    #[serde(with = "hex32")]
    pub post_hash: Hash32,
    /// Digest of each contributor's update, aligned with `contributors`.
    #[serde(with = "hex32_list")]
    pub update_hashes: Vec<Hash32>,
    pub seeds_used: BTreeMap<MinerId, u64>,
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub decay: StalenessDecay,
}

mod hex32_list {
    use alloc::string::String;
    use alloc::vec::Vec;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::ledger::Hash32;

    pub fn serialize<S: Serializer>(hashes: &[Hash32], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(hashes.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Hash32>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|h| {
                let mut out = [0u8; 32];
                hex::decode_to_slice(h, &mut out).map_err(D::Error::custom)?;
                Ok(out)
            })
            .collect()
    }
}

/// Digest of an update's miner, sample count and delta bits.
pub fn update_hash(update: &GradientUpdate) -> Hash32 {
    let mut h = Sha256::new();
    h.update(b"poflsc/update");
    h.update(update.miner.0.to_be_bytes());
    h.update((update.samples_used as u64).to_be_bytes());
    h.update((update.delta.len() as u64).to_be_bytes());
    for d in &update.delta {
        h.update(d.to_bits().to_be_bytes());
    }
    h.finalize().into()
}

/// Shared inputs of local training.
#[derive(Debug, Clone, Copy)]
pub struct TrainingContext<'a> {
    pub dataset: &'a Dataset,
    pub shards: &'a [Shard],
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub decay: StalenessDecay,
    pub master_seed: u64,
}

pub fn shard_of(shards: &[Shard], miner: MinerId) -> Result<&Shard> {
    match shards.get(miner.index()) {
        Some(s) if s.owner == miner => Ok(s),
        _ => shards.iter().find(|s| s.owner == miner).ok_or(Error::UnknownMiner(miner)),
    }
}

/// Seed for `miner`'s local training in `round` of `subchain`.
pub fn local_seed(master_seed: u64, subchain: SubchainId, round: u64, miner: MinerId) -> u64 {
    rng::derive_seed(master_seed, &format!("local-train/{}/{round}", subchain.0), u64::from(miner.0))
}

/// Hook that may alter an update before aggregation (fault injection).
pub type UpdateHook<'h> = &'h mut dyn FnMut(&mut GradientUpdate);

/// Applies one round given its contributors, seeds and (for async) the
/// staleness of each application. Shared by live training and replay.
#[allow(clippy::too_many_arguments)]
fn compute_round(
    pre: &ModelParams,
    mode: AggregationMode,
    contributors: &[MinerId],
    staleness_of: &[u64],
    seeds: &BTreeMap<MinerId, u64>,
    round: u64,
    dataset: &Dataset,
    shards: &[Shard],
    local_epochs: u32,
    learning_rate: f64,
    decay: StalenessDecay,
    mut hook: Option<UpdateHook<'_>>,
) -> Result<(ModelParams, Vec<Hash32>)> {
    let mut updates = Vec::with_capacity(contributors.len());
    for &m in contributors {
        let seed = *seeds.get(&m).ok_or(Error::MissingSeeds { round, miner: m })?;
        let mut update =
            learner::train_local(pre, dataset, shard_of(shards, m)?, local_epochs, learning_rate, seed, 0)?;
        if let Some(h) = hook.as_mut() {
            h(&mut update);
        }
        updates.push(update);
    }
    let hashes = updates.iter().map(update_hash).collect();
    let model = match mode {
        AggregationMode::Sync => aggregate_sync(pre, &updates)?,
        AggregationMode::Async => {
            let mut model = pre.clone();
            for (update, &s) in updates.iter().zip(staleness_of) {
                model = apply_async(&model, update, s, decay)?;
            }
            model
        }
    };
    Ok((model, hashes))
}

/// Runs one global round on `sub`.
///
/// In the core phase all `contributors` train from the current model and
/// their updates are averaged. In later phases `contributors` is the
/// arrival order; every update was dispatched from the round-start model
/// and is applied on arrival with staleness equal to the number of updates
/// applied since dispatch. One TRAINING activation per contributor is
/// queued on the subchain.
pub fn run_global_round(
    sub: &mut Subchain,
    contributors: &[MinerId],
    round: u64,
    ctx: &TrainingContext<'_>,
    hook: Option<UpdateHook<'_>>,
) -> Result<RoundRecord> {
    let mode = match sub.phase() {
        Phase::Core => AggregationMode::Sync,
        Phase::Secondary | Phase::Verification => AggregationMode::Async,
        Phase::Initial => return Err(Error::BadParams(format!("subchain {} has not started training", sub.id))),
    };
    let pre = sub.model.clone().ok_or(Error::NoModel(sub.id))?;
    if contributors.is_empty() {
        return Err(Error::NoContributors(sub.id));
    }
    if let Some(m) = contributors.iter().find(|m| !sub.members.contains(m)) {
        return Err(Error::BadParams(format!("{m} is not a member of subchain {}", sub.id)));
    }
    let mut order = contributors.to_vec();
    if mode == AggregationMode::Sync {
        order.sort_unstable();
        order.dedup();
    }
    let staleness_of: Vec<u64> = match mode {
        AggregationMode::Sync => vec![0; order.len()],
        AggregationMode::Async => (0..order.len() as u64).collect(),
    };
    let seeds: BTreeMap<MinerId, u64> =
        order.iter().map(|&m| (m, local_seed(ctx.master_seed, sub.id, round, m))).collect();
    let (post, update_hashes) = compute_round(
        &pre,
        mode,
        &order,
        &staleness_of,
        &seeds,
        round,
        ctx.dataset,
        ctx.shards,
        ctx.local_epochs,
        ctx.learning_rate,
        ctx.decay,
        hook,
    )?;
    let record = RoundRecord {
        subchain: sub.id,
        round,
        mode,
        contributors: order.clone(),
        staleness: staleness_of,
        pre_hash: pre.hash(),
        post_hash: post.hash(),
        update_hashes,
        seeds_used: seeds,
        local_epochs: ctx.local_epochs,
        learning_rate: ctx.learning_rate,
        decay: ctx.decay,
    };
    sub.version += order.len() as u64;
    sub.model = Some(post);
    for &m in &order {
        let data_id = shard_of(ctx.shards, m)?.digest();
        sub.push_activation(
            ActivationType::Training,
            record.post_hash,
            (sub.host, Role::Host),
            (m, Role::Trainer),
            data_id,
            Outcome::None,
        );
    }
    sub.records.push(record.clone());
    Ok(record)
}

/// Recomputes the model a recorded round produced from `pre`, with the
/// digests of the recomputed updates.
pub fn replay_round(
    pre: &ModelParams,
    record: &RoundRecord,
    dataset: &Dataset,
    shards: &[Shard],
) -> Result<(ModelParams, Vec<Hash32>)> {
    if record.staleness.len() != record.contributors.len() {
        return Err(Error::BadParams(format!("round {} staleness list has wrong length", record.round)));
    }
    compute_round(
        pre,
        record.mode,
        &record.contributors,
        &record.staleness,
        &record.seeds_used,
        record.round,
        dataset,
        shards,
        record.local_epochs,
        record.learning_rate,
        record.decay,
        None,
    )
}
