//! Partner selection by response time.
//!
//! Each miner keeps a candidate list bounded by the sub-block time. Two
//! miners that list each other exchange lists; their first common partner
//! seeds a core pool, which then grows one proposal round at a time until
//! a member rejects a proposal, the cap is reached or nobody has anything
//! left to propose. Pool managers later repeat the same procedure among
//! themselves to form partnerships, after which subchains split and merge.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{MinerId, SubchainId};
use crate::learner::ModelParams;
use crate::subchain::Subchain;
use crate::topology::{MinerProfile, ResponseTimeMatrix};
use crate::trace::{Trace, TraceEvent};

/// A miner's partner candidates, ascending by response time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub owner: MinerId,
    pub entries: Vec<(MinerId, f64)>,
}

impl CandidateList {
    pub fn contains(&self, id: MinerId) -> bool {
        self.entries.iter().any(|&(m, _)| m == id)
    }

    pub fn rt_of(&self, id: MinerId) -> Option<f64> {
        self.entries.iter().find(|&&(m, _)| m == id).map(|&(_, rt)| rt)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, rt)| rt).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = MinerId> + '_ {
        self.entries.iter().map(|&(m, _)| m)
    }
}

fn by_rt(a: &(MinerId, f64), b: &(MinerId, f64)) -> core::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Builds `owner`'s candidate list from peers arriving in `arrival_order`.
///
/// A peer is added when the running total plus its response time stays
/// below `t_sub`, or when it is faster than the slowest entry (an empty
/// list admits its first arrival). After every addition the slowest entry
/// is evicted while the total exceeds `t_sub`; the newcomer itself may be
/// evicted. Peers missing from `rts`, repeated, or equal to `owner` are
/// skipped.
pub fn build_candidate_list(
    owner: MinerId,
    rts: &BTreeMap<MinerId, f64>,
    t_sub: f64,
    arrival_order: &[MinerId],
    trace: &mut Trace,
) -> CandidateList {
    let mut entries: Vec<(MinerId, f64)> = Vec::new();
    let mut total = 0.0;
    for &peer in arrival_order {
        if peer == owner || entries.iter().any(|&(m, _)| m == peer) {
            continue;
        }
        let Some(&rt) = rts.get(&peer) else { continue };
        let slowest = entries.iter().map(|&(_, r)| r).fold(f64::NEG_INFINITY, f64::max);
        let admit = total + rt < t_sub || entries.is_empty() || rt < slowest;
        if !admit {
            continue;
        }
        entries.push((peer, rt));
        total += rt;
        trace.record(TraceEvent::CandidateAdd { owner, peer, rt });
        while total > t_sub && !entries.is_empty() {
            let (pos, _) = entries
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| by_rt(a, b))
                .expect("non-empty");
            let (evicted, ert) = entries.remove(pos);
            total = entries.iter().map(|&(_, r)| r).sum();
            trace.record(TraceEvent::CandidateEvict { owner, peer: evicted, rt: ert });
        }
    }
    entries.sort_by(by_rt);
    CandidateList { owner, entries }
}

/// Candidate lists for every miner, with peers arriving in ascending id
/// order and response times given by `rt(owner, peer)`.
pub fn build_all_lists<F>(miners: &[MinerId], visible: impl Fn(MinerId, MinerId) -> bool, rt: F, t_sub: f64, trace: &mut Trace) -> BTreeMap<MinerId, CandidateList>
where
    F: Fn(MinerId, MinerId) -> f64,
{
    let mut order = miners.to_vec();
    order.sort_unstable();
    order
        .iter()
        .map(|&owner| {
            let rts: BTreeMap<MinerId, f64> = order
                .iter()
                .filter(|&&p| p != owner && visible(owner, p))
                .map(|&p| (p, rt(owner, p)))
                .collect();
            (owner, build_candidate_list(owner, &rts, t_sub, &order, trace))
        })
        .collect()
}

fn listed(lists: &BTreeMap<MinerId, CandidateList>, owner: MinerId, peer: MinerId) -> bool {
    lists.get(&owner).is_some_and(|l| l.contains(peer))
}

/// First partner common to both lists when both are scanned ascending:
/// the common id whose slower of the two response times is smallest.
pub fn first_common(a: &CandidateList, b: &CandidateList) -> Option<MinerId> {
    a.entries
        .iter()
        .filter(|&&(m, _)| m != b.owner)
        .filter_map(|&(m, rt_a)| b.rt_of(m).map(|rt_b| (m, rt_a.max(rt_b))))
        .min_by(by_rt)
        .map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoolOutcome {
    Established { members: BTreeSet<MinerId> },
    Demolished { members: BTreeSet<MinerId> },
}

impl PoolOutcome {
    pub fn members(&self) -> &BTreeSet<MinerId> {
        match self {
            PoolOutcome::Established { members } | PoolOutcome::Demolished { members } => members,
        }
    }

    pub fn is_established(&self) -> bool {
        matches!(self, PoolOutcome::Established { .. })
    }
}

/// Grows a pool from the mutually listed pair `(a, b)`.
///
/// Returns `None` when the two miners do not list each other or share no
/// common partner. Otherwise the seed trio grows by proposal rounds: each
/// member (ascending id) proposes its fastest candidate that is not yet a
/// member; proposals are evaluated in that order and confirmed only if
/// every current member lists them. The first rejection stops selection
/// with earlier confirmations kept. The pool is established iff its size
/// exceeds `threshold`; it never grows beyond `cap` (at least 3).
pub fn establish_core_pool(
    lists: &BTreeMap<MinerId, CandidateList>,
    pair: (MinerId, MinerId),
    threshold: usize,
    cap: usize,
    pool: SubchainId,
    trace: &mut Trace,
) -> Option<PoolOutcome> {
    let (a, b) = pair;
    if a == b || !listed(lists, a, b) || !listed(lists, b, a) {
        return None;
    }
    let common = first_common(&lists[&a], &lists[&b])?;
    if common == a {
        return None;
    }
    let mut members: BTreeSet<MinerId> = [a, b, common].into_iter().collect();
    trace.record(TraceEvent::PoolSeed { pool, members: members.iter().copied().collect() });

    'rounds: while members.len() < cap {
        let mut proposals: Vec<(MinerId, MinerId)> = Vec::new();
        for &m in &members {
            let Some(list) = lists.get(&m) else { continue };
            if let Some(candidate) = list.ids().find(|c| !members.contains(c)) {
                trace.record(TraceEvent::Propose { pool, proposer: m, candidate });
                proposals.push((m, candidate));
            }
        }
        if proposals.is_empty() {
            break;
        }
        for (_, candidate) in proposals {
            if members.contains(&candidate) {
                continue;
            }
            if members.len() >= cap {
                break 'rounds;
            }
            if let Some(&rejecter) = members.iter().find(|&&m| !listed(lists, m, candidate)) {
                trace.record(TraceEvent::Reject { pool, rejecter, candidate });
                break 'rounds;
            }
            members.insert(candidate);
            trace.record(TraceEvent::Confirm { pool, candidate });
        }
    }

    Some(if members.len() > threshold {
        PoolOutcome::Established { members }
    } else {
        trace.record(TraceEvent::PoolDemolished { pool, members: members.iter().copied().collect() });
        PoolOutcome::Demolished { members }
    })
}

/// Every mutually listed pair, ascending by `(response time, lower id,
/// higher id)`. The response time is the one in the lower id's list.
pub fn mutual_pairs(lists: &BTreeMap<MinerId, CandidateList>) -> Vec<(MinerId, MinerId)> {
    let mut pairs: Vec<(f64, MinerId, MinerId)> = Vec::new();
    for (&a, list) in lists {
        for &(b, rt) in &list.entries {
            if a < b && listed(lists, b, a) {
                pairs.push((rt, a, b));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    pairs.into_iter().map(|(_, a, b)| (a, b)).collect()
}

/// One formation round over all miners. Pairs are tried fastest first; a
/// pair seeds a pool only while neither miner belongs to an established
/// pool (members may still be recruited into later pools). Attempts are
/// numbered from `first_id`; demolished attempts consume an id.
pub fn form_core_pools(
    lists: &BTreeMap<MinerId, CandidateList>,
    threshold: usize,
    cap: usize,
    first_id: u32,
    trace: &mut Trace,
) -> Vec<(SubchainId, BTreeSet<MinerId>)> {
    let mut pooled: BTreeSet<MinerId> = BTreeSet::new();
    let mut pools = Vec::new();
    let mut next = first_id;
    for (a, b) in mutual_pairs(lists) {
        if pooled.contains(&a) || pooled.contains(&b) {
            continue;
        }
        let id = SubchainId(next);
        let Some(outcome) = establish_core_pool(lists, (a, b), threshold, cap, id, trace) else { continue };
        next += 1;
        if let PoolOutcome::Established { members } = outcome {
            pooled.extend(members.iter().copied());
            pools.push((id, members));
        }
    }
    pools
}

/// Host: among members whose reliability exceeds the pool mean (all
/// members when none does), the one with the smallest mean response time
/// to the other members; ties go to the lower id.
pub fn select_host(members: &BTreeSet<MinerId>, profiles: &[MinerProfile], rts: &ResponseTimeMatrix) -> MinerId {
    let reliability = |m: MinerId| profiles.get(m.index()).map_or(1.0, |p| p.reliability);
    let mean_rel = members.iter().map(|&m| reliability(m)).sum::<f64>() / members.len().max(1) as f64;
    let mut qualified: Vec<MinerId> = members.iter().copied().filter(|&m| reliability(m) > mean_rel).collect();
    if qualified.is_empty() {
        qualified = members.iter().copied().collect();
    }
    let others = (members.len() - 1).max(1) as f64;
    let mean_rt = |m: MinerId| members.iter().filter(|&&o| o != m).map(|&o| rts.between(m, o)).sum::<f64>() / others;
    qualified
        .into_iter()
        .map(|m| (m, mean_rt(m)))
        .min_by(by_rt)
        .map(|(m, _)| m)
        .expect("pool has members")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partnership {
    pub pools: BTreeSet<SubchainId>,
    pub managers: BTreeSet<MinerId>,
}

/// Runs list building and pool establishment with pool managers as the
/// population. Each established manager pool is a partnership of every
/// pool those managers head.
pub fn form_partnerships<F>(
    managers: &[(SubchainId, MinerId)],
    rt: F,
    t_sub: f64,
    threshold: usize,
    trace: &mut Trace,
) -> Vec<Partnership>
where
    F: Fn(MinerId, MinerId) -> f64,
{
    let mut heads: BTreeSet<MinerId> = BTreeSet::new();
    heads.extend(managers.iter().map(|&(_, m)| m));
    let population: Vec<MinerId> = heads.into_iter().collect();
    if population.len() < 2 {
        return Vec::new();
    }
    let lists = build_all_lists(&population, |_, _| true, &rt, t_sub, trace);
    let groups = form_core_pools(&lists, threshold, population.len(), 0, &mut Trace::disabled());
    groups
        .into_iter()
        .map(|(_, group)| Partnership {
            pools: managers.iter().filter(|(_, m)| group.contains(m)).map(|&(s, _)| s).collect(),
            managers: group,
        })
        .collect()
}

/// Splits every subchain into one branch per partnership it belongs to and
/// merges the branches of each partnership into a new subchain.
///
/// A merged subchain's members are the union of its parents', its model is
/// the member-count-weighted mean of the parents' models, and it continues
/// the ledger of its lowest-id parent. Subchains outside every partnership
/// are returned unchanged. New ids start at `next_id`.
pub fn split_merge(
    subchains: Vec<Subchain>,
    partnerships: &[Partnership],
    next_id: u32,
    host_of: impl Fn(&BTreeSet<MinerId>) -> MinerId,
) -> Result<Vec<Subchain>> {
    let by_id: BTreeMap<SubchainId, usize> = subchains.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    for p in partnerships {
        if let Some(&missing) = p.pools.iter().find(|id| !by_id.contains_key(id)) {
            return Err(Error::PartnershipUnknownPool(missing));
        }
    }
    let partnered: BTreeSet<SubchainId> = partnerships.iter().flat_map(|p| p.pools.iter().copied()).collect();
    let mut out: Vec<Subchain> = Vec::new();
    for (k, p) in partnerships.iter().enumerate() {
        let parents: Vec<&Subchain> = p.pools.iter().map(|id| &subchains[by_id[id]]).collect();
        let mut merged = parents[0].branch();
        merged.id = SubchainId(next_id + k as u32);
        merged.parents = p.pools.iter().copied().collect();
        merged.members = parents.iter().flat_map(|s| s.members.iter().copied()).collect();
        merged.host = host_of(&merged.members);
        merged.accuracy.clear();
        let models: Vec<(usize, &ModelParams)> =
            parents.iter().filter_map(|s| s.model.as_ref().map(|m| (s.members.len(), m))).collect();
        if !models.is_empty() {
            let model = weighted_mean(&models)?;
            merged.start_training(model);
        }
        out.push(merged);
    }
    let mut result: Vec<Subchain> = subchains.into_iter().filter(|s| !partnered.contains(&s.id)).collect();
    result.extend(out);
    Ok(result)
}

/// Parameter mean weighted by member count, summed in the given order.
pub fn weighted_mean(models: &[(usize, &ModelParams)]) -> Result<ModelParams> {
    let total: usize = models.iter().map(|&(n, _)| n).sum();
    let first = models.first().ok_or(Error::BadParams("no models to merge".into()))?.1;
    let mut out = ModelParams { arch: first.arch, values: alloc::vec![0.0; first.dim()] };
    for &(n, m) in models {
        if m.dim() != first.dim() {
            return Err(Error::DimensionMismatch { expected: first.dim(), found: m.dim() });
        }
        out.add_scaled(&m.values, n as f64 / total as f64)?;
    }
    Ok(out)
}
