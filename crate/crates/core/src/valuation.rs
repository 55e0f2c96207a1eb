//! Shapley valuation of members' data.
//!
//! A [`ValueFunction`] maps a coalition (ascending miner ids) to model
//! performance. [`FederatedValue`] is the one the simulator uses: retrain
//! from a fixed starting model on the coalition's shards for a fixed number
//! of synchronous rounds and report held-out accuracy.
//!
//! Monte Carlo estimators are computed one permutation at a time from a
//! per-permutation seed, so callers may evaluate permutations in any order
//! (or in parallel) and [`summarize`] gives the same report.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::{aggregate_sync, shard_of};
use crate::ids::MinerId;
use crate::learner::{self, Dataset, ModelParams, Shard};
use crate::rng;

/// Largest member count [`exact_shapley`] accepts.
pub const MAX_EXACT_MEMBERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "LOO")]
    Loo,
    #[serde(rename = "TMC")]
    Tmc,
    #[serde(rename = "GSHAPLEY")]
    GShapley,
    #[serde(rename = "EXACT")]
    Exact,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Loo => "loo",
            Estimator::Tmc => "tmc",
            Estimator::GShapley => "gshapley",
            Estimator::Exact => "exact",
        }
    }

    /// Case-insensitive parse of `loo`, `tmc`, `gshapley` or `exact`.
    pub fn parse(name: &str) -> Option<Self> {
        [Estimator::Loo, Estimator::Tmc, Estimator::GShapley, Estimator::Exact]
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReservationOrder {
    /// Highest value reserved first, lowest evicted first.
    Descending,
    /// Comparative baseline: lowest value reserved first.
    Ascending,
}

pub trait ValueFunction {
    /// Performance of `coalition` (ascending ids, possibly empty).
    fn value(&self, coalition: &[MinerId]) -> f64;
}

impl<F: Fn(&[MinerId]) -> f64> ValueFunction for F {
    fn value(&self, coalition: &[MinerId]) -> f64 {
        self(coalition)
    }
}

/// Caches another value function by coalition. Single-threaded.
pub struct Memoized<V> {
    inner: V,
    cache: RefCell<BTreeMap<Vec<MinerId>, f64>>,
}

impl<V: ValueFunction> Memoized<V> {
    pub fn new(inner: V) -> Self {
        Memoized { inner, cache: RefCell::new(BTreeMap::new()) }
    }

    pub fn evaluations(&self) -> usize {
        self.cache.borrow().len()
    }
}

impl<V: ValueFunction> ValueFunction for Memoized<V> {
    fn value(&self, coalition: &[MinerId]) -> f64 {
        if let Some(&v) = self.cache.borrow().get(coalition) {
            return v;
        }
        let v = self.inner.value(coalition);
        self.cache.borrow_mut().insert(coalition.to_vec(), v);
        v
    }
}

/// Held-out accuracy after federated retraining on a coalition's shards.
#[derive(Debug, Clone)]
pub struct FederatedValue<'a> {
    pub dataset: &'a Dataset,
    pub shards: &'a [Shard],
    pub holdout: &'a [usize],
    pub params0: ModelParams,
    pub rounds: u32,
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub seed: u64,
}

impl FederatedValue<'_> {
    /// Accuracy of the model after `rounds` synchronous rounds on
    /// `coalition`. Each member's seed depends only on `(seed, round,
    /// member)`, so the value is a deterministic function of the coalition.
    ///
    /// # Panics
    /// If a coalition member has no shard or dimensions disagree.
    pub fn try_value(&self, coalition: &[MinerId]) -> Result<f64> {
        let mut model = self.params0.clone();
        if !coalition.is_empty() {
            for round in 0..self.rounds {
                let tag = format!("value-train/{round}");
                let mut updates = Vec::with_capacity(coalition.len());
                for &m in coalition {
                    let seed = rng::derive_seed(self.seed, &tag, u64::from(m.0));
                    updates.push(learner::train_local(
                        &model,
                        self.dataset,
                        shard_of(self.shards, m)?,
                        self.local_epochs,
                        self.learning_rate,
                        seed,
                        u64::from(round),
                    )?);
                }
                model = aggregate_sync(&model, &updates)?;
            }
        }
        learner::evaluate_on(&model, self.dataset, self.holdout)
    }
}

impl ValueFunction for FederatedValue<'_> {
    fn value(&self, coalition: &[MinerId]) -> f64 {
        self.try_value(coalition).expect("value function inputs were validated")
    }
}

fn sorted(members: &[MinerId]) -> Vec<MinerId> {
    let mut m = members.to_vec();
    m.sort_unstable();
    m.dedup();
    m
}

/// Brute-force Shapley values over all `2^n` coalitions.
pub fn exact_shapley<V: ValueFunction + ?Sized>(members: &[MinerId], v: &V) -> Result<BTreeMap<MinerId, f64>> {
    let members = sorted(members);
    let n = members.len();
    if n > MAX_EXACT_MEMBERS {
        return Err(Error::TooManyMembers { got: n, max: MAX_EXACT_MEMBERS });
    }
    let values: Vec<f64> = (0u32..1 << n)
        .map(|mask| {
            let coalition: Vec<MinerId> = (0..n).filter(|b| mask & (1 << b) != 0).map(|b| members[b]).collect();
            v.value(&coalition)
        })
        .collect();
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    // Marginals are grouped by coalition size and each group is summed in
    // sorted order, so interchangeable members get bit-identical values.
    let mut out = BTreeMap::new();
    let mut by_size: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (i, &m) in members.iter().enumerate() {
        let bit = 1u32 << i;
        by_size.iter_mut().for_each(Vec::clear);
        for mask in 0u32..1 << n {
            if mask & bit == 0 {
                by_size[mask.count_ones() as usize].push(values[(mask | bit) as usize] - values[mask as usize]);
            }
        }
        let mut sv = 0.0;
        for (s, group) in by_size.iter_mut().enumerate() {
            group.sort_by(f64::total_cmp);
            let weight = fact[s] * fact[n - s - 1] / fact[n];
            sv += weight * group.iter().sum::<f64>();
        }
        out.insert(m, sv);
    }
    Ok(out)
}

/// `v(N) - v(N \ {i})` for every member.
pub fn loo_values<V: ValueFunction + ?Sized>(members: &[MinerId], v: &V) -> BTreeMap<MinerId, f64> {
    let members = sorted(members);
    let full = v.value(&members);
    members
        .iter()
        .map(|&m| {
            let rest: Vec<MinerId> = members.iter().copied().filter(|&o| o != m).collect();
            (m, full - v.value(&rest))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinerValue {
    pub miner: MinerId,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub estimator: Estimator,
    pub iterations: u32,
    /// One entry per member, ascending id.
    pub values: Vec<MinerValue>,
}

impl ShapleyReport {
    /// Report for a deterministic estimator (zero spread, one iteration).
    pub fn point(estimator: Estimator, values: &BTreeMap<MinerId, f64>) -> Self {
        ShapleyReport {
            estimator,
            iterations: 1,
            values: values.iter().map(|(&miner, &mean)| MinerValue { miner, mean, std: 0.0 }).collect(),
        }
    }

    pub fn mean_of(&self, miner: MinerId) -> Option<f64> {
        self.values.iter().find(|v| v.miner == miner).map(|v| v.mean)
    }

    pub fn members(&self) -> Vec<MinerId> {
        self.values.iter().map(|v| v.miner).collect()
    }
}

/// Per-member mean and sample standard deviation of per-permutation
/// marginals; `marginals[p][i]` belongs to `members[i]` (ascending).
pub fn summarize(estimator: Estimator, members: &[MinerId], marginals: &[Vec<f64>]) -> ShapleyReport {
    let iters = marginals.len();
    let values = members
        .iter()
        .enumerate()
        .map(|(i, &miner)| {
            let mean = marginals.iter().map(|p| p[i]).sum::<f64>() / iters as f64;
            let std = if iters > 1 {
                let ss: f64 = marginals.iter().map(|p| (p[i] - mean) * (p[i] - mean)).sum();
                libm::sqrt(ss / (iters - 1) as f64)
            } else {
                0.0
            };
            MinerValue { miner, mean, std }
        })
        .collect();
    ShapleyReport { estimator, iterations: iters as u32, values }
}

/// Uniform permutation of `members` for permutation number `index`.
pub fn permutation(members: &[MinerId], seed: u64, index: u32) -> Vec<MinerId> {
    let mut perm = members.to_vec();
    perm.shuffle(&mut rng::stream(seed, "shapley-permutation", u64::from(index)));
    perm
}

/// Truncated Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmcParams {
    /// Walks stop once `|v(prefix) - v(N)| < truncation_tol`.
    pub truncation_tol: f64,
    pub permutations: u32,
    pub seed: u64,
}

impl TmcParams {
    pub fn validate(&self) -> Result<()> {
        if self.permutations == 0 {
            return Err(Error::BadParams("TMC needs at least one permutation".into()));
        }
        if self.truncation_tol.is_nan() || self.truncation_tol < 0.0 {
            return Err(Error::BadParams(format!("truncation tolerance {} is invalid", self.truncation_tol)));
        }
        Ok(())
    }
}

/// Marginals of one TMC walk, aligned with ascending `members`. After each
/// step the walk checks the truncation rule; once it fires every later
/// member gets a zero marginal.
pub fn tmc_marginals<V: ValueFunction + ?Sized>(
    members: &[MinerId],
    v: &V,
    v_empty: f64,
    v_full: f64,
    params: &TmcParams,
    index: u32,
) -> Vec<f64> {
    let mut marginals = vec![0.0; members.len()];
    let mut prefix: Vec<MinerId> = Vec::with_capacity(members.len());
    let mut prev = v_empty;
    for m in permutation(members, params.seed, index) {
        let pos = prefix.binary_search(&m).unwrap_or_else(|p| p);
        prefix.insert(pos, m);
        let cur = v.value(&prefix);
        let slot = members.binary_search(&m).expect("member");
        marginals[slot] = cur - prev;
        prev = cur;
        if libm::fabs(prev - v_full) < params.truncation_tol {
            break;
        }
    }
    marginals
}

pub fn tmc_shapley<V: ValueFunction + ?Sized>(members: &[MinerId], v: &V, params: &TmcParams) -> Result<ShapleyReport> {
    params.validate()?;
    let members = sorted(members);
    let v_empty = v.value(&[]);
    let v_full = v.value(&members);
    let marginals: Vec<Vec<f64>> =
        (0..params.permutations).map(|p| tmc_marginals(&members, v, v_empty, v_full, params, p)).collect();
    Ok(summarize(Estimator::Tmc, &members, &marginals))
}

/// Gradient Shapley inputs: one full-shard gradient step per member along
/// each permutation, valued by held-out accuracy gain.
#[derive(Debug, Clone)]
pub struct GShapleyParams<'a> {
    pub params0: &'a ModelParams,
    pub dataset: &'a Dataset,
    pub shards: &'a [Shard],
    pub holdout: &'a [usize],
    pub learning_rate: f64,
    pub permutations: u32,
    pub seed: u64,
}

impl GShapleyParams<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.permutations == 0 {
            return Err(Error::BadParams("G-Shapley needs at least one permutation".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::BadParams(format!("learning rate {} is invalid", self.learning_rate)));
        }
        Ok(())
    }
}

pub fn g_shapley_marginals(members: &[MinerId], p: &GShapleyParams<'_>, index: u32) -> Result<Vec<f64>> {
    let mut marginals = vec![0.0; members.len()];
    let mut model = p.params0.clone();
    let mut prev = learner::evaluate_on(&model, p.dataset, p.holdout)?;
    for m in permutation(members, p.seed, index) {
        let shard = shard_of(p.shards, m)?;
        let (_, grad) = learner::loss_and_gradient(&model, p.dataset, &shard.indices)?;
        model.add_scaled(&grad, -p.learning_rate)?;
        let cur = learner::evaluate_on(&model, p.dataset, p.holdout)?;
        marginals[members.binary_search(&m).expect("member")] = cur - prev;
        prev = cur;
    }
    Ok(marginals)
}

pub fn g_shapley(members: &[MinerId], p: &GShapleyParams<'_>) -> Result<ShapleyReport> {
    p.validate()?;
    let members = sorted(members);
    let marginals = (0..p.permutations)
        .map(|i| g_shapley_marginals(&members, p, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(Estimator::GShapley, &members, &marginals))
}

/// Members sorted by mean value (descending or ascending); ties go to the
/// lower id.
pub fn reservation_order(report: &ShapleyReport, direction: ReservationOrder) -> Vec<MinerId> {
    let mut entries: Vec<(MinerId, f64)> = report.values.iter().map(|v| (v.miner, v.mean)).collect();
    entries.sort_by(|a, b| {
        let by_value = match direction {
            ReservationOrder::Descending => b.1.total_cmp(&a.1),
            ReservationOrder::Ascending => a.1.total_cmp(&b.1),
        };
        by_value.then(a.0.cmp(&b.0))
    });
    entries.into_iter().map(|(m, _)| m).collect()
}

/// `(k, v(top-k prefix of order))` for `k = |order|` down to 1.
pub fn pool_shrink_experiment<V: ValueFunction + ?Sized>(order: &[MinerId], v: &V) -> Vec<(usize, f64)> {
    (1..=order.len())
        .rev()
        .map(|k| (k, v.value(&sorted(&order[..k]))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<MinerId> {
        (0..n).map(MinerId).collect()
    }

    #[test]
    fn cardinality_game() {
        let v = |s: &[MinerId]| s.len() as f64;
        let sv = exact_shapley(&ids(3), &v).unwrap();
        for m in ids(3) {
            assert!((sv[&m] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_rejects_large_pools() {
        let v = |s: &[MinerId]| s.len() as f64;
        assert_eq!(exact_shapley(&ids(11), &v), Err(Error::TooManyMembers { got: 11, max: 10 }));
    }

    #[test]
    fn loo_single_member() {
        let v = |s: &[MinerId]| if s.is_empty() { 0.1 } else { 0.7 };
        let loo = loo_values(&[MinerId(4)], &v);
        assert!((loo[&MinerId(4)] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn loo_of_twins_is_zero() {
        // Value depends only on whether the shared shard is present.
        let v = |s: &[MinerId]| {
            let twin = s.iter().any(|m| m.0 == 0 || m.0 == 1);
            0.2 + if twin { 0.5 } else { 0.0 } + 0.1 * s.iter().filter(|m| m.0 == 2).count() as f64
        };
        let loo = loo_values(&ids(3), &v);
        assert_eq!(loo[&MinerId(0)], 0.0);
        assert_eq!(loo[&MinerId(1)], 0.0);
    }

    #[test]
    fn tmc_infinite_tolerance_keeps_first_position_only() {
        let w = [1.0, 2.0, 3.0];
        let v = |s: &[MinerId]| s.iter().map(|m| w[m.index()]).sum::<f64>();
        let p = TmcParams { truncation_tol: f64::INFINITY, permutations: 1, seed: 3 };
        let members = ids(3);
        let marg = tmc_marginals(&members, &v, 0.0, 6.0, &p, 0);
        let first = permutation(&members, 3, 0)[0];
        for (i, m) in members.iter().enumerate() {
            let expected = if *m == first { w[m.index()] } else { 0.0 };
            assert_eq!(marg[i], expected);
        }
    }

    #[test]
    fn tmc_bad_params() {
        let v = |s: &[MinerId]| s.len() as f64;
        let p = TmcParams { truncation_tol: 0.0, permutations: 0, seed: 0 };
        assert!(matches!(tmc_shapley(&ids(2), &v, &p), Err(Error::BadParams(_))));
        let p = TmcParams { truncation_tol: -1.0, permutations: 4, seed: 0 };
        assert!(matches!(tmc_shapley(&ids(2), &v, &p), Err(Error::BadParams(_))));
    }

    #[test]
    fn reservation_orders() {
        let report = ShapleyReport {
            estimator: Estimator::Loo,
            iterations: 1,
            values: [0.3, 0.1, 0.5]
                .iter()
                .enumerate()
                .map(|(i, &mean)| MinerValue { miner: MinerId(i as u32), mean, std: 0.0 })
                .collect(),
        };
        assert_eq!(reservation_order(&report, ReservationOrder::Descending), vec![MinerId(2), MinerId(0), MinerId(1)]);
        assert_eq!(reservation_order(&report, ReservationOrder::Ascending), vec![MinerId(1), MinerId(0), MinerId(2)]);

        let flat = ShapleyReport::point(Estimator::Loo, &ids(4).into_iter().map(|m| (m, 0.2)).collect());
        assert_eq!(reservation_order(&flat, ReservationOrder::Descending), ids(4));
        assert_eq!(reservation_order(&flat, ReservationOrder::Ascending), ids(4));
    }

    #[test]
    fn shrink_curve_walks_prefixes() {
        let v = |s: &[MinerId]| s.iter().map(|m| m.0 as f64).sum::<f64>();
        let curve = pool_shrink_experiment(&[MinerId(5), MinerId(1), MinerId(3)], &v);
        assert_eq!(curve, vec![(3, 9.0), (2, 6.0), (1, 5.0)]);
    }

    #[test]
    fn memo_evaluates_once_per_coalition() {
        let calls = RefCell::new(0);
        let v = |s: &[MinerId]| {
            *calls.borrow_mut() += 1;
            s.len() as f64
        };
        let memo = Memoized::new(v);
        let p = TmcParams { truncation_tol: 0.0, permutations: 50, seed: 1 };
        tmc_shapley(&ids(4), &memo, &p).unwrap();
        assert!(*calls.borrow() <= 16);
        assert_eq!(memo.evaluations(), *calls.borrow());
    }

    #[test]
    fn estimator_names() {
        assert_eq!(Estimator::parse("GShapley"), Some(Estimator::GShapley));
        assert_eq!(Estimator::parse("foo"), None);
    }
}
