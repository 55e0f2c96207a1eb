//! Thread-parallel Monte Carlo valuation.
//!
//! Each permutation draws from its own seed and marginals are collected in
//! permutation order, so the report equals the sequential one bit for bit.

use std::collections::BTreeMap;
use std::sync::Mutex;

use poflsc_core::sim::Valuator;
use poflsc_core::valuation::{
    g_shapley_marginals, summarize, tmc_marginals, Estimator, FederatedValue, GShapleyParams, ShapleyReport, TmcParams,
    ValueFunction,
};
use poflsc_core::{MinerId, Result};
use rayon::prelude::*;

pub const THREADS_ENV: &str = "POFLSC_THREADS";

/// Coalition cache shared between worker threads.
pub struct SharedMemo<V> {
    inner: V,
    cache: Mutex<BTreeMap<Vec<MinerId>, f64>>,
}

impl<V: ValueFunction> SharedMemo<V> {
    pub fn new(inner: V) -> Self {
        SharedMemo { inner, cache: Mutex::new(BTreeMap::new()) }
    }
}

impl<V: ValueFunction> ValueFunction for SharedMemo<V> {
    fn value(&self, coalition: &[MinerId]) -> f64 {
        if let Some(&v) = self.cache.lock().expect("memo lock").get(coalition) {
            return v;
        }
        // Two threads may race to compute the same coalition; both get the
        // same deterministic value.
        let v = self.inner.value(coalition);
        self.cache.lock().expect("memo lock").insert(coalition.to_vec(), v);
        v
    }
}

pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    pub fn with_threads(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        Parallel { pool }
    }

    /// Worker count from `POFLSC_THREADS`, else the machine's parallelism.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
        Parallel::with_threads(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

fn sorted(members: &[MinerId]) -> Vec<MinerId> {
    let mut m = members.to_vec();
    m.sort_unstable();
    m.dedup();
    m
}

impl Valuator for Parallel {
    fn tmc(&self, members: &[MinerId], v: &FederatedValue<'_>, params: &TmcParams) -> Result<ShapleyReport> {
        params.validate()?;
        let members = sorted(members);
        let memo = SharedMemo::new(v.clone());
        let v_empty = memo.value(&[]);
        let v_full = memo.value(&members);
        let marginals: Vec<Vec<f64>> = self.pool.install(|| {
            (0..params.permutations)
                .into_par_iter()
                .map(|p| tmc_marginals(&members, &memo, v_empty, v_full, params, p))
                .collect()
        });
        Ok(summarize(Estimator::Tmc, &members, &marginals))
    }

    fn g_shapley(&self, members: &[MinerId], params: &GShapleyParams<'_>) -> Result<ShapleyReport> {
        params.validate()?;
        let members = sorted(members);
        let marginals = self.pool.install(|| {
            (0..params.permutations)
                .into_par_iter()
                .map(|p| g_shapley_marginals(&members, params, p))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(summarize(Estimator::GShapley, &members, &marginals))
    }
}
