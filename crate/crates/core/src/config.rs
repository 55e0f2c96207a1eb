//! Scenario configuration and its validation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::StalenessDecay;
use crate::valuation::{Estimator, ReservationOrder, MAX_EXACT_MEMBERS};

/// Synthetic dataset parameters, or IDX files loaded by the front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub idx_images: Option<String>,
    pub idx_labels: Option<String>,
    /// Keep only the first `idx_limit` IDX samples.
    pub idx_limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 10,
            per_class: 300,
            dim: 20,
            separation: 2.0,
            idx_images: None,
            idx_labels: None,
            idx_limit: None,
        }
    }
}

impl DatasetConfig {
    pub fn uses_idx(&self) -> bool {
        self.idx_images.is_some() || self.idx_labels.is_some()
    }
}

mod defaults {
    use crate::fedavg::StalenessDecay;

    pub fn holdout_fraction() -> f64 {
        0.2
    }
    pub fn value_rounds() -> u32 {
        5
    }
    pub fn permutations() -> u32 {
        200
    }
    pub fn truncation_tol() -> f64 {
        0.01
    }
    pub fn decay() -> StalenessDecay {
        StalenessDecay::Inverse
    }
    pub fn epoch_ms_mean() -> f64 {
        5.0
    }
    pub fn epoch_ms_std() -> f64 {
        1.0
    }
    pub fn partnership_threshold() -> usize {
        2
    }
    pub fn core_rounds() -> u32 {
        3
    }
    pub fn sub_blocks() -> u32 {
        8
    }
    pub fn challenge_subsets() -> usize {
        2
    }
    pub fn challenge_subset_size() -> usize {
        10
    }
    pub fn challenge_issuers() -> usize {
        3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub miner_count: usize,
    pub samples_per_miner: usize,
    /// Sub-block length in ms; also the candidate-list budget and each
    /// miner's per-sub-block scheduling capacity.
    pub sub_block_time: f64,
    pub core_pool_threshold: usize,
    pub pool_size_cap: usize,
    pub audits_min: u64,
    pub challenges_min: u64,
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub rt_mean: f64,
    pub rt_std: f64,
    pub master_seed: u64,
    pub sv_estimator: Estimator,
    pub reservation_order: ReservationOrder,

    #[serde(default)]
    pub dataset: DatasetConfig,
    /// CSV file pinning the response-time matrix, read by the front end.
    #[serde(default)]
    pub response_matrix: Option<String>,
    /// Hidden width; `None` trains a multinomial logistic model.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "defaults::holdout_fraction")]
    pub holdout_fraction: f64,
    /// Global rounds the value function retrains for.
    #[serde(default = "defaults::value_rounds")]
    pub value_rounds: u32,
    #[serde(default = "defaults::permutations")]
    pub permutations: u32,
    #[serde(default = "defaults::truncation_tol")]
    pub truncation_tol: f64,
    /// Further estimators valued on the demonstration pool.
    #[serde(default)]
    pub extra_estimators: Vec<Estimator>,
    /// Minimum held-out accuracy for entering verification.
    #[serde(default)]
    pub qualification_floor: f64,
    #[serde(default = "defaults::decay")]
    pub staleness_decay: StalenessDecay,
    /// Mean and spread of one local epoch's compute time, ms.
    #[serde(default = "defaults::epoch_ms_mean")]
    pub epoch_ms_mean: f64,
    #[serde(default = "defaults::epoch_ms_std")]
    pub epoch_ms_std: f64,
    #[serde(default = "defaults::partnership_threshold")]
    pub partnership_threshold: usize,
    /// Sub-blocks of synchronous training before partnerships form.
    #[serde(default = "defaults::core_rounds")]
    pub core_rounds: u32,
    /// Sub-blocks in the simulated block.
    #[serde(default = "defaults::sub_blocks")]
    pub sub_blocks: u32,
    #[serde(default = "defaults::challenge_subsets")]
    pub challenge_subsets: usize,
    #[serde(default = "defaults::challenge_subset_size")]
    pub challenge_subset_size: usize,
    /// Data contributors issuing a challenge set each period.
    #[serde(default = "defaults::challenge_issuers")]
    pub challenge_issuers: usize,
}

impl Default for ScenarioConfig {
    /// The 100-miner demonstration scenario.
    fn default() -> Self {
        ScenarioConfig {
            miner_count: 100,
            samples_per_miner: 30,
            sub_block_time: 100_000.0,
            core_pool_threshold: 19,
            pool_size_cap: 20,
            audits_min: 1,
            challenges_min: 2,
            local_epochs: 2,
            learning_rate: 0.1,
            rt_mean: 50.0,
            rt_std: 15.0,
            master_seed: 7,
            sv_estimator: Estimator::GShapley,
            reservation_order: ReservationOrder::Descending,
            dataset: DatasetConfig::default(),
            response_matrix: None,
            hidden: None,
            holdout_fraction: defaults::holdout_fraction(),
            value_rounds: defaults::value_rounds(),
            permutations: defaults::permutations(),
            truncation_tol: defaults::truncation_tol(),
            extra_estimators: Vec::new(),
            qualification_floor: 0.0,
            staleness_decay: defaults::decay(),
            epoch_ms_mean: defaults::epoch_ms_mean(),
            epoch_ms_std: defaults::epoch_ms_std(),
            partnership_threshold: defaults::partnership_threshold(),
            core_rounds: defaults::core_rounds(),
            sub_blocks: defaults::sub_blocks(),
            challenge_subsets: defaults::challenge_subsets(),
            challenge_subset_size: defaults::challenge_subset_size(),
            challenge_issuers: defaults::challenge_issuers(),
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::ConfigInvalid { field, reason: reason.into() }
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be a positive finite number, got {v}")))
    }
}

fn non_negative(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be a non-negative finite number, got {v}")))
    }
}

fn nonzero(field: &'static str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(invalid(field, "must be positive"))
    }
}

impl ScenarioConfig {
    /// Estimators valued on the demonstration pool, configured one first.
    pub fn estimators(&self) -> Vec<Estimator> {
        let mut out = alloc::vec![self.sv_estimator];
        for &e in &self.extra_estimators {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        out
    }

    /// Field checks first, then the degenerate population (fewer than three
    /// miners can never seed a pool), then the pool-size ordering.
    pub fn validate(&self) -> Result<()> {
        nonzero("miner_count", self.miner_count)?;
        nonzero("samples_per_miner", self.samples_per_miner)?;
        positive("sub_block_time", self.sub_block_time)?;
        nonzero("core_pool_threshold", self.core_pool_threshold)?;
        nonzero("pool_size_cap", self.pool_size_cap)?;
        nonzero("local_epochs", self.local_epochs as usize)?;
        positive("learning_rate", self.learning_rate)?;
        positive("rt_mean", self.rt_mean)?;
        non_negative("rt_std", self.rt_std)?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(invalid("holdout_fraction", "must lie strictly between 0 and 1"));
        }
        nonzero("value_rounds", self.value_rounds as usize)?;
        nonzero("permutations", self.permutations as usize)?;
        if self.truncation_tol.is_nan() || self.truncation_tol < 0.0 {
            return Err(invalid("truncation_tol", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.qualification_floor) {
            return Err(invalid("qualification_floor", "must lie in [0, 1]"));
        }
        if let StalenessDecay::Polynomial { exponent } = self.staleness_decay {
            non_negative("staleness_decay", exponent)?;
        }
        non_negative("epoch_ms_mean", self.epoch_ms_mean)?;
        non_negative("epoch_ms_std", self.epoch_ms_std)?;
        nonzero("sub_blocks", self.sub_blocks as usize)?;
        nonzero("core_rounds", self.core_rounds as usize)?;
        nonzero("challenge_subsets", self.challenge_subsets)?;
        nonzero("challenge_subset_size", self.challenge_subset_size)?;
        if self.challenge_subset_size > self.samples_per_miner {
            return Err(invalid("challenge_subset_size", "exceeds samples_per_miner"));
        }
        if self.hidden == Some(0) {
            return Err(invalid("hidden", "must be positive"));
        }
        let d = &self.dataset;
        if !d.uses_idx() {
            if d.classes < 2 {
                return Err(invalid("dataset", "needs at least two classes"));
            }
            nonzero("dataset", d.per_class)?;
            if d.dim < d.classes {
                return Err(invalid("dataset", "dim must be at least the class count"));
            }
            non_negative("dataset", d.separation)?;
            let n = d.classes * d.per_class;
            let holdout = libm::ceil(self.holdout_fraction * n as f64) as usize;
            if n - holdout.min(n) < self.samples_per_miner {
                return Err(invalid("dataset", format!("{} training samples cannot fill a shard of {}", n - holdout.min(n), self.samples_per_miner)));
            }
        } else if d.idx_images.is_none() || d.idx_labels.is_none() {
            return Err(invalid("dataset", "IDX input needs both idx_images and idx_labels"));
        }
        if self.miner_count < 3 {
            return Err(Error::NoPoolFormed);
        }
        if self.pool_size_cap < 3 {
            return Err(invalid("pool_size_cap", "a pool is seeded with three miners"));
        }
        if self.core_pool_threshold > self.pool_size_cap {
            return Err(invalid("core_pool_threshold", "exceeds pool_size_cap"));
        }
        if self.pool_size_cap > self.miner_count {
            return Err(invalid("pool_size_cap", "exceeds miner_count"));
        }
        if self.challenge_issuers > self.miner_count {
            return Err(invalid("challenge_issuers", "exceeds miner_count"));
        }
        if self.estimators().contains(&Estimator::Exact) && self.pool_size_cap > MAX_EXACT_MEMBERS {
            return Err(invalid("sv_estimator", format!("EXACT supports pools of at most {MAX_EXACT_MEMBERS} members")));
        }
        Ok(())
    }
}
