//! Miner population, pairwise response times and visibility.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{MinerId, Role};
use crate::rng;

/// Smallest response time a generated link may have, in ms.
pub const MIN_RESPONSE_MS: f64 = 1.0;

/// Symmetric matrix of response times in milliseconds with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTimeMatrix {
    n: usize,
    rt: Vec<f64>,
}

impl ResponseTimeMatrix {
    /// Builds a matrix from rows, checking symmetry, the zero diagonal and
    /// positive off-diagonal entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::BadParams("response matrix needs at least one miner".into()));
        }
        let mut rt = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::BadParams(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            rt.extend_from_slice(row);
        }
        let m = ResponseTimeMatrix { n, rt };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::BadParams(format!("rt[{i}][{i}] must be 0")));
            }
            for j in (i + 1)..self.n {
                let a = self.get(i, j);
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::BadParams(format!("rt[{i}][{j}] must be positive, got {a}")));
                }
                if a != self.get(j, i) {
                    return Err(Error::BadParams(format!("rt[{i}][{j}] != rt[{j}][{i}]")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rt[i * self.n + j]
    }

    pub fn between(&self, a: MinerId, b: MinerId) -> f64 {
        self.get(a.index(), b.index())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rt[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rt.chunks(self.n)
    }

    /// Mean of all off-diagonal upper-triangle entries.
    pub fn off_diagonal_mean(&self) -> f64 {
        let pairs = self.n * (self.n - 1) / 2;
        if pairs == 0 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                sum += self.get(i, j);
            }
        }
        sum / pairs as f64
    }

    /// Every entry multiplied by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Self {
        ResponseTimeMatrix {
            n: self.n,
            rt: self.rt.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Samples the upper triangle i.i.d. from `Normal(mean, std)`, truncated
/// below at [`MIN_RESPONSE_MS`], and mirrors it.
pub fn gen_response_matrix(n: usize, mean: f64, std: f64, seed: u64) -> Result<ResponseTimeMatrix> {
    if n == 0 {
        return Err(Error::BadParams("n must be at least 1".into()));
    }
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::BadParams(format!("mean must be positive, got {mean}")));
    }
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::BadParams(format!("std must be non-negative, got {std}")));
    }
    let mut stream = rng::stream(seed, "response-time", 0);
    let mut rt = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng::normal(&mut stream, mean, std).max(MIN_RESPONSE_MS);
            rt[i * n + j] = v;
            rt[j * n + i] = v;
        }
    }
    Ok(ResponseTimeMatrix { n, rt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerProfile {
    pub id: MinerId,
    pub reliability: f64,
    pub roles: BTreeSet<Role>,
}

impl MinerProfile {
    pub fn new(id: MinerId) -> Self {
        MinerProfile {
            id,
            reliability: 1.0,
            roles: [Role::Trainer, Role::DataContributor].into_iter().collect(),
        }
    }
}

/// Response times plus a symmetric visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    matrix: ResponseTimeMatrix,
    visible: Vec<bool>,
}

impl Topology {
    /// Full visibility: every miner sees every other.
    pub fn new(matrix: ResponseTimeMatrix) -> Self {
        let n = matrix.len();
        let mut visible = vec![true; n * n];
        for i in 0..n {
            visible[i * n + i] = false;
        }
        Topology { matrix, visible }
    }

    pub fn matrix(&self) -> &ResponseTimeMatrix {
        &self.matrix
    }

    pub fn miner_count(&self) -> usize {
        self.matrix.len()
    }

    pub fn miners(&self) -> impl Iterator<Item = MinerId> {
        (0..self.miner_count() as u32).map(MinerId)
    }

    fn check_id(&self, id: MinerId) -> Result<()> {
        if id.index() < self.miner_count() {
            Ok(())
        } else {
            Err(Error::UnknownMiner(id))
        }
    }

    /// Hides the link between `a` and `b` in both directions.
    pub fn hide_link(&mut self, a: MinerId, b: MinerId) -> Result<()> {
        self.check_id(a)?;
        self.check_id(b)?;
        let n = self.miner_count();
        self.visible[a.index() * n + b.index()] = false;
        self.visible[b.index() * n + a.index()] = false;
        Ok(())
    }

    pub fn sees(&self, a: MinerId, b: MinerId) -> bool {
        let n = self.miner_count();
        a.index() < n && b.index() < n && self.visible[a.index() * n + b.index()]
    }

    pub fn visible_miners(&self, id: MinerId) -> Result<BTreeSet<MinerId>> {
        self.check_id(id)?;
        Ok(self.miners().filter(|&other| self.sees(id, other)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_matrix() {
        let m = gen_response_matrix(1, 10.0, 2.0, 1).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn bad_params() {
        assert!(matches!(gen_response_matrix(0, 10.0, 1.0, 1), Err(Error::BadParams(_))));
        assert!(matches!(gen_response_matrix(3, 0.0, 1.0, 1), Err(Error::BadParams(_))));
        assert!(matches!(gen_response_matrix(3, -4.0, 1.0, 1), Err(Error::BadParams(_))));
    }

    #[test]
    fn sample_mean_within_three_standard_errors() {
        let (n, mean, std) = (100usize, 50.0, 15.0);
        let m = gen_response_matrix(n, mean, std, 2024).unwrap();
        let pairs = (n * (n - 1) / 2) as f64;
        let bound = 3.0 * std / libm::sqrt(pairs);
        assert!((m.off_diagonal_mean() - mean).abs() < bound);
    }

    #[test]
    fn truncation_keeps_entries_positive() {
        let m = gen_response_matrix(40, 1.0, 20.0, 3).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                if i != j {
                    assert!(m.get(i, j) >= MIN_RESPONSE_MS);
                }
            }
        }
    }

    #[test]
    fn from_rows_rejects_asymmetry() {
        let rows = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        assert!(ResponseTimeMatrix::from_rows(&rows).is_err());
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(ResponseTimeMatrix::from_rows(&rows).is_ok());
    }

    #[test]
    fn visibility() {
        let topo = Topology::new(gen_response_matrix(3, 10.0, 1.0, 1).unwrap());
        let v: Vec<_> = topo.visible_miners(MinerId(0)).unwrap().into_iter().collect();
        assert_eq!(v, vec![MinerId(1), MinerId(2)]);

        let mut masked = topo.clone();
        masked.hide_link(MinerId(0), MinerId(2)).unwrap();
        let v: Vec<_> = masked.visible_miners(MinerId(0)).unwrap().into_iter().collect();
        assert_eq!(v, vec![MinerId(1)]);
        assert!(!masked.visible_miners(MinerId(2)).unwrap().contains(&MinerId(0)));

        assert_eq!(topo.visible_miners(MinerId(3)), Err(Error::UnknownMiner(MinerId(3))));
    }

    #[test]
    fn hundred_miners_see_ninety_nine() {
        let topo = Topology::new(gen_response_matrix(100, 10.0, 1.0, 1).unwrap());
        assert_eq!(topo.visible_miners(MinerId(42)).unwrap().len(), 99);
    }
}
