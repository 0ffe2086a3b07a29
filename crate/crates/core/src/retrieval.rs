//! Exact constrained k-nearest-neighbor search over an [`ExpressionBank`].
//!
//! Results are ordered by `(distance, identity_id, frame_id)`, ascending. The
//! optional identity exclusion removes every entry of one identity from the
//! candidate set, which is how a subject's own frames are kept out of its
//! substitutions.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{ExpressionBank, FeatureVector};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("cannot index an empty bank")]
    EmptyBank,
    #[error("requested {requested} neighbors but only {available} candidates satisfy the constraint")]
    InsufficientCandidates { requested: usize, available: usize },
    #[error("query dimension {got} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    pub entry_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryConstraint {
    pub exclude_identity: Option<String>,
}

impl QueryConstraint {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn excluding(identity: impl Into<String>) -> Self {
        Self { exclude_identity: Some(identity.into()) }
    }

    fn allows(&self, identity: &str) -> bool {
        self.exclude_identity.as_deref() != Some(identity)
    }
}

/// How a substitute is chosen among the constrained neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubstituteMode {
    Top1,
    TopKUniform(usize),
}

impl SubstituteMode {
    pub fn k(self) -> usize {
        match self {
            SubstituteMode::Top1 => 1,
            SubstituteMode::TopKUniform(k) => k,
        }
    }

    /// Picks one of the `k` sorted neighbors. `Top1` ignores the RNG address;
    /// `TopKUniform` draws uniformly, keyed by `(seed, draw_index)`.
    pub fn pick(self, neighbors: &[NeighborResult], seed: u64, draw_index: u64) -> NeighborResult {
        match self {
            SubstituteMode::Top1 => neighbors[0],
            SubstituteMode::TopKUniform(k) => {
                let k = k.min(neighbors.len());
                neighbors[rng::index_at(seed, &[rng::tag::NEIGHBOR_PICK, draw_index], k)]
            }
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn check_query(bank_dim: usize, query: &[f64], k: usize) -> Result<(), RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.len() != bank_dim {
        return Err(RetrievalError::DimensionMismatch { expected: bank_dim, got: query.len() });
    }
    Ok(())
}

/// Linear scan plus full sort. Serves as the reference the [`Index`] is
/// checked against.
pub fn brute_force_knn(
    bank: &ExpressionBank,
    query: &[f64],
    k: usize,
    constraint: &QueryConstraint,
) -> Result<Vec<NeighborResult>, RetrievalError> {
    check_query(bank.dim(), query, k)?;
    let mut all: Vec<NeighborResult> = bank
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| constraint.allows(&e.identity_id))
        .map(|(i, e)| NeighborResult { entry_index: i, distance: euclidean(query, e.feature.as_slice()) })
        .collect();
    if all.len() < k {
        return Err(RetrievalError::InsufficientCandidates { requested: k, available: all.len() });
    }
    all.sort_by(|a, b| {
        a.distance.total_cmp(&b.distance).then_with(|| {
            let (ea, eb) = (bank.entry(a.entry_index), bank.entry(b.entry_index));
            ea.identity_id.cmp(&eb.identity_id).then_with(|| ea.frame_id.cmp(&eb.frame_id))
        })
    });
    all.truncate(k);
    Ok(all)
}

/// Read-only search structure over a bank.
///
/// Features are packed into one row-major buffer. Each scan keeps a bounded
/// sorted buffer of the best `k` candidates and abandons a row once its
/// partial squared distance already exceeds the current k-th best. Rows that
/// are not abandoned have their distance summed in the same order as
/// [`brute_force_knn`], so reported distances are bit-identical.
#[derive(Debug, Clone)]
pub struct Index {
    bank: ExpressionBank,
    data: Vec<f64>,
    identity_code: Vec<u32>,
    codes: HashMap<String, u32>,
    code_counts: Vec<usize>,
    /// Position of each entry in `(identity_id, frame_id)` order.
    key_rank: Vec<u32>,
}

impl Index {
    pub fn build(bank: &ExpressionBank) -> Result<Self, RetrievalError> {
        if bank.is_empty() {
            return Err(RetrievalError::EmptyBank);
        }
        let mut data = Vec::with_capacity(bank.len() * bank.dim());
        let mut codes: HashMap<String, u32> = HashMap::new();
        let mut code_counts = Vec::new();
        let mut identity_code = Vec::with_capacity(bank.len());
        for e in bank.entries() {
            data.extend_from_slice(e.feature.as_slice());
            let next = codes.len() as u32;
            let code = *codes.entry(e.identity_id.clone()).or_insert(next);
            if code as usize == code_counts.len() {
                code_counts.push(0);
            }
            code_counts[code as usize] += 1;
            identity_code.push(code);
        }
        let mut order: Vec<usize> = (0..bank.len()).collect();
        order.sort_by(|&a, &b| {
            let (ea, eb) = (bank.entry(a), bank.entry(b));
            ea.identity_id.cmp(&eb.identity_id).then_with(|| ea.frame_id.cmp(&eb.frame_id))
        });
        let mut key_rank = vec![0u32; bank.len()];
        for (rank, &i) in order.iter().enumerate() {
            key_rank[i] = rank as u32;
        }
        Ok(Self { bank: bank.clone(), data, identity_code, codes, code_counts, key_rank })
    }

    pub fn bank(&self) -> &ExpressionBank {
        &self.bank
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn feature(&self, entry_index: usize) -> &FeatureVector {
        &self.bank.entry(entry_index).feature
    }

    /// Number of entries that satisfy `constraint`.
    pub fn candidate_count(&self, constraint: &QueryConstraint) -> usize {
        let excluded = constraint
            .exclude_identity
            .as_ref()
            .and_then(|id| self.codes.get(id))
            .map_or(0, |&c| self.code_counts[c as usize]);
        self.len() - excluded
    }

    pub fn knn_search(
        &self,
        query: &[f64],
        k: usize,
        constraint: &QueryConstraint,
    ) -> Result<Vec<NeighborResult>, RetrievalError> {
        check_query(self.dim(), query, k)?;
        let available = self.candidate_count(constraint);
        if available < k {
            return Err(RetrievalError::InsufficientCandidates { requested: k, available });
        }
        let excluded = constraint.exclude_identity.as_ref().and_then(|id| self.codes.get(id)).copied();
        let dim = self.dim();
        // (distance, rank, index), kept sorted ascending
        let mut best: Vec<(f64, u32, usize)> = Vec::with_capacity(k + 1);
        let mut bound_sq = f64::INFINITY;
        'rows: for (i, row) in self.data.chunks_exact(dim).enumerate() {
            if Some(self.identity_code[i]) == excluded {
                continue;
            }
            let mut acc = 0.0;
            for (x, q) in row.iter().zip(query) {
                let d = q - x;
                acc += d * d;
                if acc > bound_sq {
                    continue 'rows;
                }
            }
            let cand = (acc.sqrt(), self.key_rank[i], i);
            if best.len() == k {
                let worst = best[k - 1];
                if cand.0.total_cmp(&worst.0).then(cand.1.cmp(&worst.1)) != Ordering::Less {
                    continue;
                }
                best.pop();
            }
            let pos = best.partition_point(|b| b.0.total_cmp(&cand.0).then(b.1.cmp(&cand.1)) == Ordering::Less);
            best.insert(pos, cand);
            if best.len() == k {
                // margin keeps rows whose square root could tie the k-th distance
                let kth = best[k - 1].0;
                bound_sq = kth * kth * (1.0 + 1e-12);
            }
        }
        Ok(best.into_iter().map(|(distance, _, entry_index)| NeighborResult { entry_index, distance }).collect())
    }

    /// Runs many queries in parallel; output order matches input order.
    pub fn knn_search_batch(
        &self,
        queries: &[Vec<f64>],
        k: usize,
        constraint: &QueryConstraint,
    ) -> Vec<Result<Vec<NeighborResult>, RetrievalError>> {
        queries.par_iter().map(|q| self.knn_search(q, k, constraint)).collect()
    }

    /// Chooses a cross-identity substitute for `query`.
    pub fn sample_substitute(
        &self,
        query: &[f64],
        exclude_identity: Option<&str>,
        mode: SubstituteMode,
        seed: u64,
        draw_index: u64,
    ) -> Result<(FeatureVector, NeighborResult), RetrievalError> {
        let constraint = QueryConstraint { exclude_identity: exclude_identity.map(str::to_owned) };
        let neighbors = self.knn_search(query, mode.k(), &constraint)?;
        let chosen = mode.pick(&neighbors, seed, draw_index);
        Ok((self.feature(chosen.entry_index).clone(), chosen))
    }
}
