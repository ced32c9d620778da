//! Global-feature re-ranking baselines: query expansion, database-side
//! augmentation, a SuperGlobal-style candidate refinement and similarity-
//! weighted (adaptive) mixing.
//!
//! The SuperGlobal variant here is an approximate reconstruction meant for
//! comparison runs, not a faithful port of the published method.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::features::{knn_search, knn_search_vec, Candidate, CandidateList, FeatureMatrix, QueryFeature};
use crate::linalg;
use crate::mof::MIN_MIX_NORM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Mixing factor: the weight kept by the original vector in QE, and the
    /// weight given to the neighbor mean in SuperGlobal refinement.
    pub beta: f64,
    pub k_neighbors: usize,
    /// Number of top candidates refined by SuperGlobal.
    pub top_m: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            k_neighbors: 5,
            top_m: 100,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.top_m == 0 {
            return Err(Error::Config("top_m must be at least 1".into()));
        }
        Ok(())
    }
}

fn mean_rows(db: &FeatureMatrix, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; db.dim()];
    let mut n = 0usize;
    for i in rows {
        for (a, &x) in acc.iter_mut().zip(db.row(i)) {
            *a += x as f64;
        }
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    acc
}

/// The `k` nearest rows to row `i`, excluding `i` itself.
fn nearest_other_rows(db: &FeatureMatrix, i: usize, k: usize) -> Result<Vec<usize>> {
    let q: Vec<f64> = db.row(i).iter().map(|&x| x as f64).collect();
    let mut hits: Vec<usize> = knn_search_vec(db, &q, k + 1)?.iter().map(|c| c.index).collect();
    match hits.iter().position(|&j| j == i) {
        Some(pos) => {
            hits.remove(pos);
        }
        None => {
            hits.pop();
        }
    }
    Ok(hits)
}

/// Retrieves `k_neighbors` rows for `q`, blends their mean into the query
/// (`q_e = beta * q + (1 - beta) * mean`, not renormalized) and retrieves
/// `top_n` rows with the expanded query.
pub fn query_expansion(
    db: &FeatureMatrix,
    q: &QueryFeature,
    cfg: &BaselineConfig,
    top_n: usize,
) -> Result<CandidateList> {
    cfg.validate()?;
    ensure_arg!(cfg.k_neighbors >= 1, "query expansion needs k_neighbors >= 1");
    let first = knn_search(db, q, cfg.k_neighbors)?;
    let mean = mean_rows(db, first.entries.iter().map(|c| c.index));
    let expanded = expand_query(&q.to_f64(), &mean, cfg.beta);
    Ok(CandidateList {
        query_id: q.id.clone(),
        entries: knn_search_vec(db, &expanded, top_n)?,
    })
}

pub fn expand_query(q: &[f64], neighbor_mean: &[f64], beta: f64) -> Vec<f64> {
    q.iter()
        .zip(neighbor_mean)
        .map(|(&a, &m)| beta * a + (1.0 - beta) * m)
        .collect()
}

/// Replaces every row with the mean of itself and its `k_neighbors` nearest
/// other rows, then renormalizes. `k_neighbors = 0` returns the rows unchanged.
pub fn database_augmentation(db: &FeatureMatrix, cfg: &BaselineConfig) -> Result<FeatureMatrix> {
    let k = cfg.k_neighbors;
    if k == 0 {
        return Ok(db.clone());
    }
    ensure_arg!(
        k < db.len(),
        "k_neighbors = {k} must be smaller than the database size {}",
        db.len()
    );
    let rows: Vec<Vec<f32>> = (0..db.len())
        .into_par_iter()
        .map(|i| {
            let others = nearest_other_rows(db, i, k)?;
            let mean = mean_rows(db, std::iter::once(i).chain(others));
            Ok(mean.into_iter().map(|x| x as f32).collect())
        })
        .collect::<Result<_>>()?;
    FeatureMatrix::from_rows(db.dim(), rows.concat())
}

/// Refines each of the top `top_m` candidates as
/// `(1 - beta) * f_c + beta * mean(k nearest other rows)`, renormalizes, and
/// re-ranks them by distance to the query.
pub fn superglobal_refine(
    db: &FeatureMatrix,
    q: &QueryFeature,
    cfg: &BaselineConfig,
) -> Result<CandidateList> {
    cfg.validate()?;
    ensure_arg!(
        cfg.top_m <= db.len(),
        "top_m = {} exceeds database size {}",
        cfg.top_m,
        db.len()
    );
    ensure_arg!(
        cfg.k_neighbors < db.len(),
        "k_neighbors = {} must be smaller than the database size {}",
        cfg.k_neighbors,
        db.len()
    );
    let top = knn_search(db, q, cfg.top_m)?;
    let q64 = q.to_f64();
    let mut scored = Vec::with_capacity(top.len());
    for (rank, c) in top.entries.iter().enumerate() {
        let others = if cfg.k_neighbors == 0 {
            Vec::new()
        } else {
            nearest_other_rows(db, c.index, cfg.k_neighbors)?
        };
        let mean = mean_rows(db, others.into_iter());
        let own = db.row(c.index);
        let mut refined: Vec<f64> = own
            .iter()
            .zip(&mean)
            .map(|(&x, &m)| (1.0 - cfg.beta) * x as f64 + cfg.beta * m)
            .collect();
        if !linalg::normalize_in_place(&mut refined, MIN_MIX_NORM) {
            refined = db.unit_row(c.index);
        }
        scored.push((linalg::sq_dist(&q64, &refined), rank));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(CandidateList {
        query_id: q.id.clone(),
        entries: scored
            .into_iter()
            .map(|(d2, rank)| Candidate {
                index: top.entries[rank].index,
                distance: d2.sqrt(),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOptions {
    /// Clamp negative similarities to zero before normalizing.
    pub clamp_negative: bool,
    pub eps: f64,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            clamp_negative: true,
            eps: 1e-8,
        }
    }
}

/// Per-neighbor scalar weights proportional to cosine similarity with the
/// query: `w_j = sim_j / (sum_k sim_k + eps)`.
pub fn adaptive_mof_weights(
    query: &[f64],
    neighbor_feats: &[f64],
    dim: usize,
    opts: &AdaptiveOptions,
) -> Result<Vec<f64>> {
    ensure_arg!(
        query.len() == dim && dim > 0 && neighbor_feats.len() % dim == 0,
        "neighbor features ({} values) do not match dimension {dim}",
        neighbor_feats.len()
    );
    let qn = linalg::norm(query);
    let sims: Vec<f64> = neighbor_feats
        .chunks_exact(dim)
        .map(|f| {
            let s = linalg::dot(f, query) / (linalg::norm(f) * qn + opts.eps);
            if opts.clamp_negative {
                s.max(0.0)
            } else {
                s
            }
        })
        .collect();
    let denom = sims.iter().sum::<f64>() + opts.eps;
    Ok(sims.into_iter().map(|s| s / denom).collect())
}
