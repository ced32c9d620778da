//! Inference path: retrieve top-K, refine each candidate from its constraint
//! neighbors, and re-rank the K candidates by distance to the refined features.
//!
//! Items outside the initial top-K never enter the result; re-ranking only
//! permutes the retrieved candidates. Exact distance ties keep the retrieval
//! order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{adaptive_mof_weights, AdaptiveOptions};
use crate::constraints::{select_neighbors_into, ConstraintGraph};
use crate::error::{ensure_arg, Error, Result};
use crate::features::{knn_search, Candidate, CandidateList, FeatureMatrix, QueryFeature};
use crate::linalg;
use crate::mof::{refine_into, MoFWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct RerankResult {
    pub query_id: String,
    pub baseline: CandidateList,
    pub reranked: CandidateList,
    /// Wall time of the refine and sort stage only, retrieval excluded.
    pub refine_time_ns: u64,
}

/// How candidate neighbor sets are mixed.
#[derive(Debug, Clone)]
pub enum Mixer {
    /// Fixed (learned) weights.
    Learned(MoFWeights),
    /// Per-query scalar weights from neighbor-to-query similarity.
    Adaptive(AdaptiveOptions),
}

impl Mixer {
    fn l(&self, l: usize) -> usize {
        match self {
            Mixer::Learned(w) => w.l(),
            Mixer::Adaptive(_) => l,
        }
    }
}

pub fn rerank(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    weights: &MoFWeights,
    q: &QueryFeature,
    k: usize,
    l: usize,
) -> Result<RerankResult> {
    let mixer = Mixer::Learned(weights.clone());
    rerank_with(db, graph, &mixer, q, k, l)
}

fn check_inputs(db: &FeatureMatrix, graph: &ConstraintGraph, mixer: &Mixer, l: usize) -> Result<()> {
    ensure_arg!(
        graph.node_count() == db.len(),
        "graph has {} nodes but database has {} rows",
        graph.node_count(),
        db.len()
    );
    ensure_arg!(
        mixer.l(l) == l,
        "weights were trained for L = {} but L = {l} was requested",
        mixer.l(l)
    );
    if let Mixer::Learned(w) = mixer {
        w.check_dim(db.dim())?;
    }
    Ok(())
}

pub fn rerank_with(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    mixer: &Mixer,
    q: &QueryFeature,
    k: usize,
    l: usize,
) -> Result<RerankResult> {
    check_inputs(db, graph, mixer, l)?;
    let baseline = knn_search(db, q, k)?;
    refine_and_sort(db, graph, mixer, q, baseline, l)
}

/// The second stage alone: refines the given retrieval result and re-ranks it.
pub fn refine_and_sort(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    mixer: &Mixer,
    q: &QueryFeature,
    baseline: CandidateList,
    l: usize,
) -> Result<RerankResult> {
    check_inputs(db, graph, mixer, l)?;
    let q64 = q.to_f64();
    let dim = db.dim();

    let start = Instant::now();
    let mut neigh = Vec::with_capacity(l);
    let mut feats = vec![0.0; l * dim];
    let mut refined = vec![0.0; dim];
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(baseline.len());
    for (rank, cand) in baseline.entries.iter().enumerate() {
        select_neighbors_into(graph, cand.index, l, &mut neigh)?;
        for (slot, &n) in feats.chunks_exact_mut(dim).zip(&neigh) {
            for (o, &x) in slot.iter_mut().zip(db.row(n)) {
                *o = x as f64;
            }
        }
        match mixer {
            Mixer::Learned(w) => {
                refine_into(w, &feats, dim, &mut refined)?;
            }
            Mixer::Adaptive(opts) => {
                let w = adaptive_mof_weights(&q64, &feats, dim, opts)?;
                let w = MoFWeights::from_values(l, 1, w)?;
                refine_into(&w, &feats, dim, &mut refined)?;
            }
        }
        scored.push((linalg::sq_dist(&q64, &refined), rank));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let reranked = CandidateList {
        query_id: q.id.clone(),
        entries: scored
            .iter()
            .map(|&(d2, rank)| Candidate {
                index: baseline.entries[rank].index,
                distance: d2.sqrt(),
            })
            .collect(),
    };
    let refine_time_ns = start.elapsed().as_nanos() as u64;
    Ok(RerankResult {
        query_id: q.id.clone(),
        baseline,
        reranked,
        refine_time_ns,
    })
}

/// Re-ranks every query, optionally on a dedicated pool of `threads` workers.
/// Output order matches input order; a failing query does not stop the batch.
pub fn rerank_batch(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    weights: &MoFWeights,
    queries: &[QueryFeature],
    k: usize,
    l: usize,
    threads: Option<usize>,
) -> Vec<Result<RerankResult>> {
    rerank_batch_with(db, graph, &Mixer::Learned(weights.clone()), queries, k, l, threads)
}

pub fn rerank_batch_with(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    mixer: &Mixer,
    queries: &[QueryFeature],
    k: usize,
    l: usize,
    threads: Option<usize>,
) -> Vec<Result<RerankResult>> {
    let run = || -> Vec<Result<RerankResult>> {
        queries
            .par_iter()
            .map(|q| rerank_with(db, graph, mixer, q, k, l))
            .collect()
    };
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => queries
                .iter()
                .map(|_| Err(Error::Argument(format!("cannot start {n} worker threads: {e}"))))
                .collect(),
        },
        None => run(),
    }
}

/// One line of the result export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankRecord {
    pub query_id: String,
    pub baseline_indices: Vec<usize>,
    pub baseline_distances: Vec<f64>,
    pub reranked_indices: Vec<usize>,
    pub reranked_distances: Vec<f64>,
    pub refine_time_ns: u64,
}

impl From<&RerankResult> for RerankRecord {
    fn from(r: &RerankResult) -> Self {
        let split = |l: &CandidateList| {
            (
                l.indices(),
                l.entries.iter().map(|c| c.distance).collect::<Vec<_>>(),
            )
        };
        let (baseline_indices, baseline_distances) = split(&r.baseline);
        let (reranked_indices, reranked_distances) = split(&r.reranked);
        Self {
            query_id: r.query_id.clone(),
            baseline_indices,
            baseline_distances,
            reranked_indices,
            reranked_distances,
            refine_time_ns: r.refine_time_ns,
        }
    }
}

impl RerankRecord {
    fn list(&self, indices: &[usize], distances: &[f64]) -> Result<CandidateList> {
        if indices.len() != distances.len() {
            return Err(Error::Data(format!(
                "query {}: {} indices but {} distances",
                self.query_id,
                indices.len(),
                distances.len()
            )));
        }
        Ok(CandidateList {
            query_id: self.query_id.clone(),
            entries: indices
                .iter()
                .zip(distances)
                .map(|(&index, &distance)| Candidate { index, distance })
                .collect(),
        })
    }

    pub fn into_result(self) -> Result<RerankResult> {
        let baseline = self.list(&self.baseline_indices, &self.baseline_distances)?;
        let reranked = self.list(&self.reranked_indices, &self.reranked_distances)?;
        Ok(RerankResult {
            query_id: self.query_id,
            baseline,
            reranked,
            refine_time_ns: self.refine_time_ns,
        })
    }
}

pub fn save_results(path: impl AsRef<Path>, results: &[RerankResult]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        serde_json::to_writer(&mut w, &RerankRecord::from(r))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RerankResult>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RerankRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec.into_result()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ConstraintKind, GraphParams};
    use crate::mof::MixMode;

    fn db() -> FeatureMatrix {
        FeatureMatrix::from_rows(
            2,
            vec![1.0, 0.0, 0.8, 0.6, 0.6, 0.8, 0.0, 1.0, -1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn identity_weights_keep_baseline_order() {
        let db = db();
        let g = ConstraintGraph::from_edges(
            ConstraintKind::Gps,
            GraphParams::Gps { epsilon_m: 1.0 },
            5,
            [(0, 3, -1.0), (1, 2, -0.5)],
        )
        .unwrap();
        let w = MoFWeights::identity(3, 2, MixMode::Elementwise).unwrap();
        let q = QueryFeature::new("q", vec![0.9, 0.3]).unwrap();
        let r = rerank(&db, &g, &w, &q, 4, 3).unwrap();
        assert_eq!(r.reranked.indices(), r.baseline.indices());
        assert_eq!(r.reranked.entries, r.baseline.entries);
    }

    #[test]
    fn mismatched_l_is_rejected() {
        let db = db();
        let g = ConstraintGraph::empty(ConstraintKind::Gps, 5);
        let w = MoFWeights::identity(3, 2, MixMode::Elementwise).unwrap();
        let q = QueryFeature::new("q", vec![1.0, 0.0]).unwrap();
        assert!(rerank(&db, &g, &w, &q, 2, 4).is_err());
        let small = ConstraintGraph::empty(ConstraintKind::Gps, 4);
        assert!(rerank(&db, &small, &w, &q, 2, 3).is_err());
    }

    #[test]
    fn batch_edge_cases_and_error_collection() {
        let db = db();
        let g = ConstraintGraph::empty(ConstraintKind::Gps, 5);
        let w = MoFWeights::uniform(2, 2, MixMode::Elementwise).unwrap();
        assert!(rerank_batch(&db, &g, &w, &[], 3, 2, Some(2)).is_empty());

        let q = QueryFeature::new("a", vec![0.2, 1.0]).unwrap();
        let bad = QueryFeature::new("b", vec![1.0, 0.0, 0.0]).unwrap();
        let out = rerank_batch(&db, &g, &w, &[q.clone(), bad, q.clone()], 3, 2, Some(1));
        assert!(out[0].is_ok() && out[1].is_err() && out[2].is_ok());
        let single = rerank(&db, &g, &w, &q, 3, 2).unwrap();
        let batched = out[0].as_ref().unwrap();
        assert_eq!(batched.reranked, single.reranked);
        assert_eq!(batched.baseline, single.baseline);
    }

    #[test]
    fn export_round_trip() {
        let db = db();
        let g = ConstraintGraph::empty(ConstraintKind::Gps, 5);
        let w = MoFWeights::identity(1, 2, MixMode::Elementwise).unwrap();
        let q = QueryFeature::new("q", vec![0.2, 1.0]).unwrap();
        let r = rerank(&db, &g, &w, &q, 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        save_results(&path, std::slice::from_ref(&r)).unwrap();
        let back = load_results(&path).unwrap();
        assert_eq!(back, vec![r]);
    }
}
