//! Ground truth, Recall@K scoring, synthetic benchmarks and latency timing.

mod bench;
mod synth;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CandidateList, Record};
use crate::pipeline::RerankResult;

pub use bench::{latency_bench, LatencyReport, LatencyStats};
pub use synth::{
    brute_force_recall_check, generate_synthetic, SynthCheck, SynthSpec, SyntheticDataset, QuerySet,
};

pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 5, 10, 20];

/// Per-query sets of positive database rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    positives: BTreeMap<String, Vec<usize>>,
    /// Rows that are neither positive nor negative for a query (for example
    /// inside a timestamp margin band). Skipped when labeling training data.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    ignored: BTreeMap<String, Vec<usize>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a query; positives are stored sorted and deduplicated.
    pub fn insert(&mut self, query_id: impl Into<String>, mut positives: Vec<usize>) -> Result<()> {
        let id = query_id.into();
        positives.sort_unstable();
        positives.dedup();
        if self.positives.insert(id.clone(), positives).is_some() {
            return Err(Error::Data(format!("duplicate query id {id} in ground truth")));
        }
        Ok(())
    }

    pub fn set_ignored(&mut self, query_id: &str, mut rows: Vec<usize>) {
        rows.sort_unstable();
        rows.dedup();
        self.ignored.insert(query_id.to_owned(), rows);
    }

    pub fn positives(&self, query_id: &str) -> Result<&[usize]> {
        self.positives
            .get(query_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Argument(format!("no ground truth for query {query_id}")))
    }

    pub fn ignored(&self, query_id: &str) -> &[usize] {
        self.ignored.get(query_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Combines ground truth for disjoint query sets.
    pub fn merge(&mut self, other: GroundTruth) -> Result<()> {
        for (id, pos) in other.positives {
            self.insert(id, pos)?;
        }
        self.ignored.extend(other.ignored);
        Ok(())
    }
}

fn gps_or_err(r: &Record) -> Result<[f64; 2]> {
    r.gps
        .ok_or_else(|| Error::Data(format!("record {} has no gps", r.id)))
}

/// Positives are database rows within `epsilon_m` planar meters of the query.
pub fn build_ground_truth(query_meta: &[Record], db_meta: &[Record], epsilon_m: f64) -> Result<GroundTruth> {
    if epsilon_m.is_nan() || epsilon_m < 0.0 {
        return Err(Error::Argument(format!("epsilon must be non-negative, got {epsilon_m}")));
    }
    let db = db_meta.iter().map(gps_or_err).collect::<Result<Vec<_>>>()?;
    let per_query: Vec<(String, Vec<usize>)> = query_meta
        .par_iter()
        .map(|q| {
            let g = gps_or_err(q)?;
            let pos = db
                .iter()
                .enumerate()
                .filter(|(_, p)| (p[0] - g[0]).hypot(p[1] - g[1]) <= epsilon_m)
                .map(|(i, _)| i)
                .collect();
            Ok((q.id.clone(), pos))
        })
        .collect::<Result<_>>()?;
    let mut gt = GroundTruth::new();
    for (id, pos) in per_query {
        gt.insert(id, pos)?;
    }
    Ok(gt)
}

/// Positives within `t` seconds; rows in `(t, t + t_margin]` are ignored.
pub fn build_ground_truth_timestamps(
    query_meta: &[Record],
    db_meta: &[Record],
    t: f64,
    t_margin: f64,
) -> Result<GroundTruth> {
    let ts = |r: &Record| {
        r.timestamp
            .ok_or_else(|| Error::Data(format!("record {} has no timestamp", r.id)))
    };
    let db = db_meta.iter().map(ts).collect::<Result<Vec<_>>>()?;
    let mut gt = GroundTruth::new();
    for q in query_meta {
        let tq = ts(q)?;
        let mut pos = Vec::new();
        let mut band = Vec::new();
        for (i, &t_i) in db.iter().enumerate() {
            let d = (t_i - tq).abs();
            if d <= t {
                pos.push(i);
            } else if d <= t + t_margin {
                band.push(i);
            }
        }
        gt.insert(q.id.clone(), pos)?;
        if !band.is_empty() {
            gt.set_ignored(&q.id, band);
        }
    }
    Ok(gt)
}

/// Anything that yields a ranked list of database rows for one query.
pub trait Ranking {
    fn query_id(&self) -> &str;
    fn ranked_indices(&self) -> Vec<usize>;
}

impl Ranking for CandidateList {
    fn query_id(&self) -> &str {
        &self.query_id
    }

    fn ranked_indices(&self) -> Vec<usize> {
        self.indices()
    }
}

impl Ranking for RerankResult {
    fn query_id(&self) -> &str {
        &self.query_id
    }

    fn ranked_indices(&self) -> Vec<usize> {
        self.reranked.indices()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub query_id: String,
    /// 1-based rank of the first positive, if any was retrieved.
    pub first_hit_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// K -> percentage of queries with a positive in their top-K.
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub per_query_hits: Vec<QueryHit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

/// Scores ranked results against ground truth. Queries without any positive
/// count as misses.
pub fn recall_at_k<R: Ranking>(results: &[R], gt: &GroundTruth, ks: &[usize]) -> Result<EvalReport> {
    if ks.contains(&0) {
        return Err(Error::Argument("recall cut-offs must be at least 1".into()));
    }
    let mut per_query_hits = Vec::with_capacity(results.len());
    for r in results {
        let positives = gt.positives(r.query_id())?;
        let first_hit_rank = r
            .ranked_indices()
            .iter()
            .position(|i| positives.binary_search(i).is_ok())
            .map(|p| p + 1);
        per_query_hits.push(QueryHit {
            query_id: r.query_id().to_owned(),
            first_hit_rank,
        });
    }
    let n = per_query_hits.len();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = per_query_hits
                .iter()
                .filter(|h| h.first_hit_rank.is_some_and(|r| r <= k))
                .count();
            let pct = if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 };
            (k, pct)
        })
        .collect();
    Ok(EvalReport {
        recall_at,
        n_queries: n,
        per_query_hits,
        latency: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Candidate;
    use proptest::prelude::*;

    fn list(id: &str, idx: &[usize]) -> CandidateList {
        CandidateList {
            query_id: id.into(),
            entries: idx
                .iter()
                .map(|&index| Candidate { index, distance: 0.0 })
                .collect(),
        }
    }

    #[test]
    fn ground_truth_examples() {
        let q = [Record::new("q").with_gps(0.0, 0.0)];
        let db = [
            Record::new("a").with_gps(10.0, 0.0),
            Record::new("b").with_gps(30.0, 0.0),
        ];
        let gt = build_ground_truth(&q, &db, 25.0).unwrap();
        assert_eq!(gt.positives("q").unwrap(), &[0]);
        let gt = build_ground_truth(&q, &db, f64::INFINITY).unwrap();
        assert_eq!(gt.positives("q").unwrap(), &[0, 1]);
        let gt = build_ground_truth(&q, &db, 5.0).unwrap();
        assert!(gt.positives("q").unwrap().is_empty());
        let report = recall_at_k(&[list("q", &[0, 1])], &gt, &[1, 2]).unwrap();
        assert_eq!(report.n_queries, 1);
        assert_eq!(report.recall(2), Some(0.0));

        let missing = [Record::new("x")];
        assert!(matches!(build_ground_truth(&missing, &db, 25.0), Err(Error::Data(_))));
    }

    #[test]
    fn timestamp_ground_truth_marks_band() {
        let q = [Record::new("q").with_timestamp(10.0)];
        let db: Vec<_> = [9.0, 12.5, 20.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| Record::new(format!("d{i}")).with_timestamp(t))
            .collect();
        let gt = build_ground_truth_timestamps(&q, &db, 2.0, 1.0).unwrap();
        assert_eq!(gt.positives("q").unwrap(), &[0]);
        assert_eq!(gt.ignored("q"), &[1]);
    }

    #[test]
    fn recall_examples() {
        let mut gt = GroundTruth::new();
        gt.insert("a", vec![3]).unwrap();
        gt.insert("b", vec![9]).unwrap();
        let r = recall_at_k(&[list("a", &[3, 1])], &gt, &[1]).unwrap();
        assert_eq!(r.recall(1), Some(100.0));

        let r = recall_at_k(&[list("a", &[0, 3, 4]), list("b", &[1, 2, 9])], &gt, &[1, 5]).unwrap();
        assert_eq!(r.recall(1), Some(0.0));
        assert_eq!(r.recall(5), Some(100.0));
        assert_eq!(r.per_query_hits[1].first_hit_rank, Some(3));

        assert!(matches!(
            recall_at_k(&[list("zzz", &[0])], &gt, &[1]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn duplicate_query_ids_rejected() {
        let mut gt = GroundTruth::new();
        gt.insert("a", vec![]).unwrap();
        assert!(gt.insert("a", vec![1]).is_err());
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(
            lists in prop::collection::vec(prop::collection::vec(0usize..30, 1..15), 1..20),
            positives in prop::collection::vec(prop::collection::vec(0usize..30, 0..5), 20),
        ) {
            let mut gt = GroundTruth::new();
            let results: Vec<_> = lists.iter().enumerate().map(|(i, l)| {
                gt.insert(format!("q{i}"), positives[i].clone()).unwrap();
                list(&format!("q{i}"), l)
            }).collect();
            let r = recall_at_k(&results, &gt, &[1, 2, 3, 5, 10, 20]).unwrap();
            let vals: Vec<f64> = r.recall_at.values().copied().collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(vals.iter().all(|&v| (0.0..=100.0).contains(&v)));
        }
    }
}
