//! Embodied-constraint graphs over database rows and per-candidate neighbor
//! selection.
//!
//! Four predicates link database images that very likely show the same place
//! without looking at their pixels:
//!
//! | kind        | edge when                                   | strength        |
//! |-------------|---------------------------------------------|-----------------|
//! | `gps`       | planar distance `<= epsilon_m`              | `-distance`     |
//! | `timestamp` | `|t_i - t_j| <= t`                          | `-|t_i - t_j|`  |
//! | `matching`  | `total > 0` and `inliers / total > sigma`   | inlier ratio    |
//! | `selfsim`   | `delta < cos(f_i, f_j) < 1`                 | cosine          |
//!
//! Graphs are sparse, symmetric and never contain self-loops. Each node's
//! adjacency is kept in selection order: strength descending, index ascending.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::features::{FeatureMatrix, Record};
use crate::linalg;

/// Cosine similarity at or above which two rows count as duplicates and are
/// not linked by the self-similarity graph. f32 normalization leaves
/// duplicates within a few ulps of 1.
pub const DUPLICATE_SIMILARITY: f64 = 1.0 - 1e-6;

const SELFSIM_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Gps,
    Timestamp,
    Matching,
    Selfsim,
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConstraintKind::Gps => "gps",
            ConstraintKind::Timestamp => "timestamp",
            ConstraintKind::Matching => "matching",
            ConstraintKind::Selfsim => "selfsim",
        })
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gps" => Ok(ConstraintKind::Gps),
            "timestamp" => Ok(ConstraintKind::Timestamp),
            "matching" => Ok(ConstraintKind::Matching),
            "selfsim" => Ok(ConstraintKind::Selfsim),
            other => Err(Error::Argument(format!("unknown constraint kind {other:?}"))),
        }
    }
}

/// Thresholds a graph was built with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum GraphParams {
    Gps { epsilon_m: f64 },
    Timestamp { t: f64, t_margin: f64 },
    Matching { sigma: f64 },
    Selfsim { delta: f64 },
    /// A graph with no edges, used when no constraint source is available.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintGraph {
    pub kind: ConstraintKind,
    pub params: GraphParams,
    n: usize,
    adjacency: Vec<Vec<(usize, f64)>>,
    /// Timestamp pairs `(i, j)`, `i < j`, inside the margin band. They are
    /// neither neighbors nor clean negatives.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    ambiguous: Vec<(usize, usize)>,
}

impl ConstraintGraph {
    /// A graph with `n` isolated nodes.
    pub fn empty(kind: ConstraintKind, n: usize) -> Self {
        Self {
            kind,
            params: GraphParams::None,
            n,
            adjacency: vec![Vec::new(); n],
            ambiguous: Vec::new(),
        }
    }

    /// Builds a graph from undirected edges. Pairs may appear in either
    /// orientation but at most once.
    pub fn from_edges(
        kind: ConstraintKind,
        params: GraphParams,
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for (i, j, s) in edges {
            ensure_arg!(i < n && j < n, "edge ({i}, {j}) out of range for {n} nodes");
            if i == j {
                continue;
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::Data(format!("duplicate edge ({i}, {j})")));
            }
            adjacency[i].push((j, s));
            adjacency[j].push((i, s));
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        Ok(Self {
            kind,
            params,
            n,
            adjacency,
            ambiguous: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Neighbors of `i` in selection order (strength descending, index ascending).
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency
            .get(i)
            .is_some_and(|l| l.iter().any(|&(k, _)| k == j))
    }

    pub fn ambiguous_pairs(&self) -> &[(usize, usize)] {
        &self.ambiguous
    }

    /// Checks the structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.adjacency.len() != self.n {
            return Err(Error::Data(format!(
                "graph declares {} nodes but has {} adjacency lists",
                self.n,
                self.adjacency.len()
            )));
        }
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, s) in list {
                if j >= self.n || j == i {
                    return Err(Error::Data(format!("invalid edge ({i}, {j})")));
                }
                let back = self.adjacency[j].iter().find(|&&(k, _)| k == i);
                if back.map(|&(_, t)| t.to_bits()) != Some(s.to_bits()) {
                    return Err(Error::Data(format!("edge ({i}, {j}) is not symmetric")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn gps_of(rec: &Record) -> Result<[f64; 2]> {
    match rec.gps {
        Some(g) if g.iter().all(|v| v.is_finite()) => Ok(g),
        Some(_) => Err(Error::Data(format!("record {} has non-finite gps", rec.id))),
        None => Err(Error::Data(format!("record {} has no gps", rec.id))),
    }
}

fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Links rows whose planar positions are within `epsilon_m` meters.
pub fn build_gps_graph(meta: &[Record], epsilon_m: f64) -> Result<ConstraintGraph> {
    ensure_arg!(
        epsilon_m >= 0.0 && epsilon_m.is_finite(),
        "epsilon must be a finite non-negative distance, got {epsilon_m}"
    );
    let points = meta.iter().map(gps_of).collect::<Result<Vec<_>>>()?;
    let cell = if epsilon_m > 0.0 { epsilon_m } else { 1.0 };
    let key = |p: [f64; 2]| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);

    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut edges = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        let (cx, cy) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &j in bucket.iter().filter(|&&j| j > i) {
                    let d = planar_distance(p, points[j]);
                    if d <= epsilon_m {
                        edges.push((i, j, -d));
                    }
                }
            }
        }
    }
    edges.sort_by_key(|e| (e.0, e.1));
    ConstraintGraph::from_edges(
        ConstraintKind::Gps,
        GraphParams::Gps { epsilon_m },
        meta.len(),
        edges,
    )
}

/// Links rows captured within `t` seconds of each other. Pairs separated by
/// more than `t` but at most `t + t_margin` are recorded as ambiguous.
pub fn build_timestamp_graph(meta: &[Record], t: f64, t_margin: f64) -> Result<ConstraintGraph> {
    ensure_arg!(t > 0.0 && t.is_finite(), "t must be positive, got {t}");
    ensure_arg!(
        t_margin >= 0.0 && t_margin.is_finite(),
        "t_margin must be non-negative, got {t_margin}"
    );
    let times = meta
        .iter()
        .map(|r| match r.timestamp {
            Some(ts) if ts.is_finite() => Ok(ts),
            Some(_) => Err(Error::Data(format!("record {} has non-finite timestamp", r.id))),
            None => Err(Error::Data(format!("record {} has no timestamp", r.id))),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));

    let mut edges = Vec::new();
    let mut ambiguous = Vec::new();
    for (pos, &a) in order.iter().enumerate() {
        for &b in &order[pos + 1..] {
            let delta = (times[b] - times[a]).abs();
            if delta > t + t_margin {
                break;
            }
            let pair = (a.min(b), a.max(b));
            if delta <= t {
                edges.push((pair.0, pair.1, -delta));
            } else {
                ambiguous.push(pair);
            }
        }
    }
    edges.sort_by_key(|e| (e.0, e.1));
    ambiguous.sort_unstable();
    let mut g = ConstraintGraph::from_edges(
        ConstraintKind::Timestamp,
        GraphParams::Timestamp { t, t_margin },
        meta.len(),
        edges,
    )?;
    g.ambiguous = ambiguous;
    Ok(g)
}

/// Local-feature match counts for one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    pub i: usize,
    pub j: usize,
    pub inliers: u64,
    pub total: u64,
}

impl MatchStats {
    pub fn inlier_ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.inliers as f64 / self.total as f64)
    }
}

/// Reads `i,j,inliers,total` CSV with a header row.
pub fn load_match_stats(path: impl AsRef<Path>) -> Result<Vec<MatchStats>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["i", "j", "inliers", "total"] {
        return Err(Error::format(path, "expected header `i,j,inliers,total`"));
    }
    rdr.deserialize()
        .map(|r| r.map_err(Error::from))
        .collect::<Result<Vec<MatchStats>>>()
}

pub fn save_match_stats(path: impl AsRef<Path>, stats: &[MatchStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Links pairs whose inlier ratio exceeds `sigma`.
pub fn build_matching_graph(n: usize, stats: &[MatchStats], sigma: f64) -> Result<ConstraintGraph> {
    ensure_arg!(sigma > 0.0 && sigma < 1.0, "sigma must lie in (0, 1), got {sigma}");
    let mut edges = Vec::new();
    for s in stats {
        ensure_arg!(
            s.i < n && s.j < n,
            "match pair ({}, {}) out of range for {n} rows",
            s.i,
            s.j
        );
        if s.inliers > s.total {
            return Err(Error::Data(format!(
                "pair ({}, {}) has {} inliers out of {} matches",
                s.i, s.j, s.inliers, s.total
            )));
        }
        if s.i == s.j {
            continue;
        }
        if let Some(ratio) = s.inlier_ratio() {
            if ratio > sigma {
                edges.push((s.i.min(s.j), s.i.max(s.j), ratio));
            }
        }
    }
    edges.sort_by_key(|e| (e.0, e.1));
    ConstraintGraph::from_edges(
        ConstraintKind::Matching,
        GraphParams::Matching { sigma },
        n,
        edges,
    )
}

/// Links rows whose cosine similarity lies strictly between `delta` and 1.
///
/// Similarities are computed one block of rows at a time; only pairs above
/// the threshold are kept, so memory is proportional to the edge count.
pub fn build_selfsim_graph(db: &FeatureMatrix, delta: f64) -> Result<ConstraintGraph> {
    ensure_arg!(delta > -1.0 && delta < 1.0, "delta must lie in (-1, 1), got {delta}");
    let n = db.len();
    let blocks: Vec<usize> = (0..n).step_by(SELFSIM_BLOCK).collect();
    let edges: Vec<Vec<(usize, usize, f64)>> = blocks
        .par_iter()
        .map(|&start| {
            let mut out = Vec::new();
            for i in start..(start + SELFSIM_BLOCK).min(n) {
                let ri = db.row(i);
                for j in i + 1..n {
                    let sim = linalg::dot_f32(ri, db.row(j));
                    if sim > delta && sim < DUPLICATE_SIMILARITY {
                        out.push((i, j, sim));
                    }
                }
            }
            out
        })
        .collect();
    ConstraintGraph::from_edges(
        ConstraintKind::Selfsim,
        GraphParams::Selfsim { delta },
        n,
        edges.into_iter().flatten(),
    )
}

/// The `l` rows used to refine one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub candidate: usize,
    /// Exactly `l` entries; the first is always the candidate.
    pub neighbors: Vec<usize>,
    /// True when the candidate had fewer than `l - 1` constraint neighbors and
    /// its own index fills the remaining slots.
    pub padded: bool,
}

pub fn select_neighbors(graph: &ConstraintGraph, candidate: usize, l: usize) -> Result<NeighborSet> {
    let mut neighbors = Vec::with_capacity(l);
    let padded = select_neighbors_into(graph, candidate, l, &mut neighbors)?;
    Ok(NeighborSet {
        candidate,
        neighbors,
        padded,
    })
}

/// Allocation-free form of [`select_neighbors`]; returns the padded flag.
pub fn select_neighbors_into(
    graph: &ConstraintGraph,
    candidate: usize,
    l: usize,
    out: &mut Vec<usize>,
) -> Result<bool> {
    ensure_arg!(
        candidate < graph.node_count(),
        "candidate {candidate} out of range for {} nodes",
        graph.node_count()
    );
    ensure_arg!(l >= 1, "l must be at least 1");
    out.clear();
    out.push(candidate);
    out.extend(graph.neighbors(candidate).iter().take(l - 1).map(|&(j, _)| j));
    let padded = out.len() < l;
    out.resize(l, candidate);
    Ok(padded)
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gps(points: &[(f64, f64)]) -> Vec<Record> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Record::new(format!("r{i}")).with_gps(x, y))
            .collect()
    }

    fn times(ts: &[f64]) -> Vec<Record> {
        ts.iter()
            .enumerate()
            .map(|(i, &t)| Record::new(format!("r{i}")).with_timestamp(t))
            .collect()
    }

    #[test]
    fn gps_examples() {
        let g = build_gps_graph(&gps(&[(0.0, 0.0), (10.0, 0.0), (100.0, 0.0)]), 25.0).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(0), &[(1, -10.0)]);

        let g = build_gps_graph(&gps(&[(0.0, 0.0), (10.0, 0.0)]), 0.0).unwrap();
        assert_eq!(g.edge_count(), 0);

        let g = build_gps_graph(&gps(&[(5.0, 5.0), (5.0, 5.0)]), 25.0).unwrap();
        assert!(g.has_edge(0, 1));
        assert_eq!(g.neighbors(1)[0].1, 0.0);
    }

    #[test]
    fn gps_missing_field_names_record() {
        let mut meta = gps(&[(0.0, 0.0)]);
        meta.push(Record::new("lost"));
        let err = build_gps_graph(&meta, 25.0).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("lost")), "{err}");
    }

    #[test]
    fn timestamp_examples() {
        let g = build_timestamp_graph(&times(&[0.0, 1.5, 5.0]), 2.0, 1.0).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!(g.has_edge(0, 1));
        assert!(g.ambiguous_pairs().is_empty());

        let g = build_timestamp_graph(&times(&[0.0, 2.0]), 2.0, 1.0).unwrap();
        assert!(g.has_edge(0, 1));

        let g = build_timestamp_graph(&times(&[0.0, 2.5, 3.0, 3.5]), 2.0, 1.0).unwrap();
        assert!(!g.has_edge(0, 1) && !g.has_edge(0, 2));
        assert_eq!(g.ambiguous_pairs(), &[(0, 1), (0, 2)]);
        assert!(!g.has_edge(0, 3));
        assert!(build_timestamp_graph(&[Record::new("x")], 2.0, 1.0).is_err());
    }

    #[test]
    fn matching_examples() {
        let s = |inliers, total| MatchStats { i: 0, j: 1, inliers, total };
        assert!(build_matching_graph(2, &[s(60, 100)], 0.5).unwrap().has_edge(0, 1));
        let g = build_matching_graph(2, &[s(60, 100)], 0.5).unwrap();
        assert_eq!(g.neighbors(0)[0].1, 0.6);
        assert_eq!(build_matching_graph(2, &[s(50, 100)], 0.5).unwrap().edge_count(), 0);
        assert_eq!(build_matching_graph(2, &[s(0, 0)], 0.5).unwrap().edge_count(), 0);
        assert!(matches!(
            build_matching_graph(2, &[s(101, 100)], 0.5),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            build_matching_graph(2, &[s(1, 2)], 1.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn match_stats_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let stats = vec![
            MatchStats { i: 0, j: 1, inliers: 5, total: 9 },
            MatchStats { i: 2, j: 0, inliers: 0, total: 0 },
        ];
        save_match_stats(&path, &stats).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("i,j,inliers,total\n"));
        assert_eq!(load_match_stats(&path).unwrap(), stats);
    }

    #[test]
    fn selfsim_examples() {
        let db = FeatureMatrix::from_rows(2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(build_selfsim_graph(&db, 0.9).unwrap().edge_count(), 0);

        let a = 0.95f32.acos();
        let db = FeatureMatrix::from_rows(2, vec![1.0, 0.0, a.cos(), a.sin()]).unwrap();
        let g = build_selfsim_graph(&db, 0.9).unwrap();
        assert!(g.has_edge(0, 1));
        assert!((g.neighbors(0)[0].1 - 0.95).abs() < 1e-6);

        let db = FeatureMatrix::from_rows(2, vec![1.0, 0.0, 0.7071, 0.7071]).unwrap();
        assert_eq!(build_selfsim_graph(&db, 0.9).unwrap().edge_count(), 0);
    }

    #[test]
    fn selection_examples() {
        let g = ConstraintGraph::empty(ConstraintKind::Gps, 5);
        let s = select_neighbors(&g, 2, 4).unwrap();
        assert_eq!(s.neighbors, vec![2, 2, 2, 2]);
        assert!(s.padded);

        let g = ConstraintGraph::from_edges(
            ConstraintKind::Selfsim,
            GraphParams::Selfsim { delta: 0.5 },
            3,
            [(0, 1, 0.9), (0, 2, 0.95)],
        )
        .unwrap();
        let s = select_neighbors(&g, 0, 3).unwrap();
        assert_eq!(s.neighbors, vec![0, 2, 1]);
        assert!(!s.padded);

        let s = select_neighbors(&g, 0, 1).unwrap();
        assert_eq!(s.neighbors, vec![0]);
        assert!(!s.padded);

        assert!(matches!(select_neighbors(&g, 3, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn json_round_trip_validates() {
        let g = build_timestamp_graph(&times(&[0.0, 1.0, 2.5, 9.0]), 1.0, 1.0).unwrap();
        let back = ConstraintGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        let broken = r#"{"kind":"gps","params":{"gps":{"epsilon_m":1.0}},"n":2,"adjacency":[[[1,0.0]],[]]}"#;
        assert!(ConstraintGraph::from_json(broken).is_err());
    }

    fn audit_symmetric(g: &ConstraintGraph) {
        g.validate().unwrap();
        for i in 0..g.node_count() {
            for &(j, _) in g.neighbors(i) {
                assert!(g.has_edge(j, i));
            }
        }
    }

    fn point_set() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0..200.0f64, 0.0..200.0f64), 0..120)
    }

    proptest! {
        #[test]
        fn gps_graph_matches_pairwise_oracle(points in point_set(), eps in 0.0..60.0f64) {
            let meta = gps(&points);
            let g = build_gps_graph(&meta, eps).unwrap();
            audit_symmetric(&g);
            for i in 0..points.len() {
                for j in 0..points.len() {
                    let d = planar_distance([points[i].0, points[i].1], [points[j].0, points[j].1]);
                    prop_assert_eq!(g.has_edge(i, j), i != j && d <= eps);
                }
            }
            prop_assert_eq!(build_gps_graph(&meta, eps).unwrap().to_json().unwrap(), g.to_json().unwrap());
        }

        #[test]
        fn gps_edge_count_monotone_in_epsilon(points in point_set(), a in 0.0..60.0f64, b in 0.0..60.0f64) {
            let meta = gps(&points);
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(build_gps_graph(&meta, lo).unwrap().edge_count()
                <= build_gps_graph(&meta, hi).unwrap().edge_count());
        }

        #[test]
        fn timestamp_graph_matches_oracle(ts in prop::collection::vec(0.0..100.0f64, 0..120), t in 0.1..10.0f64, m in 0.0..5.0f64) {
            let g = build_timestamp_graph(&times(&ts), t, m).unwrap();
            audit_symmetric(&g);
            let amb: BTreeSet<_> = g.ambiguous_pairs().iter().copied().collect();
            for i in 0..ts.len() {
                for j in i + 1..ts.len() {
                    let d = (ts[i] - ts[j]).abs();
                    prop_assert_eq!(g.has_edge(i, j), d <= t);
                    prop_assert_eq!(amb.contains(&(i, j)), d > t && d <= t + m);
                }
            }
        }

        #[test]
        fn selfsim_graph_symmetric_and_thresholded(
            raw in prop::collection::vec(prop::collection::vec(-1.0..1.0f32, 3), 1..80),
            delta in -0.5..0.95f64,
        ) {
            let data: Vec<f32> = raw.iter().flatten().copied().collect();
            let Ok(db) = FeatureMatrix::from_rows(3, data) else { return Ok(()) };
            let g = build_selfsim_graph(&db, delta).unwrap();
            audit_symmetric(&g);
            for i in 0..db.len() {
                for j in 0..db.len() {
                    let s = pairwise_similarity_oracle(&db, i, j);
                    prop_assert_eq!(g.has_edge(i, j), i != j && s > delta && s < DUPLICATE_SIMILARITY);
                }
            }
        }

        #[test]
        fn selection_has_exactly_l_entries(n in 1usize..30, l in 1usize..10, seed in any::<u64>()) {
            let edges: Vec<_> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| (seed >> ((i * 7 + j) % 64)) & 1 == 1)
                .map(|(i, j)| (i, j, ((i * 31 + j * 17) % 5) as f64))
                .collect();
            let g = ConstraintGraph::from_edges(ConstraintKind::Matching, GraphParams::None, n, edges).unwrap();
            for c in 0..n {
                let s = select_neighbors(&g, c, l).unwrap();
                prop_assert_eq!(s.neighbors.len(), l);
                prop_assert_eq!(s.neighbors[0], c);
                prop_assert_eq!(s.padded, g.neighbors(c).len() < l - 1);
            }
        }
    }

    fn pairwise_similarity_oracle(db: &FeatureMatrix, i: usize, j: usize) -> f64 {
        let (a, b) = (db.row(i), db.row(j));
        (0..a.len()).map(|d| a[d] as f64 * b[d] as f64).sum()
    }
}
