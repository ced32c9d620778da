use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintGraph;
use crate::error::Result;
use crate::features::{knn_search, FeatureMatrix, QueryFeature};
use crate::mof::MoFWeights;
use crate::pipeline::{refine_and_sort, Mixer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the samples.
    pub fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self { mean_ns: 0.0, p50_ns: 0, p99_ns: 0 };
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            mean_ns: s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64,
            p50_ns: rank(0.50),
            p99_ns: rank(0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Per-query top-K search.
    pub retrieval: LatencyStats,
    /// Per-query neighbor gathering, refinement and sort of the K candidates.
    pub refine: LatencyStats,
    pub threads: usize,
    pub repetitions: usize,
    pub n_queries: usize,
    pub hardware_note: String,
}

fn hardware_note() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{} {} ({cpus} logical cpus available, 1 used)",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Times retrieval and refinement separately on the calling thread.
///
/// Every query runs once untimed first; afterwards each of `repetitions`
/// passes contributes one sample per query and stage.
pub fn latency_bench(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    weights: &MoFWeights,
    queries: &[QueryFeature],
    k: usize,
    l: usize,
    repetitions: usize,
) -> Result<LatencyReport> {
    let mixer = Mixer::Learned(weights.clone());
    for q in queries {
        let base = knn_search(db, q, k)?;
        refine_and_sort(db, graph, &mixer, q, base, l)?;
    }
    let mut retrieval = Vec::with_capacity(queries.len() * repetitions);
    let mut refine = Vec::with_capacity(queries.len() * repetitions);
    for _ in 0..repetitions {
        for q in queries {
            let start = Instant::now();
            let base = knn_search(db, q, k)?;
            retrieval.push((start.elapsed().as_nanos() as u64).max(1));
            let out = refine_and_sort(db, graph, &mixer, q, base, l)?;
            refine.push(out.refine_time_ns.max(1));
        }
    }
    Ok(LatencyReport {
        retrieval: LatencyStats::from_samples(&retrieval),
        refine: LatencyStats::from_samples(&refine),
        threads: 1,
        repetitions,
        n_queries: queries.len(),
        hardware_note: hardware_note(),
    })
}
