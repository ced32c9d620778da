/*!
Re-ranking of visual place recognition results with embodied constraints.

A query descriptor is first matched against a database of place descriptors
by exact nearest-neighbor search. Each of the top-K candidates is then refined
by mixing its own descriptor with those of up to `L - 1` neighbors taken from a
constraint graph (GPS proximity, capture time, geometric matching or
descriptor self-similarity). The candidates are re-ranked by their distance to
the query after refinement.

```
use vpr_rerank::constraints::build_gps_graph;
use vpr_rerank::features::{FeatureMatrix, QueryFeature, Record};
use vpr_rerank::mof::{MixMode, MoFWeights};
use vpr_rerank::pipeline::rerank;

let db = FeatureMatrix::from_rows(2, vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0])?;
let meta = vec![
    Record::new("a").with_gps(0.0, 0.0),
    Record::new("b").with_gps(5.0, 0.0),
    Record::new("c").with_gps(500.0, 0.0),
];
let graph = build_gps_graph(&meta, 25.0)?;
let weights = MoFWeights::uniform(2, 2, MixMode::Elementwise)?;
let q = QueryFeature::new("q", vec![0.8, 0.6])?;

let out = rerank(&db, &graph, &weights, &q, 3, 2)?;
assert_eq!(out.reranked.len(), 3);
# Ok::<(), vpr_rerank::Error>(())
```

The guide in `book/` walks through every stage.
*/

pub mod baselines;
pub mod config;
pub mod constraints;
mod error;
pub mod eval;
pub mod features;
mod linalg;
pub mod mof;
pub mod pipeline;
pub mod runner;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/constraints.md")]
    mod constraints {}
    #[doc = include_str!("../../../book/src/mixture-of-features.md")]
    mod mixture_of_features {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/reranking.md")]
    mod reranking {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
