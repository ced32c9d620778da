//! File-level commands behind the `vpr-rerank` binary.
//!
//! Features and metadata travel together as a *bundle*: a directory holding
//! `features.epfv` and `metadata.jsonl` with one record per feature row.
//! Every command writes its artifacts into the configured output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    database_augmentation, query_expansion, superglobal_refine, AdaptiveOptions, BaselineConfig,
};
use crate::config::{Reranker, RunConfig};
use crate::constraints::{
    build_gps_graph, build_matching_graph, build_selfsim_graph, build_timestamp_graph,
    load_match_stats, save_match_stats, ConstraintGraph, ConstraintKind,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_ground_truth, generate_synthetic, latency_bench, recall_at_k, EvalReport, GroundTruth,
    LatencyReport, QuerySet, SynthCheck, SynthSpec, SyntheticDataset,
};
use crate::features::{
    knn_search, load_features, load_metadata, queries_from_matrix, save_features, save_metadata,
    CandidateList, FeatureMatrix, QueryFeature, Record,
};
use crate::mof::{load_weights, save_weights, train, MoFWeights, TrainOutcome};
use crate::pipeline::{load_results, rerank_batch_with, save_results, Mixer, RerankResult};

pub const FEATURES_FILE: &str = "features.epfv";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const GRAPH_FILE: &str = "graph.json";
pub const WEIGHTS_FILE: &str = "weights.epmw";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RESULTS_FILE: &str = "rerank_results.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";
pub const BENCH_FILE: &str = "bench_report.json";
pub const FAILED_FILE: &str = "FAILED";

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub features: FeatureMatrix,
    pub meta: Vec<Record>,
}

impl Bundle {
    pub fn new(features: FeatureMatrix, meta: Vec<Record>) -> Result<Self> {
        if meta.len() != features.len() {
            return Err(Error::Data(format!(
                "metadata has {} records but the feature file has {} rows",
                meta.len(),
                features.len()
            )));
        }
        Ok(Self { features, meta })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::new(
            load_features(dir.join(FEATURES_FILE))?,
            load_metadata(dir.join(METADATA_FILE))?,
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        save_features(dir.join(FEATURES_FILE), &self.features)?;
        save_metadata(dir.join(METADATA_FILE), &self.meta)
    }

    pub fn queries(&self) -> Result<Vec<QueryFeature>> {
        queries_from_matrix(&self.features, &self.meta)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Argument(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
        None => f(),
    }
}

/// Validates a raw feature file against its metadata and writes a bundle.
pub fn cmd_ingest(features: &Path, metadata: &Path, out: &Path) -> Result<Bundle> {
    let bundle = Bundle::new(load_features(features)?, load_metadata(metadata)?)?;
    bundle.save(out)?;
    Ok(bundle)
}

pub fn build_graph(cfg: &RunConfig, db: &Bundle) -> Result<ConstraintGraph> {
    match cfg.constraint {
        ConstraintKind::Gps => build_gps_graph(&db.meta, cfg.epsilon),
        ConstraintKind::Timestamp => build_timestamp_graph(&db.meta, cfg.t, cfg.t_margin),
        ConstraintKind::Matching => {
            let path = cfg
                .match_stats
                .as_ref()
                .ok_or_else(|| Error::Config("the matching constraint needs match_stats".into()))?;
            build_matching_graph(db.features.len(), &load_match_stats(path)?, cfg.sigma)
        }
        ConstraintKind::Selfsim => build_selfsim_graph(&db.features, cfg.delta),
    }
}

pub fn cmd_build_constraints(cfg: &RunConfig) -> Result<ConstraintGraph> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        let db = Bundle::load(&cfg.db)?;
        let graph = build_graph(cfg, &db)?;
        create_dir(&cfg.out)?;
        graph.save(cfg.out.join(GRAPH_FILE))?;
        Ok(graph)
    })
}

fn ground_truth_for(cfg: &RunConfig, db: &Bundle, sets: &[&Bundle]) -> Result<GroundTruth> {
    let mut gt = GroundTruth::new();
    for set in sets {
        gt.merge(build_ground_truth(&set.meta, &db.meta, cfg.gt_epsilon)?)?;
    }
    Ok(gt)
}

/// Trains weights from the configured training and validation queries and
/// writes the weight file and per-epoch log.
fn train_stage(cfg: &RunConfig, db: &Bundle, graph: &ConstraintGraph) -> Result<TrainOutcome> {
    let train_dir = cfg
        .train_queries
        .as_ref()
        .ok_or_else(|| Error::Config("training needs train_queries".into()))?;
    let train_set = Bundle::load(train_dir)?;
    let val_set = match &cfg.val_queries {
        Some(dir) if dir != train_dir => Some(Bundle::load(dir)?),
        _ => None,
    };
    let val_ref = val_set.as_ref().unwrap_or(&train_set);
    let mut sets = vec![&train_set];
    if let Some(v) = &val_set {
        sets.push(v);
    }
    let gt = ground_truth_for(cfg, db, &sets)?;
    let outcome = train(
        &db.features,
        graph,
        &train_set.queries()?,
        &val_ref.queries()?,
        &gt,
        cfg.k,
        cfg.l,
        &cfg.train,
    )?;
    create_dir(&cfg.out)?;
    save_weights(cfg.out.join(WEIGHTS_FILE), &outcome.weights)?;
    write_jsonl(&cfg.out.join(TRAIN_LOG_FILE), &outcome.log)?;
    Ok(outcome)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        let db = Bundle::load(&cfg.db)?;
        let graph = build_graph(cfg, &db)?;
        train_stage(cfg, &db, &graph)
    })
}

fn collect_batch(results: Vec<Result<RerankResult>>) -> Result<Vec<RerankResult>> {
    let failed = results.iter().filter(|r| r.is_err()).count();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(r) => out.push(r),
            Err(e) => {
                return Err(Error::Data(format!("{failed} queries failed; first error: {e}")));
            }
        }
    }
    Ok(out)
}

/// Re-ranks with one of the global-feature baselines. The reported time
/// covers the baseline's own work past the initial retrieval.
fn rerank_baseline(
    db: &FeatureMatrix,
    queries: &[QueryFeature],
    k: usize,
    method: Reranker,
    bcfg: &BaselineConfig,
) -> Result<Vec<RerankResult>> {
    let augmented = match method {
        Reranker::Dba => Some(database_augmentation(db, bcfg)?),
        _ => None,
    };
    let sg_cfg = BaselineConfig {
        top_m: bcfg.top_m.min(db.len()),
        ..*bcfg
    };
    let results = queries
        .par_iter()
        .map(|q| {
            let baseline = knn_search(db, q, k)?;
            let start = Instant::now();
            let reranked = match method {
                Reranker::None => baseline.clone(),
                Reranker::Qe => query_expansion(db, q, bcfg, k)?,
                Reranker::Dba => knn_search(augmented.as_ref().unwrap_or(db), q, k)?,
                Reranker::Superglobal => superglobal_refine(db, q, &sg_cfg)?,
                Reranker::Adaptive | Reranker::Mof => {
                    unreachable!("mixture rerankers go through the pipeline")
                }
            };
            let refine_time_ns = match method {
                Reranker::None => 0,
                _ => start.elapsed().as_nanos() as u64,
            };
            Ok(RerankResult {
                query_id: q.id.clone(),
                baseline,
                reranked,
                refine_time_ns,
            })
        })
        .collect();
    collect_batch(results)
}

/// Loads pretrained weights or trains new ones. Either way the weights end up
/// in the output directory.
fn mof_weights(cfg: &RunConfig, db: &Bundle, graph: &ConstraintGraph) -> Result<MoFWeights> {
    match &cfg.weights {
        Some(path) => {
            let w = load_weights(path)?;
            create_dir(&cfg.out)?;
            save_weights(cfg.out.join(WEIGHTS_FILE), &w)?;
            Ok(w)
        }
        None => Ok(train_stage(cfg, db, graph)?.weights),
    }
}

fn rerank_stage(
    cfg: &RunConfig,
    db: &Bundle,
    graph: &ConstraintGraph,
    queries: &[QueryFeature],
) -> Result<Vec<RerankResult>> {
    match cfg.reranker {
        Reranker::Mof => {
            let w = mof_weights(cfg, db, graph)?;
            let mixer = Mixer::Learned(w);
            collect_batch(rerank_batch_with(&db.features, graph, &mixer, queries, cfg.k, cfg.l, None))
        }
        Reranker::Adaptive => {
            let mixer = Mixer::Adaptive(AdaptiveOptions::default());
            collect_batch(rerank_batch_with(&db.features, graph, &mixer, queries, cfg.k, cfg.l, None))
        }
        other => rerank_baseline(&db.features, queries, cfg.k, other, &cfg.baseline),
    }
}

pub fn cmd_rerank(cfg: &RunConfig) -> Result<Vec<RerankResult>> {
    cfg.validate_for_run()?;
    with_threads(cfg.threads, || {
        let db = Bundle::load(&cfg.db)?;
        let queries = Bundle::load(&cfg.queries)?.queries()?;
        let graph = build_graph(cfg, &db)?;
        let results = rerank_stage(cfg, &db, &graph, &queries)?;
        create_dir(&cfg.out)?;
        save_results(cfg.out.join(RESULTS_FILE), &results)?;
        Ok(results)
    })
}

/// Recall of the retrieval baseline and, unless the reranker is `none`, of
/// the re-ranked lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub reranker: Reranker,
    pub constraint: ConstraintKind,
    pub k: usize,
    pub l: usize,
    pub baseline: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranked: Option<EvalReport>,
}

fn evaluate(cfg: &RunConfig, results: &[RerankResult], gt: &GroundTruth) -> Result<RunReport> {
    let baseline: Vec<CandidateList> = results.iter().map(|r| r.baseline.clone()).collect();
    let reranked = match cfg.reranker {
        Reranker::None => None,
        _ => Some(recall_at_k(results, gt, &cfg.recall_ks)?),
    };
    Ok(RunReport {
        reranker: cfg.reranker,
        constraint: cfg.constraint,
        k: cfg.k,
        l: cfg.l,
        baseline: recall_at_k(&baseline, gt, &cfg.recall_ks)?,
        reranked,
    })
}

/// Scores a result file (default: the one in the output directory).
pub fn cmd_eval(cfg: &RunConfig, results: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let path = results.map_or_else(|| cfg.out.join(RESULTS_FILE), Path::to_path_buf);
    let results = load_results(&path)?;
    let db = Bundle::load(&cfg.db)?;
    let queries = Bundle::load(&cfg.queries)?;
    let gt = ground_truth_for(cfg, &db, &[&queries])?;
    let report = evaluate(cfg, &results, &gt)?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Latency of retrieval and refinement on the calling thread, using the
/// configured weights or uniform weights when none are given.
pub fn cmd_bench(cfg: &RunConfig, repetitions: usize) -> Result<LatencyReport> {
    cfg.validate()?;
    let db = Bundle::load(&cfg.db)?;
    let queries = Bundle::load(&cfg.queries)?.queries()?;
    let graph = build_graph(cfg, &db)?;
    let weights = match &cfg.weights {
        Some(p) => load_weights(p)?,
        None => MoFWeights::uniform(cfg.l, db.features.dim(), cfg.train.mode)?,
    };
    let report = latency_bench(&db.features, &graph, &weights, &queries, cfg.k, cfg.l, repetitions)?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join(BENCH_FILE), &report)?;
    Ok(report)
}

/// Full experiment: constraints, optional training, re-ranking, scoring.
///
/// On failure a `FAILED` file naming the stage and error is left in the
/// output directory next to whatever artifacts were already written.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate_for_run()?;
    create_dir(&cfg.out)?;
    let failed = cfg.out.join(FAILED_FILE);
    if failed.exists() {
        fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    let mut stage = "load";
    let outcome = with_threads(cfg.threads, || {
        let db = Bundle::load(&cfg.db)?;
        let queries = Bundle::load(&cfg.queries)?;
        stage = "build-constraints";
        let graph = build_graph(cfg, &db)?;
        graph.save(cfg.out.join(GRAPH_FILE))?;
        stage = "rerank";
        let results = rerank_stage(cfg, &db, &graph, &queries.queries()?)?;
        save_results(cfg.out.join(RESULTS_FILE), &results)?;
        stage = "eval";
        let gt = ground_truth_for(cfg, &db, &[&queries])?;
        let report = evaluate(cfg, &results, &gt)?;
        write_json(&cfg.out.join(REPORT_FILE), &report)?;
        Ok(report)
    });
    if let Err(e) = &outcome {
        // best effort: the original error matters more than the marker
        let _ = fs::write(&failed, format!("stage: {stage}\nerror: {e}\n"));
    }
    outcome
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SynthSummary {
    spec: SynthSpec,
    check: SynthCheck,
}

/// Generates a synthetic benchmark and writes it as bundles (`db`, `queries`,
/// `train`, `val`), `match_stats.csv`, `graph.json`, `synth.json` and a
/// ready-to-run `config.json`.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<SyntheticDataset> {
    let ds = generate_synthetic(spec)?;
    create_dir(out)?;
    Bundle::new(ds.db.clone(), ds.db_meta.clone())?.save(out.join("db"))?;
    let save_set = |set: &QuerySet, name: &str| {
        Bundle::new(set.features.clone(), set.meta.clone())?.save(out.join(name))
    };
    save_set(&ds.test, "queries")?;
    save_set(&ds.train, "train")?;
    save_set(&ds.val, "val")?;
    save_match_stats(out.join("match_stats.csv"), &ds.match_stats)?;
    ds.graph.save(out.join(GRAPH_FILE))?;
    write_json(
        &out.join("synth.json"),
        &SynthSummary {
            spec: spec.clone(),
            check: ds.check,
        },
    )?;
    synth_config(spec).save(out.join("config.json"))?;
    Ok(ds)
}

/// A run configuration matching a synthetic benchmark written by
/// [`cmd_synth`], with paths relative to the benchmark directory.
pub fn synth_config(spec: &SynthSpec) -> RunConfig {
    let mut cfg = RunConfig {
        db: "db".into(),
        queries: "queries".into(),
        train_queries: Some("train".into()),
        val_queries: Some("val".into()),
        match_stats: Some("match_stats.csv".into()),
        out: PathBuf::from("run"),
        constraint: spec.constraint_kind,
        epsilon: spec.epsilon_m,
        t: spec.views_per_place as f64,
        t_margin: 1.0,
        delta: spec.selfsim_delta,
        gt_epsilon: spec.epsilon_m,
        k: spec.k,
        l: spec.l,
        seed: spec.seed,
        ..RunConfig::default()
    };
    cfg.train.seed = spec.seed;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::encode_features;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_places: 10,
            views_per_place: 5,
            dim: 16,
            intra_place_noise: 0.8,
            queries_per_place: 2,
            train_queries_per_place: 4,
            val_queries_per_place: 2,
            min_gap: 0.0,
            k: 6,
            l: 5,
            ..SynthSpec::default()
        }
    }

    fn synth_run_config(dir: &Path) -> RunConfig {
        cmd_synth(&small_spec(), dir).unwrap();
        RunConfig::load(dir.join("config.json")).unwrap()
    }

    #[test]
    fn ingest_checks_counts_and_is_repeatable() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix::from_rows(2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let fpath = dir.path().join("f.epfv");
        save_features(&fpath, &m).unwrap();
        let mpath = dir.path().join("m.jsonl");
        save_metadata(&mpath, &[Record::new("a")]).unwrap();
        let err = cmd_ingest(&fpath, &mpath, &dir.path().join("x")).unwrap_err().to_string();
        assert!(err.contains('1') && err.contains('2'), "{err}");

        save_metadata(&mpath, &[Record::new("a"), Record::new("b")]).unwrap();
        cmd_ingest(&fpath, &mpath, &dir.path().join("b1")).unwrap();
        cmd_ingest(&fpath, &mpath, &dir.path().join("b2")).unwrap();
        for f in [FEATURES_FILE, METADATA_FILE] {
            let a = fs::read(dir.path().join("b1").join(f)).unwrap();
            let b = fs::read(dir.path().join("b2").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }

    #[test]
    fn ingest_reports_zero_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = encode_features(&FeatureMatrix::from_rows(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let n = bytes.len();
        bytes[n - 8..].fill(0);
        let fpath = dir.path().join("f.epfv");
        fs::write(&fpath, bytes).unwrap();
        let mpath = dir.path().join("m.jsonl");
        save_metadata(&mpath, &[Record::new("a"), Record::new("b")]).unwrap();
        let err = cmd_ingest(&fpath, &mpath, dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn run_without_reranker_reports_baseline_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            reranker: Reranker::None,
            ..synth_run_config(dir.path())
        };
        let report = cmd_run(&cfg).unwrap();
        assert!(report.reranked.is_none());
        assert_eq!(report.baseline.n_queries, 20);
        assert!(cfg.out.join(REPORT_FILE).exists());
    }

    #[test]
    fn every_reranker_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let base = synth_run_config(dir.path());
        for r in Reranker::ALL {
            let cfg = RunConfig {
                reranker: r,
                out: dir.path().join(format!("run_{r}")),
                ..base.clone()
            };
            let report = cmd_run(&cfg).unwrap_or_else(|e| panic!("{r}: {e}"));
            assert_eq!(report.reranked.is_some(), r != Reranker::None);
            assert!(!cfg.out.join(FAILED_FILE).exists());
        }
        assert!(dir.path().join("run_mof").join(WEIGHTS_FILE).exists());
        assert!(dir.path().join("run_mof").join(TRAIN_LOG_FILE).exists());
    }

    #[test]
    fn eval_matches_run_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            reranker: Reranker::Adaptive,
            ..synth_run_config(dir.path())
        };
        let report = cmd_run(&cfg).unwrap();
        assert_eq!(cmd_eval(&cfg, None).unwrap(), report);
    }

    #[test]
    fn every_constraint_kind_builds() {
        let dir = tempfile::tempdir().unwrap();
        let base = synth_run_config(dir.path());
        for kind in [
            ConstraintKind::Gps,
            ConstraintKind::Timestamp,
            ConstraintKind::Matching,
            ConstraintKind::Selfsim,
        ] {
            let g = cmd_build_constraints(&RunConfig {
                constraint: kind,
                ..base.clone()
            })
            .unwrap();
            assert_eq!(g.kind, kind);
            assert_eq!(g.node_count(), 50);
        }
    }

    #[test]
    fn failing_stage_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            reranker: Reranker::None,
            db: dir.path().join("missing"),
            ..synth_run_config(dir.path())
        };
        assert!(cmd_run(&cfg).is_err());
        let marker = fs::read_to_string(cfg.out.join(FAILED_FILE)).unwrap();
        assert!(marker.starts_with("stage: load"), "{marker}");
    }

    #[test]
    fn invalid_sigma_fails_before_reading_inputs() {
        let cfg = RunConfig {
            db: "/nonexistent/db".into(),
            queries: "/nonexistent/q".into(),
            out: "/nonexistent/out".into(),
            reranker: Reranker::None,
            sigma: 1.5,
            ..RunConfig::default()
        };
        assert!(matches!(cmd_run(&cfg), Err(Error::Config(_))));
        assert!(!Path::new("/nonexistent/out").exists());
    }

    #[test]
    fn bench_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synth_run_config(dir.path());
        let r = cmd_bench(&cfg, 2).unwrap();
        assert_eq!((r.threads, r.repetitions, r.n_queries), (1, 2, 20));
        assert!(cfg.out.join(BENCH_FILE).exists());
    }
}
