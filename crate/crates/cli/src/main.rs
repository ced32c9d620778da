use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use vpr_rerank::config::{Reranker, RunConfig};
use vpr_rerank::constraints::ConstraintKind;
use vpr_rerank::eval::SynthSpec;
use vpr_rerank::runner;

/// Re-rank place recognition results with embodied constraints.
#[derive(Debug, Parser)]
#[command(name = "vpr-rerank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a feature file and its metadata and write a bundle directory.
    Ingest {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the constraint graph over the database and write graph.json.
    BuildConstraints(RunArgs),
    /// Train mixture weights on the training queries.
    Train(RunArgs),
    /// Retrieve and re-rank the queries.
    Rerank(RunArgs),
    /// Score a result file against GPS ground truth.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Result file; defaults to the one in the output directory.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Time retrieval and refinement on a single thread.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
    },
    /// Generate a synthetic benchmark directory.
    Synth(SynthArgs),
    /// Build constraints, train if needed, re-rank and score.
    Run(RunArgs),
}

fn constraint_parser() -> impl TypedValueParser<Value = ConstraintKind> {
    PossibleValuesParser::new(["gps", "timestamp", "matching", "selfsim"])
        .map(|s| s.parse::<ConstraintKind>().expect("listed value"))
}

fn reranker_parser() -> impl TypedValueParser<Value = Reranker> {
    PossibleValuesParser::new(Reranker::ALL.map(Reranker::as_str))
        .map(|s| s.parse::<Reranker>().expect("listed value"))
}

/// Options shared by the experiment commands. Flags override the config file.
#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Database bundle directory.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Query bundle directory.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    train_queries: Option<PathBuf>,
    #[arg(long)]
    val_queries: Option<PathBuf>,
    /// CSV with header i,j,inliers,total.
    #[arg(long)]
    match_stats: Option<PathBuf>,
    /// Pretrained weight file; skips training.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_parser = constraint_parser())]
    constraint: Option<ConstraintKind>,
    /// GPS neighbor radius in meters.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Timestamp neighbor window in seconds.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    t_margin: Option<f64>,
    /// Inlier ratio threshold for the matching constraint.
    #[arg(long)]
    sigma: Option<f64>,
    /// Similarity threshold for the selfsim constraint.
    #[arg(long)]
    delta: Option<f64>,
    /// Ground-truth radius in meters.
    #[arg(long)]
    gt_epsilon: Option<f64>,
    /// Retrieval depth.
    #[arg(long)]
    k: Option<usize>,
    /// Neighbors mixed per candidate, the candidate included.
    #[arg(long)]
    l: Option<usize>,
    #[arg(long, value_parser = reranker_parser())]
    reranker: Option<Reranker>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> vpr_rerank::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident).+ = $value:expr) => {
                if let Some(v) = $value {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(db = self.db);
        set!(queries = self.queries);
        set!(out = self.out);
        set!(constraint = self.constraint);
        set!(epsilon = self.epsilon);
        set!(t = self.t);
        set!(t_margin = self.t_margin);
        set!(sigma = self.sigma);
        set!(delta = self.delta);
        set!(gt_epsilon = self.gt_epsilon);
        set!(k = self.k);
        set!(l = self.l);
        set!(reranker = self.reranker);
        set!(baseline.beta = self.beta);
        set!(baseline.k_neighbors = self.k_neighbors);
        set!(baseline.top_m = self.top_m);
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        for (slot, v) in [
            (&mut cfg.train_queries, self.train_queries),
            (&mut cfg.val_queries, self.val_queries),
            (&mut cfg.match_stats, self.match_stats),
            (&mut cfg.weights, self.weights),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    places: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    /// Required R@1 gain of uniform refinement over retrieval, in points.
    #[arg(long)]
    min_gap: Option<f64>,
    #[arg(long, value_parser = constraint_parser())]
    constraint: Option<ConstraintKind>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn resolve(&self) -> vpr_rerank::Result<SynthSpec> {
        let mut spec = match &self.spec {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| vpr_rerank::Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)?
            }
            None => SynthSpec::default(),
        };
        spec.n_places = self.places.unwrap_or(spec.n_places);
        spec.views_per_place = self.views.unwrap_or(spec.views_per_place);
        spec.dim = self.dim.unwrap_or(spec.dim);
        spec.intra_place_noise = self.noise.unwrap_or(spec.intra_place_noise);
        spec.distractor_count = self.distractors.unwrap_or(spec.distractor_count);
        spec.min_gap = self.min_gap.unwrap_or(spec.min_gap);
        spec.constraint_kind = self.constraint.unwrap_or(spec.constraint_kind);
        spec.epsilon_m = self.epsilon.unwrap_or(spec.epsilon_m);
        spec.selfsim_delta = self.delta.unwrap_or(spec.selfsim_delta);
        spec.k = self.k.unwrap_or(spec.k);
        spec.l = self.l.unwrap_or(spec.l);
        spec.seed = self.seed.unwrap_or(spec.seed);
        Ok(spec)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> vpr_rerank::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(command: Command) -> vpr_rerank::Result<()> {
    match command {
        Command::Ingest { features, metadata, out } => {
            let b = runner::cmd_ingest(&features, &metadata, &out)?;
            println!(
                "wrote {} rows of dimension {} to {}",
                b.features.len(),
                b.features.dim(),
                out.display()
            );
        }
        Command::BuildConstraints(args) => {
            let g = runner::cmd_build_constraints(&args.resolve()?)?;
            println!("{} graph: {} nodes, {} edges", g.kind, g.node_count(), g.edge_count());
        }
        Command::Train(args) => {
            let o = runner::cmd_train(&args.resolve()?)?;
            println!(
                "validation R@1 {:.2} -> {:.2} (best epoch {} of {})",
                o.initial_val_r1,
                o.best_val_r1,
                o.best_epoch,
                o.log.len()
            );
        }
        Command::Rerank(args) => {
            let r = runner::cmd_rerank(&args.resolve()?)?;
            println!("re-ranked {} queries", r.len());
        }
        Command::Eval { run, results } => {
            print_json(&runner::cmd_eval(&run.resolve()?, results.as_deref())?)?;
        }
        Command::Bench { run, repetitions } => {
            print_json(&runner::cmd_bench(&run.resolve()?, repetitions)?)?;
        }
        Command::Synth(args) => {
            let ds = runner::cmd_synth(&args.resolve()?, &args.out)?;
            print_json(&ds.check)?;
        }
        Command::Run(args) => {
            print_json(&runner::cmd_run(&args.resolve()?)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
