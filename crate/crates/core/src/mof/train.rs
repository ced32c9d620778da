//! Training the mixing weights with Adam and validation-driven early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{select_neighbors_into, ConstraintGraph};
use crate::error::{ensure_arg, Error, Result};
use crate::eval::{recall_at_k, GroundTruth};
use crate::features::{knn_search, FeatureMatrix, QueryFeature};
use crate::pipeline::rerank_batch;

use super::loss::{loss_and_grad, ExampleCandidate, TrainExample};
use super::{MixMode, MoFWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation R@1 improvement.
    pub patience_epochs: usize,
    pub lambda_direct: f64,
    pub lambda_intra: f64,
    /// Margin for the optional hinge form of each loss term.
    pub margin_alpha: f64,
    /// Apply `max(0, term + margin_alpha)` to every loss term.
    pub hinge: bool,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: MixMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            batch_size: 64,
            patience_epochs: 3,
            lambda_direct: 1.0,
            lambda_intra: 0.0,
            margin_alpha: 0.0,
            hinge: false,
            max_epochs: 50,
            seed: 0,
            mode: MixMode::Elementwise,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda_direct >= 0.0 && self.lambda_intra >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.lambda_direct == 0.0 && self.lambda_intra == 0.0 {
            return bad("lambda_direct and lambda_intra cannot both be zero".into());
        }
        if !(self.margin_alpha >= 0.0 && self.margin_alpha.is_finite()) {
            return bad(format!("margin_alpha must be non-negative, got {}", self.margin_alpha));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Patience counter over validation scores. The first observed score sets the
/// reference; training stops once `patience` consecutive scores fail to beat
/// the best one.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a score; returns `true` when training should stop.
    pub fn observe(&mut self, score: f64) -> bool {
        match self.best {
            Some(b) if score <= b => self.stale += 1,
            _ => {
                self.best = Some(score);
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss per example over the epoch.
    pub loss: f64,
    pub val_r1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleStats {
    pub built: usize,
    /// Queries whose top-k held only positives or only negatives.
    pub dropped_single_class: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: MoFWeights,
    pub log: Vec<EpochLog>,
    pub stats: ExampleStats,
    /// Validation R@1 of the identity initialization.
    pub initial_val_r1: f64,
    pub best_val_r1: f64,
    /// 0 when the initialization was never beaten.
    pub best_epoch: usize,
}

/// Retrieves the top-`k` for every query, labels candidates against `gt` and
/// gathers each candidate's `l` neighbor features.
pub fn build_examples(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    queries: &[QueryFeature],
    gt: &GroundTruth,
    k: usize,
    l: usize,
) -> Result<(Vec<TrainExample>, ExampleStats)> {
    ensure_arg!(
        graph.node_count() == db.len(),
        "graph has {} nodes but database has {} rows",
        graph.node_count(),
        db.len()
    );
    let dim = db.dim();
    let mut stats = ExampleStats::default();
    let mut examples = Vec::new();
    let mut neigh = Vec::with_capacity(l);
    for q in queries {
        let positives = gt.positives(&q.id)?;
        let ignored = gt.ignored(&q.id);
        let cands = knn_search(db, q, k)?;
        let mut candidates = Vec::with_capacity(k);
        for c in &cands.entries {
            if ignored.binary_search(&c.index).is_ok() {
                continue;
            }
            select_neighbors_into(graph, c.index, l, &mut neigh)?;
            let mut feats = Vec::with_capacity(l * dim);
            for &n in &neigh {
                feats.extend(db.row(n).iter().map(|&x| x as f64));
            }
            candidates.push(ExampleCandidate {
                index: c.index,
                neighbor_feats: feats,
                positive: positives.binary_search(&c.index).is_ok(),
            });
        }
        let ex = TrainExample {
            query_id: q.id.clone(),
            query: q.to_f64(),
            candidates,
        };
        if ex.is_informative() {
            examples.push(ex);
        } else {
            stats.dropped_single_class += 1;
        }
    }
    stats.built = examples.len();
    Ok((examples, stats))
}

fn check_bounds(ex: &TrainExample, direct: f64, intra: f64, cfg: &TrainConfig) -> Result<()> {
    let k = ex.candidates.len();
    let p = ex.positives();
    let per_term = if cfg.hinge { 2.0 + cfg.margin_alpha } else { 2.0 };
    let pairs = p * (p.saturating_sub(1)) / 2 + p * (k - p);
    let tol = 1e-9;
    if direct.abs() > per_term * k as f64 + tol || intra.abs() > per_term * pairs as f64 + tol {
        return Err(Error::Numeric(format!(
            "loss out of bounds for query {}: direct {direct}, intra {intra}",
            ex.query_id
        )));
    }
    Ok(())
}

pub(crate) fn val_r1(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    weights: &MoFWeights,
    queries: &[QueryFeature],
    gt: &GroundTruth,
    k: usize,
    l: usize,
) -> Result<f64> {
    let results = rerank_batch(db, graph, weights, queries, k, l, None)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let lists: Vec<_> = results.into_iter().map(|r| r.reranked).collect();
    let report = recall_at_k(&lists, gt, &[1])?;
    Ok(report.recall(1).unwrap_or(0.0))
}

/// Fits the mixing weights from identity initialization and returns the
/// weights of the epoch with the best validation R@1.
#[allow(clippy::too_many_arguments)]
pub fn train(
    db: &FeatureMatrix,
    graph: &ConstraintGraph,
    train_queries: &[QueryFeature],
    val_queries: &[QueryFeature],
    gt: &GroundTruth,
    k: usize,
    l: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_arg!(k >= 1 && l >= 1, "k and l must be at least 1");
    let mut weights = MoFWeights::identity(l, db.dim(), cfg.mode)?;
    let initial_val_r1 = val_r1(db, graph, &weights, val_queries, gt, k, l)?;
    let mut outcome = TrainOutcome {
        weights: weights.clone(),
        log: Vec::new(),
        stats: ExampleStats::default(),
        initial_val_r1,
        best_val_r1: initial_val_r1,
        best_epoch: 0,
    };
    if cfg.max_epochs == 0 {
        return Ok(outcome);
    }

    let (examples, stats) = build_examples(db, graph, train_queries, gt, k, l)?;
    outcome.stats = stats;
    if examples.is_empty() {
        return Err(Error::Training(format!(
            "no usable training examples ({} queries dropped as single-class)",
            stats.dropped_single_class
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, weights.values().len());
    let mut stopper = EarlyStopper::new(cfg.patience_epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| loss_and_grad(&weights, &examples[i], cfg))
                .collect();
            let mut grad = vec![0.0; weights.values().len()];
            for (&i, r) in batch.iter().zip(results) {
                let (terms, g) = r?;
                check_bounds(&examples[i], terms.direct, terms.intra, cfg)?;
                epoch_loss += terms.total;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(weights.values_mut(), &grad);
        }
        let loss = epoch_loss / examples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss} in epoch {epoch}")));
        }
        let r1 = val_r1(db, graph, &weights, val_queries, gt, k, l)?;
        outcome.log.push(EpochLog {
            epoch,
            loss,
            val_r1: r1,
        });
        if r1 > outcome.best_val_r1 {
            outcome.best_val_r1 = r1;
            outcome.best_epoch = epoch;
            outcome.weights = weights.clone();
        }
        if stopper.observe(r1) {
            break;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_counts_from_first_epoch() {
        let mut s = EarlyStopper::new(3);
        let stops: Vec<bool> = [80.0, 80.0, 80.0, 80.0].iter().map(|&v| s.observe(v)).collect();
        assert_eq!(stops, vec![false, false, false, true]);

        let mut s = EarlyStopper::new(3);
        let stops: Vec<bool> = [70.0, 72.0, 71.0, 72.0, 73.0, 73.0, 73.0, 73.0]
            .iter()
            .map(|&v| s.observe(v))
            .collect();
        assert_eq!(stops, vec![false, false, false, false, false, false, false, true]);
    }

    #[test]
    fn adam_moves_against_gradient_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut adam = Adam::new(0.003, 2);
        adam.step(&mut p, &[2.0, -0.5]);
        assert!((p[0] - 0.997).abs() < 1e-9);
        assert!((p[1] + 0.997).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero = TrainConfig {
            lambda_direct: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero.validate().is_err());
        let lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(lr.validate().is_err());
        let batch = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(batch.validate().is_err());
    }
}
