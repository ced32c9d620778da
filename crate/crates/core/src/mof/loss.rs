//! Refinement losses and their analytic gradient with respect to the weights.
//!
//! For one query `q` with refined candidates `f'_i` and labels `y_i`:
//!
//! ```text
//! direct = sum_{y_i = 1} d(f'_i, q) - sum_{y_i = 0} d(f'_i, q)
//! intra  = sum_{i < j, y_i = y_j = 1} d(f'_i, f'_j) - sum_{y_i = 1, y_k = 0} d(f'_i, f'_k)
//! total  = lambda_direct * direct + lambda_intra * intra
//! ```
//!
//! The gradient flows through the L2 renormalization of each mixture. At
//! coincident points the distance uses the zero subgradient, and a candidate
//! whose mixture collapsed contributes nothing.

use crate::error::{ensure_arg, Error, Result};
use crate::linalg;

use super::{MoFWeights, TrainConfig};

/// One retrieved candidate inside a training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleCandidate {
    pub index: usize,
    /// Row-major `L x D` features of the candidate's neighbor set.
    pub neighbor_feats: Vec<f64>,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub query_id: String,
    pub query: Vec<f64>,
    pub candidates: Vec<ExampleCandidate>,
}

impl TrainExample {
    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.positive).count()
    }

    /// Both classes present, so the losses carry signal.
    pub fn is_informative(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.candidates.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub direct: f64,
    pub intra: f64,
    pub total: f64,
}

pub fn loss_direct<V: AsRef<[f64]>>(query: &[f64], refined: &[(V, bool)]) -> f64 {
    refined
        .iter()
        .map(|(f, pos)| sign(*pos) * linalg::dist(f.as_ref(), query))
        .sum()
}

pub fn loss_intra<V: AsRef<[f64]>>(refined: &[(V, bool)]) -> f64 {
    let mut acc = 0.0;
    for (i, (fi, pi)) in refined.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, (fj, pj)) in refined.iter().enumerate() {
            if *pj && j > i {
                acc += linalg::dist(fi.as_ref(), fj.as_ref());
            } else if !pj {
                acc -= linalg::dist(fi.as_ref(), fj.as_ref());
            }
        }
    }
    acc
}

pub fn loss_total(direct: f64, intra: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_direct * direct + cfg.lambda_intra * intra
}

fn sign(positive: bool) -> f64 {
    if positive {
        1.0
    } else {
        -1.0
    }
}

/// Value and derivative (with respect to `d`) of one signed loss term.
#[inline]
fn term(signed: f64, d: f64, cfg: &TrainConfig) -> (f64, f64) {
    let v = signed * d;
    if cfg.hinge {
        let h = v + cfg.margin_alpha;
        if h > 0.0 {
            (h, signed)
        } else {
            (0.0, 0.0)
        }
    } else {
        (v, signed)
    }
}

struct Forward {
    refined: Vec<f64>,
    norms: Vec<f64>,
    collapsed: Vec<bool>,
}

fn forward(weights: &MoFWeights, ex: &TrainExample) -> Result<Forward> {
    let dim = ex.dim();
    let k = ex.candidates.len();
    let mut refined = vec![0.0; k * dim];
    let mut norms = vec![0.0; k];
    let mut collapsed = vec![false; k];
    for (c, cand) in ex.candidates.iter().enumerate() {
        let out = &mut refined[c * dim..(c + 1) * dim];
        collapsed[c] = super::refine_into(weights, &cand.neighbor_feats, dim, out)?;
        if !collapsed[c] {
            // Recover the pre-normalization norm for the Jacobian.
            let mut s = vec![0.0; dim];
            mix(weights, &cand.neighbor_feats, dim, &mut s);
            norms[c] = linalg::norm(&s);
        }
    }
    Ok(Forward {
        refined,
        norms,
        collapsed,
    })
}

fn mix(weights: &MoFWeights, feats: &[f64], dim: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (j, f) in feats.chunks_exact(dim).enumerate() {
        let row = weights.row(j);
        for d in 0..dim {
            let w = if row.len() == 1 { row[0] } else { row[d] };
            out[d] += w * f[d];
        }
    }
}

/// Adds `scale * (a - b) / |a - b|` to `g`; zero at coincident points.
fn add_unit_diff(g: &mut [f64], a: &[f64], b: &[f64], d: f64, scale: f64) {
    if d > 0.0 && scale != 0.0 {
        let s = scale / d;
        for ((gi, &x), &y) in g.iter_mut().zip(a).zip(b) {
            *gi += s * (x - y);
        }
    }
}

/// Loss terms and the gradient of the total loss for one example.
pub fn loss_and_grad(
    weights: &MoFWeights,
    ex: &TrainExample,
    cfg: &TrainConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let dim = ex.dim();
    let k = ex.candidates.len();
    ensure_arg!(k >= 1, "training example {} has no candidates", ex.query_id);
    weights.check_dim(dim)?;
    let fw = forward(weights, ex)?;
    let feat = |c: usize| &fw.refined[c * dim..(c + 1) * dim];

    // dL/df'_c for every candidate
    let mut g = vec![0.0; k * dim];
    let mut direct = 0.0;
    let mut intra = 0.0;
    for (c, cand) in ex.candidates.iter().enumerate() {
        let d = linalg::dist(feat(c), &ex.query);
        let (v, dv) = term(sign(cand.positive), d, cfg);
        direct += v;
        add_unit_diff(
            &mut g[c * dim..(c + 1) * dim],
            feat(c),
            &ex.query,
            d,
            cfg.lambda_direct * dv,
        );
    }
    if cfg.lambda_intra != 0.0 {
        for i in 0..k {
            if !ex.candidates[i].positive {
                continue;
            }
            for j in 0..k {
                let pj = ex.candidates[j].positive;
                if pj && j <= i {
                    continue;
                }
                let d = linalg::dist(feat(i), feat(j));
                let (v, dv) = term(sign(pj), d, cfg);
                intra += v;
                let s = cfg.lambda_intra * dv;
                let (fi, fj) = (feat(i).to_vec(), feat(j).to_vec());
                add_unit_diff(&mut g[i * dim..(i + 1) * dim], &fi, &fj, d, s);
                add_unit_diff(&mut g[j * dim..(j + 1) * dim], &fj, &fi, d, s);
            }
        }
    } else {
        let refined: Vec<(&[f64], bool)> = ex
            .candidates
            .iter()
            .enumerate()
            .map(|(c, cand)| (feat(c), cand.positive))
            .collect();
        intra = if cfg.hinge {
            hinge_intra(&refined, cfg)
        } else {
            loss_intra(&refined)
        };
    }

    // Back through f' = s / |s| and s = sum_j w_j ⊙ f_j.
    let width = weights.width();
    let mut grad = vec![0.0; weights.l() * width];
    let mut gs = vec![0.0; dim];
    for (c, cand) in ex.candidates.iter().enumerate() {
        if fw.collapsed[c] {
            continue;
        }
        let f = feat(c);
        let gc = &g[c * dim..(c + 1) * dim];
        let proj = linalg::dot(f, gc);
        let inv_n = 1.0 / fw.norms[c];
        for d in 0..dim {
            gs[d] = (gc[d] - f[d] * proj) * inv_n;
        }
        for (j, nf) in cand.neighbor_feats.chunks_exact(dim).enumerate() {
            let row = &mut grad[j * width..(j + 1) * width];
            if width == 1 {
                row[0] += linalg::dot(&gs, nf);
            } else {
                for d in 0..dim {
                    row[d] += gs[d] * nf[d];
                }
            }
        }
    }

    let terms = LossTerms {
        direct,
        intra,
        total: loss_total(direct, intra, cfg),
    };
    if !terms.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss for query {}",
            ex.query_id
        )));
    }
    if let Some(pos) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient entry {pos} for query {}",
            ex.query_id
        )));
    }
    Ok((terms, grad))
}

fn hinge_intra(refined: &[(&[f64], bool)], cfg: &TrainConfig) -> f64 {
    let mut acc = 0.0;
    for (i, (fi, pi)) in refined.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, (fj, pj)) in refined.iter().enumerate() {
            if *pj && j <= i {
                continue;
            }
            acc += term(sign(*pj), linalg::dist(fi, fj), cfg).0;
        }
    }
    acc
}

/// Gradient of the total loss with respect to every weight entry.
pub fn grad_weights(weights: &MoFWeights, ex: &TrainExample, cfg: &TrainConfig) -> Result<Vec<f64>> {
    loss_and_grad(weights, ex, cfg).map(|(_, g)| g)
}
