//! Mixture-of-features refinement.
//!
//! A candidate's feature is replaced by a weighted mixture of the features of
//! its `L` constraint neighbors (the first of which is the candidate itself):
//!
//! ```text
//! s  = sum_j  w_j ⊙ f_{n_j}
//! f' = s / ||s||
//! ```
//!
//! `w` is an `L x D` matrix applied elementwise. A matrix of width 1 holds one
//! scalar per neighbor and broadcasts over every feature dimension. When
//! `||s||` collapses below [`MIN_MIX_NORM`] the candidate's own feature is
//! returned unchanged.

mod loss;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::linalg;

pub use loss::{
    grad_weights, loss_and_grad, loss_direct, loss_intra, loss_total, ExampleCandidate,
    LossTerms, TrainExample,
};
pub use train::{
    build_examples, train, Adam, EarlyStopper, EpochLog, ExampleStats, TrainConfig, TrainOutcome,
};

pub const WEIGHT_MAGIC: &[u8; 4] = b"EPMW";
pub const WEIGHT_VERSION: u32 = 1;
const WEIGHT_HEADER_LEN: usize = 16;

pub const MIN_MIX_NORM: f64 = 1e-12;

/// How each neighbor's weight is shaped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// One weight per neighbor and feature dimension (`L x D`).
    #[default]
    Elementwise,
    /// One weight per neighbor (`L x 1`).
    Scalar,
}

/// The learnable mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MoFWeights {
    l: usize,
    width: usize,
    w: Vec<f64>,
}

impl MoFWeights {
    fn shape(l: usize, dim: usize, mode: MixMode) -> Result<(usize, usize)> {
        ensure_arg!(l >= 1, "neighbor count L must be at least 1");
        ensure_arg!(dim >= 1, "feature dimension must be at least 1");
        Ok((l, if mode == MixMode::Scalar { 1 } else { dim }))
    }

    /// Row 0 all ones, every other row zero: refinement returns the candidate.
    pub fn identity(l: usize, dim: usize, mode: MixMode) -> Result<Self> {
        let (l, width) = Self::shape(l, dim, mode)?;
        let mut w = vec![0.0; l * width];
        w[..width].fill(1.0);
        Ok(Self { l, width, w })
    }

    /// Every entry `1 / L`: plain averaging over the neighbor set.
    pub fn uniform(l: usize, dim: usize, mode: MixMode) -> Result<Self> {
        let (l, width) = Self::shape(l, dim, mode)?;
        Ok(Self {
            l,
            width,
            w: vec![1.0 / l as f64; l * width],
        })
    }

    /// `values` is row-major `l x width`; `width == 1` means scalar mode.
    pub fn from_values(l: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure_arg!(l >= 1 && width >= 1, "weights need at least one row and column");
        ensure_arg!(
            values.len() == l * width,
            "expected {} weight values, got {}",
            l * width,
            values.len()
        );
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("weight entry {pos} is not finite")));
        }
        Ok(Self { l, width, w: values })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Columns per row: the feature dimension, or 1 in scalar mode.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> MixMode {
        if self.width == 1 {
            MixMode::Scalar
        } else {
            MixMode::Elementwise
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.w[j * self.width..(j + 1) * self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    /// Whether the weights can refine features of dimension `dim`.
    pub fn supports_dim(&self, dim: usize) -> bool {
        self.width == dim || self.width == 1
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        ensure_arg!(
            self.supports_dim(dim),
            "weights of width {} cannot refine {dim}-dimensional features",
            self.width
        );
        Ok(())
    }

    /// Size in bytes of the float32 weight file.
    pub fn file_size(&self) -> usize {
        WEIGHT_HEADER_LEN + self.w.len() * 4
    }
}

/// Mixes `neighbor_feats` (row-major `L x dim`) into `out` and normalizes it.
///
/// Returns `true` when the mixture collapsed and `out` holds the first
/// neighbor row unchanged.
pub fn refine_into(
    weights: &MoFWeights,
    neighbor_feats: &[f64],
    dim: usize,
    out: &mut [f64],
) -> Result<bool> {
    let l = weights.l();
    ensure_arg!(
        neighbor_feats.len() == l * dim && out.len() == dim,
        "expected {l} x {dim} neighbor features, got {} values",
        neighbor_feats.len()
    );
    weights.check_dim(dim)?;
    out.fill(0.0);
    for (j, feat) in neighbor_feats.chunks_exact(dim).enumerate() {
        let row = weights.row(j);
        if row.len() == 1 {
            let w = row[0];
            for (o, &f) in out.iter_mut().zip(feat) {
                *o += w * f;
            }
        } else {
            for ((o, &w), &f) in out.iter_mut().zip(row).zip(feat) {
                *o += w * f;
            }
        }
    }
    if linalg::normalize_in_place(out, MIN_MIX_NORM) {
        Ok(false)
    } else {
        out.copy_from_slice(&neighbor_feats[..dim]);
        Ok(true)
    }
}

pub fn refine(weights: &MoFWeights, neighbor_feats: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    refine_into(weights, neighbor_feats, dim, &mut out)?;
    Ok(out)
}

pub fn encode_weights(weights: &MoFWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(weights.file_size());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.l as u32).to_le_bytes());
    out.extend_from_slice(&(weights.width as u32).to_le_bytes());
    for &v in &weights.w {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<MoFWeights> {
    let bad = |msg: String| Error::format("<bytes>", msg);
    if bytes.len() < WEIGHT_HEADER_LEN || &bytes[..4] != WEIGHT_MAGIC {
        return Err(bad("not a weight file (magic \"EPMW\" missing)".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(4) != WEIGHT_VERSION {
        return Err(bad(format!("unsupported weight file version {}", word(4))));
    }
    let (l, width) = (word(8) as usize, word(12) as usize);
    if l == 0 || width == 0 || bytes.len() != WEIGHT_HEADER_LEN + l * width * 4 {
        return Err(bad(format!(
            "header declares L={l}, D={width} but payload is {} bytes",
            bytes.len() - WEIGHT_HEADER_LEN
        )));
    }
    let values = bytes[WEIGHT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    MoFWeights::from_values(l, width, values)
}

pub fn save_weights(path: impl AsRef<Path>, weights: &MoFWeights) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(weights)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<MoFWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format(path, msg),
        other => other,
    })
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;

    #[test]
    fn identity_returns_candidate_exactly() {
        let w = MoFWeights::identity(3, 2, MixMode::Elementwise).unwrap();
        let a = 0.3f32.to_radians();
        let c = [a.cos() as f64, a.sin() as f64];
        let feats = [c[0], c[1], 0.0, 1.0, -1.0, 0.0];
        let out = refine(&w, &feats, 2).unwrap();
        let inv = 1.0 / linalg::norm(&c);
        assert_eq!(out, vec![c[0] * inv, c[1] * inv]);
    }

    #[test]
    fn half_weights_worked_example() {
        let w = MoFWeights::from_values(2, 2, vec![0.5; 4]).unwrap();
        let out = refine(&w, &[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-12 && (out[1] - h).abs() < 1e-12);
        assert!((out[0] - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn zero_weights_fall_back_to_candidate() {
        let w = MoFWeights::from_values(2, 2, vec![0.0; 4]).unwrap();
        let feats = [0.6, 0.8, 1.0, 0.0];
        let mut out = [0.0; 2];
        assert!(refine_into(&w, &feats, 2, &mut out).unwrap());
        assert_eq!(out, [0.6, 0.8]);
    }

    #[test]
    fn scalar_weights_broadcast() {
        let w = MoFWeights::from_values(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(w.mode(), MixMode::Scalar);
        let out = refine(&w, &[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((out[0] - out[1]).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let w = MoFWeights::identity(2, 3, MixMode::Elementwise).unwrap();
        assert!(matches!(refine(&w, &[1.0; 4], 2), Err(Error::Argument(_))));
        assert!(matches!(refine(&w, &[1.0; 3], 3), Err(Error::Argument(_))));
    }

    #[test]
    fn weight_file_layout() {
        let w = MoFWeights::uniform(8, 768, MixMode::Elementwise).unwrap();
        let bytes = encode_weights(&w);
        assert_eq!(bytes.len(), 16 + 8 * 768 * 4);
        assert_eq!(&bytes[..4], b"EPMW");
        assert_eq!(decode_weights(&bytes).unwrap().values()[0], 0.125);
        assert!(decode_weights(&bytes[..bytes.len() - 4]).is_err());
    }
}
