//! Feature storage and exact flat-index retrieval.
//!
//! # Binary layout
//!
//! ```text
//! offset  size      field
//! 0       4         magic "EPFV"
//! 4       4         version, u32 LE (= 1)
//! 8       8         row count N, u64 LE
//! 16      4         dimension D, u32 LE
//! 20      4*N*D     f32 LE values, row-major
//! ```
//!
//! Rows are L2-normalized on ingestion. Retrieval is exhaustive: every query is
//! compared against every row, distances are Euclidean, and ties are broken by
//! the lower row index.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::linalg;

pub const FEATURE_MAGIC: &[u8; 4] = b"EPFV";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Rows with a raw norm below this are rejected at ingestion.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// An `N x D` matrix of unit-norm f32 rows.
///
/// Alongside the f32 data the matrix keeps each row's inverse f64 norm, so
/// distances are measured against the row exactly renormalized in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
    inv_norms: Vec<f64>,
}

impl FeatureMatrix {
    pub fn empty(dim: usize) -> Result<Self> {
        ensure_arg!(dim > 0, "feature dimension must be positive");
        Ok(Self {
            dim,
            data: Vec::new(),
            inv_norms: Vec::new(),
        })
    }

    /// Builds a matrix from raw row-major values, normalizing every row.
    pub fn from_rows(dim: usize, mut data: Vec<f32>) -> Result<Self> {
        ensure_arg!(dim > 0, "feature dimension must be positive");
        ensure_arg!(
            data.len() % dim == 0,
            "data length {} is not a multiple of dimension {dim}",
            data.len()
        );
        for (i, row) in data.chunks_exact_mut(dim).enumerate() {
            normalize_row(row).map_err(|raw| {
                Error::Data(format!("row {i} has degenerate norm {raw:e}"))
            })?;
        }
        Ok(Self::from_unit_rows(dim, data))
    }

    fn from_unit_rows(dim: usize, data: Vec<f32>) -> Self {
        let inv_norms = data.chunks_exact(dim).map(linalg::inv_norm_f32).collect();
        Self {
            dim,
            data,
            inv_norms,
        }
    }

    pub fn len(&self) -> usize {
        self.inv_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_norms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Inverse f64 norm of row `i`.
    pub fn inv_norm(&self, i: usize) -> f64 {
        self.inv_norms[i]
    }

    /// Row `i` as an f64 vector renormalized exactly in f64.
    pub fn unit_row(&self, i: usize) -> Vec<f64> {
        let inv = self.inv_norms[i];
        self.row(i).iter().map(|&x| x as f64 * inv).collect()
    }

    /// Squared Euclidean distance between `q` and the renormalized row `i`.
    #[inline]
    pub fn sq_dist_to(&self, q: &[f64], i: usize) -> f64 {
        linalg::sq_dist_scaled(q, self.row(i), self.inv_norms[i])
    }
}

fn normalize_row(row: &mut [f32]) -> std::result::Result<(), f64> {
    let n = linalg::sum_sq(row.iter().map(|&x| x as f64)).sqrt();
    if n.is_nan() || n < MIN_ROW_NORM {
        return Err(n);
    }
    for x in row.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    Ok(())
}

/// Reads a feature file and normalizes its rows.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format(path, msg),
        other => other,
    })
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let bad = |msg: String| Error::format("<bytes>", msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(bad("bad magic, expected \"EPFV\"".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(bad("dimension is zero".into()));
    }
    let expected = (n as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        return Err(bad(format!(
            "header declares N={n}, D={dim} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::from_rows(dim, data)
}

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

/// One line of the companion metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// Projected planar position `[easting_m, northing_m]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gps: Option<[f64; 2]>,
    /// Seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl Record {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            gps: None,
            timestamp: None,
        }
    }

    pub fn with_gps(mut self, easting: f64, northing: f64) -> Self {
        self.gps = Some([easting, northing]);
        self
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_metadata(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A single unit-norm query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeature {
    pub id: String,
    vector: Vec<f32>,
}

impl QueryFeature {
    /// Normalizes `vector` unconditionally.
    pub fn new(id: impl Into<String>, mut vector: Vec<f32>) -> Result<Self> {
        let id = id.into();
        ensure_arg!(!vector.is_empty(), "query {id} has an empty vector");
        normalize_row(&mut vector)
            .map_err(|raw| Error::Data(format!("query {id} has degenerate norm {raw:e}")))?;
        Ok(Self { id, vector })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        linalg::to_f64(&self.vector)
    }
}

/// Pairs the rows of a query matrix with their metadata ids.
pub fn queries_from_matrix(m: &FeatureMatrix, meta: &[Record]) -> Result<Vec<QueryFeature>> {
    if meta.len() != m.len() {
        return Err(Error::Data(format!(
            "metadata has {} records but feature file has {} rows",
            meta.len(),
            m.len()
        )));
    }
    Ok(m.rows()
        .zip(meta)
        .map(|(row, rec)| QueryFeature {
            id: rec.id.clone(),
            vector: row.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub distance: f64,
}

/// Ordered top-K result for one query, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|c| c.index).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Total order used for every ranking in the crate: distance, then index.
#[inline]
pub(crate) fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k nearest rows to an arbitrary f64 query vector (not renormalized).
pub fn knn_search_vec(db: &FeatureMatrix, q: &[f64], k: usize) -> Result<Vec<Candidate>> {
    ensure_arg!(
        q.len() == db.dim(),
        "query dimension {} does not match database dimension {}",
        q.len(),
        db.dim()
    );
    ensure_arg!(k >= 1, "k must be at least 1");
    ensure_arg!(k <= db.len(), "k = {k} exceeds database size {}", db.len());
    let mut scored: Vec<(f64, usize)> = (0..db.len()).map(|i| (db.sq_dist_to(q, i), i)).collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_index);
    Ok(scored
        .into_iter()
        .map(|(d2, index)| Candidate {
            index,
            distance: d2.sqrt(),
        })
        .collect())
}

pub fn knn_search(db: &FeatureMatrix, q: &QueryFeature, k: usize) -> Result<CandidateList> {
    let entries = knn_search_vec(db, &q.to_f64(), k)?;
    Ok(CandidateList {
        query_id: q.id.clone(),
        entries,
    })
}

/// Cosine similarity of rows `i` and `j` (the dot product of the unit rows).
pub fn pairwise_similarity(db: &FeatureMatrix, i: usize, j: usize) -> Result<f64> {
    ensure_arg!(
        i < db.len() && j < db.len(),
        "row pair ({i}, {j}) out of range for {} rows",
        db.len()
    );
    Ok(linalg::dot_f32(db.row(i), db.row(j)))
}
