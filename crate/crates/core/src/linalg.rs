//! Small dense-vector kernels shared by retrieval, refinement and the baselines.
//!
//! Every distance in the crate is taken against a vector scaled by the inverse
//! of its own f64 norm, computed by [`inv_norm_f32`]. Retrieval and refinement both
//! route through these helpers so an unchanged row yields bit-identical
//! distances on either path.

/// Sequential sum of squares in f64.
#[inline]
pub fn sum_sq<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = 0.0;
    for v in values {
        acc += v * v;
    }
    acc
}

/// Inverse L2 norm of an f32 slice, accumulated in f64.
#[inline]
pub fn inv_norm_f32(row: &[f32]) -> f64 {
    1.0 / sum_sq(row.iter().map(|&x| x as f64)).sqrt()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    sum_sq(v.iter().copied()).sqrt()
}

/// Squared distance between `q` and `row * inv`.
#[inline]
pub fn sq_dist_scaled(q: &[f64], row: &[f32], inv: f64) -> f64 {
    debug_assert_eq!(q.len(), row.len());
    let mut acc = 0.0;
    for (&a, &b) in q.iter().zip(row) {
        let d = a - (b as f64) * inv;
        acc += d * d;
    }
    acc
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scales `v` in place to unit length. Returns `false` (leaving `v` untouched)
/// when the norm is below `min_norm`.
pub fn normalize_in_place(v: &mut [f64], min_norm: f64) -> bool {
    let n = norm(v);
    if n.is_nan() || n < min_norm {
        return false;
    }
    let inv = 1.0 / n;
    for x in v.iter_mut() {
        *x *= inv;
    }
    true
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_distance_matches_explicit_normalization() {
        let row = [3.0f32, 4.0];
        let inv = inv_norm_f32(&row);
        let q = [1.0, 0.0];
        let unit: Vec<f64> = row.iter().map(|&x| x as f64 * inv).collect();
        assert_eq!(sq_dist_scaled(&q, &row, inv), sq_dist(&q, &unit));
        assert!((sq_dist(&q, &unit) - (0.4f64 * 0.4 + 0.8 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut v = [0.0, 0.0];
        assert!(!normalize_in_place(&mut v, 1e-12));
        let mut v = [0.0, 2.0];
        assert!(normalize_in_place(&mut v, 1e-12));
        assert_eq!(v, [0.0, 1.0]);
    }
}
