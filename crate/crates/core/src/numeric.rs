//! Dense double-precision arithmetic, stable probability transforms, and the
//! finite-difference gradient checker used to validate every analytic
//! gradient in the crate.

use crate::error::{GcdError, Result};
use serde::{Deserialize, Serialize};

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM_EPS: f64 = 1e-30;
/// Probabilities are clamped to at least this before taking logs, so one-hot
/// targets cannot produce infinities.
pub const LOG_CLAMP: f64 = 1e-300;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GcdError::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(Mat64 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(GcdError::EmptyInput("matrix rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GcdError::ShapeMismatch {
                    expected: format!("row of {cols}"),
                    got: format!("row of {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat64 { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Mat64 {
        let mut out = Mat64::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// `self * other`, shapes (m x k)(k x n).
    pub fn matmul(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Mat64::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`, shapes (m x k)^T (m x n) -> (k x n).
    pub fn transpose_matmul(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.rows, other.rows, "transpose_matmul outer dimensions");
        let mut out = Mat64::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`, shapes (m x k)(n x k)^T -> (m x n).
    pub fn matmul_transpose(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.cols, other.cols, "matmul_transpose inner dimensions");
        let mut out = Mat64::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Mat64) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales a vector to unit L2 norm, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= ZERO_NORM_EPS {
        return Err(GcdError::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// 1 - cos(u, v); lies in [0, 2] for any pair of nonzero vectors.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = norm(u);
    let nv = norm(v);
    if nu <= ZERO_NORM_EPS {
        return Err(GcdError::ZeroVector { norm: nu });
    }
    if nv <= ZERO_NORM_EPS {
        return Err(GcdError::ZeroVector { norm: nv });
    }
    Ok(1.0 - dot(u, v) / (nu * nv))
}

/// Temperature softmax computed via a max-shifted log-sum-exp.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(GcdError::NonPositiveTemperature(tau));
    }
    if logits.is_empty() {
        return Err(GcdError::EmptyInput("softmax logits"));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

fn validate_probability(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(GcdError::EmptyInput("probability vector"));
    }
    if let Some(bad) = p.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(GcdError::NotAProbabilityVector { reason: format!("entry {bad} is negative or non-finite") });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GcdError::NotAProbabilityVector { reason: format!("entries sum to {sum}") });
    }
    Ok(())
}

/// Shannon entropy in nats; 0 log 0 is treated as 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_probability(p)?;
    Ok(p.iter().map(|&x| if x > 0.0 { -x * x.max(LOG_CLAMP).ln() } else { 0.0 }).sum())
}

/// Compares an analytic gradient against central differences.
///
/// Returns the max over coordinates of
/// `|analytic - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |analytic|)`.
pub fn check_gradient<F, G>(f: F, grad_f: G, x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!(h > 0.0, "step must be positive");
    let analytic = grad_f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length");
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() || !analytic[i].is_finite() {
            return Err(GcdError::NonFiniteEvaluation { context: format!("gradient check at coordinate {i}") });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Sums values in a fixed pairwise-tree order. Used where a reduction must be
/// insensitive (to ~1e-12) to the order its members were gathered in.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn l2_normalize_345_triangle() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_vector_unchanged() {
        let out = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_diagonal() {
        // 2/sqrt(8)
        let out = l2_normalize(&[2.0, 2.0]).unwrap();
        let expected = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_rejects_zero() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(GcdError::ZeroVector { .. })));
    }

    #[test]
    fn cosine_distance_basics() {
        assert!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_symmetry_and_temperature() {
        let p = softmax_temp(&[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        // (1, 0) at tau = 0.5 -> e^2 / (e^2 + 1)
        let p = softmax_temp(&[1.0, 0.0], 0.5).unwrap();
        let e2 = (2.0f64).exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.880797).abs() < 1e-6);
        assert!((p[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(GcdError::NonPositiveTemperature(_))));
        assert!(matches!(softmax_temp(&[1.0], -2.0), Err(GcdError::NonPositiveTemperature(_))));
    }

    #[test]
    fn entropy_uniform_and_onehot() {
        let e = entropy(&[0.25; 4]).unwrap();
        assert!((e - (4.0f64).ln()).abs() < 1e-12);
        assert!((e - 1.386294).abs() < 1e-6);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_two_point() {
        // -0.75 ln 0.75 - 0.25 ln 0.25
        let e = entropy(&[0.75, 0.25]).unwrap();
        assert!((e - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_non_probability() {
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn check_gradient_quadratic_is_exact() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = |x: &[f64]| x.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
        let err = check_gradient(f, g, &[0.3, -1.7, 2.2], 1e-5).unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn check_gradient_exponential() {
        let f = |x: &[f64]| x.iter().map(|v| v.exp()).sum::<f64>();
        let g = |x: &[f64]| x.iter().map(|v| v.exp()).collect::<Vec<_>>();
        let err = check_gradient(f, g, &[0.0, 1.0], 1e-5).unwrap();
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn check_gradient_flags_wrong_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let wrong = |x: &[f64]| x.iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        // |2x - 3x| / max(1, |3x|) = 1/3 once |3x| >= 1.
        let err = check_gradient(f, wrong, &[1.5, -2.0], 1e-5).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-4, "err {err}");
    }

    #[test]
    fn check_gradient_rejects_non_finite() {
        let f = |x: &[f64]| 1.0 / x[0];
        let g = |_: &[f64]| vec![f64::NAN];
        assert!(matches!(
            check_gradient(f, g, &[0.5], 1e-5),
            Err(GcdError::NonFiniteEvaluation { .. })
        ));
    }

    #[test]
    fn matmul_small_fixture() {
        let a = Mat64::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Mat64::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        let ct = a.matmul_transpose(&Mat64::from_vec(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap());
        assert_eq!(ct.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..101).map(|i| (i as f64) * 0.37 - 11.0).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 1..20), tau in 0.15f64..10.0) {
            // tau below ~0.14 can underflow exp for a 100-wide logit spread;
            // the classifier's cosine logits live in [-1, 1] where any tau
            // used here is safe.
            let p = softmax_temp(&logits, tau).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn softmax_temp_equals_prescaled_logits(logits in proptest::collection::vec(-20.0f64..20.0, 2..10), tau in 0.05f64..5.0) {
            let a = softmax_temp(&logits, tau).unwrap();
            let scaled: Vec<f64> = logits.iter().map(|x| x / tau).collect();
            let b = softmax_temp(&scaled, 1.0).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariance(logits in proptest::collection::vec(-50.0f64..50.0, 2..10), c in -40.0f64..40.0) {
            let a = softmax_temp(&logits, 1.0).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
            let b = softmax_temp(&shifted, 1.0).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_distance_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 3),
            v in proptest::collection::vec(-5.0f64..5.0, 3),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-6 && norm(&v) > 1e-6);
            let d1 = cosine_distance(&u, &v).unwrap();
            let d2 = cosine_distance(&v, &u).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12);
            let su: Vec<f64> = u.iter().map(|x| c * x).collect();
            let d3 = cosine_distance(&su, &v).unwrap();
            prop_assert!((d1 - d3).abs() <= 1e-12);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d1));
        }

        #[test]
        fn l2_normalize_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 2..8)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() <= 1e-12);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
