//! Vector and induced-operator norms.
//!
//! Three norms are supported: Euclidean, sup and L1. Induced operator
//! norms are exact for sup (max absolute row sum) and L1 (max absolute
//! column sum) in every dimension. The Euclidean operator norm is the top
//! singular value: computed in closed form for d <= 3 and by power
//! iteration on A^T A (relative tolerance 1e-10) for larger d.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Euclidean,
    Sup,
    L1,
}

pub const POWER_ITER_TOL: f64 = 1e-10;
pub const POWER_ITER_MAX: usize = 10_000;

impl Norm {
    pub fn vec(&self, x: &DVector<f64>) -> f64 {
        match self {
            Norm::Euclidean => x.norm(),
            Norm::Sup => x.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            Norm::L1 => x.iter().map(|v| v.abs()).sum(),
        }
    }

    /// Induced operator norm of a dense matrix.
    pub fn op(&self, a: &DMatrix<f64>) -> f64 {
        match self {
            Norm::Sup => max_abs_row_sum(a),
            Norm::L1 => max_abs_col_sum(a),
            Norm::Euclidean => spectral_norm(a),
        }
    }

    /// Induced operator norm of a diagonal matrix given by its diagonal.
    ///
    /// All three induced norms of a diagonal matrix coincide with the
    /// largest absolute diagonal entry.
    pub fn op_diag(&self, d: &DVector<f64>) -> f64 {
        d.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

fn max_abs_row_sum(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max)
}

fn max_abs_col_sum(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max)
}

/// Top singular value of `a`.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    debug_assert_eq!(d, a.ncols(), "operator norms require square matrices");
    match d {
        0 => 0.0,
        1 => a[(0, 0)].abs(),
        2 => spectral_norm_2(a),
        3 => spectral_norm_3(a),
        _ => spectral_norm_power(a),
    }
}

fn spectral_norm_2(a: &DMatrix<f64>) -> f64 {
    // Largest eigenvalue of G = A^T A from trace and determinant.
    let g = a.transpose() * a;
    let t = g[(0, 0)] + g[(1, 1)];
    let det = (g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)]).max(0.0);
    let disc = (t * t - 4.0 * det).max(0.0).sqrt();
    (0.5 * (t + disc)).max(0.0).sqrt()
}

fn spectral_norm_3(a: &DMatrix<f64>) -> f64 {
    largest_sym_eigenvalue_3(&(a.transpose() * a)).max(0.0).sqrt()
}

/// Largest eigenvalue of a symmetric 3x3 matrix by the trigonometric
/// closed form for the characteristic cubic.
fn largest_sym_eigenvalue_3(g: &DMatrix<f64>) -> f64 {
    let p1 = g[(0, 1)].powi(2) + g[(0, 2)].powi(2) + g[(1, 2)].powi(2);
    if p1 == 0.0 {
        return g[(0, 0)].max(g[(1, 1)]).max(g[(2, 2)]);
    }
    let q = (g[(0, 0)] + g[(1, 1)] + g[(2, 2)]) / 3.0;
    let p2 = (g[(0, 0)] - q).powi(2)
        + (g[(1, 1)] - q).powi(2)
        + (g[(2, 2)] - q).powi(2)
        + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = g.clone();
    for i in 0..3 {
        b[(i, i)] -= q;
    }
    b /= p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    q + 2.0 * p * phi.cos()
}

fn spectral_norm_power(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    let g = a.transpose() * a;
    // Deterministic start with a mild tilt so it is never orthogonal to the
    // dominant eigenvector by symmetry.
    let mut v = DVector::from_fn(d, |i, _| 1.0 + 1e-3 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0_f64;
    for _ in 0..POWER_ITER_MAX {
        let w = &g * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / nw;
        if (next - lambda).abs() <= POWER_ITER_TOL * next.abs().max(1e-300) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// Numerical rank of the set of column vectors at relative tolerance `tol`.
pub fn rank_of_columns(cols: &[DVector<f64>], tol: f64) -> usize {
    if cols.is_empty() {
        return 0;
    }
    let d = cols[0].len();
    let m = DMatrix::from_fn(d, cols.len(), |i, j| cols[j][i]);
    let svd = m.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > tol * smax).count()
}
