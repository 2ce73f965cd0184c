//! Contraction diagnostics for the random maps driving the recursion.
//!
//! Three estimators, all Monte Carlo over stream-addressed replicas:
//!
//! * gamma-moment geometricity of coupled chains,
//!   `E |X_n^x - X_n^y|^gamma <= C rho^n |x - y|^gamma`, fitted by least
//!   squares on the log of the mean coupled ratio over n;
//! * the top Lyapunov exponent
//!   `lambda = lim (1/n) log ||A_1 ... A_n||`, fitted on the mean
//!   log-norm curve with an explicit sqrt(k) finite-size term so that the
//!   diffusive fluctuation of the log norm does not bias the slope;
//! * the alpha-moment growth rate
//!   `kappa(alpha) = lim (E ||A_1 ... A_n||^alpha)^{1/n}`, read off as the
//!   slope of `log E ||P_k||^alpha` over the upper half of a checkpoint
//!   grid, with moments accumulated in log space.
//!
//! Matrix products renormalize every 32 multiplications; scalar and
//! diagonal laws take exact log-space fast paths.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Norm;
use crate::model::{MatrixDraw, MatrixLaw, RecursionModel, StepSample};
use crate::rng::{log_sum_exp, pairwise_mean, Domain, StreamFactory};

/// Steps between norm renormalizations of a running matrix product.
pub const RENORM_EVERY: usize = 32;

// ---------------------------------------------------------------------------
// gamma-moment geometricity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GeometricityFit {
    pub gamma: f64,
    /// Fitted per-step contraction factor of the gamma moment.
    pub rho_hat: f64,
    /// Fitted constant in front of rho^n.
    pub c_hat: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r2: f64,
    pub n_max: usize,
    pub pairs: usize,
    /// True when coupled differences vanished identically.
    pub degenerate: bool,
    /// (n, mean over pairs of |X_n^x - X_n^y|^gamma / |x - y|^gamma).
    pub per_n: Vec<(usize, f64)>,
}

/// Couples two chains through identical step samples from `pairs` random
/// start pairs in the unit ball and fits
/// `log E ratio_n ~ log C + n log rho` over n = 1..n_max.
pub fn estimate_gamma_geometric(
    model: &RecursionModel,
    gamma: f64,
    n_max: usize,
    pairs: usize,
    factory: &StreamFactory,
) -> Result<GeometricityFit> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be positive (got {gamma})")));
    }
    if n_max < 4 {
        return Err(Error::InvalidParameter(
            "geometricity fit needs at least 4 distinct n values".into(),
        ));
    }
    if pairs == 0 {
        return Err(Error::EmptyEnsemble);
    }

    let d = model.dim;
    let per_pair: Vec<Vec<f64>> = (0..pairs)
        .into_par_iter()
        .map(|p| {
            let mut rng = factory.stream(Domain::Geometricity, p as u64);
            let (mut x, mut y) = distinct_ball_pair(d, &mut rng);
            let dist0 = model.norm.vec(&(&x - &y));
            let mut step = StepSample::zero(d);
            let mut bx = DVector::zeros(d);
            let mut by = DVector::zeros(d);
            let mut ratios = Vec::with_capacity(n_max);
            for _ in 0..n_max {
                model.draw_step_into(&mut rng, &mut step);
                model.apply_step(&step, &x, &mut bx);
                model.apply_step(&step, &y, &mut by);
                std::mem::swap(&mut x, &mut bx);
                std::mem::swap(&mut y, &mut by);
                let dist = model.norm.vec(&(&x - &y));
                ratios.push((dist / dist0).powf(gamma));
            }
            ratios
        })
        .collect();

    let mut per_n = Vec::with_capacity(n_max);
    let mut scratch = vec![0.0_f64; pairs];
    for n in 0..n_max {
        for (p, r) in per_pair.iter().enumerate() {
            scratch[p] = r[n];
        }
        per_n.push((n + 1, pairwise_mean(&scratch)));
    }

    if per_n.iter().any(|&(_, m)| !m.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            context: "coupled chains produced non-finite gamma moments".into(),
        });
    }

    if per_n.iter().any(|&(_, m)| m == 0.0) {
        return Ok(GeometricityFit {
            gamma,
            rho_hat: 0.0,
            c_hat: 0.0,
            r2: 1.0,
            n_max,
            pairs,
            degenerate: true,
            per_n,
        });
    }

    let xs: Vec<f64> = per_n.iter().map(|&(n, _)| n as f64).collect();
    let ys: Vec<f64> = per_n.iter().map(|&(_, m)| m.ln()).collect();
    let (intercept, slope, r2) = fit_line(&xs, &ys);

    Ok(GeometricityFit {
        gamma,
        rho_hat: slope.exp(),
        c_hat: intercept.exp(),
        r2,
        n_max,
        pairs,
        degenerate: false,
        per_n,
    })
}

fn distinct_ball_pair<R: Rng + ?Sized>(d: usize, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
    // Separation of at least 1/2 keeps the coupled difference well above
    // rounding noise; the fitted ratio is homogeneous in |x - y|, so
    // conditioning on separation does not change what is estimated.
    loop {
        let x = ball_point(d, rng);
        let y = ball_point(d, rng);
        if (&x - &y).norm() > 0.5 {
            return (x, y);
        }
    }
}

fn ball_point<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    let mut v = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let n = v.norm();
    if n == 0.0 {
        v[0] = 1.0;
        return v;
    }
    let u: f64 = rng.random();
    v * (u.powf(1.0 / d as f64) / n)
}

// ---------------------------------------------------------------------------
// running matrix products
// ---------------------------------------------------------------------------

enum Product {
    Scalar { log_abs: f64 },
    Diag { d: DVector<f64>, log_acc: f64 },
    Dense { p: DMatrix<f64>, scratch: DMatrix<f64>, log_acc: f64, count: usize },
}

impl Product {
    fn identity(law: &MatrixLaw, dim: usize) -> Self {
        match law {
            MatrixLaw::DeterministicScalar(_) | MatrixLaw::ScalarLaw(_) => {
                Product::Scalar { log_abs: 0.0 }
            }
            MatrixLaw::DiagonalIid(_) => Product::Diag {
                d: DVector::from_element(dim, 1.0),
                log_acc: 0.0,
            },
            _ => Product::Dense {
                p: DMatrix::identity(dim, dim),
                scratch: DMatrix::zeros(dim, dim),
                log_acc: 0.0,
                count: 0,
            },
        }
    }

    fn push(&mut self, law: &MatrixLaw, norm: Norm, draw: MatrixDraw) {
        match (self, draw) {
            (Product::Scalar { log_abs }, MatrixDraw::Scalar(a)) => {
                *log_abs += a.abs().ln();
            }
            (Product::Diag { d, log_acc }, MatrixDraw::Diag(v)) => {
                for i in 0..d.len() {
                    d[i] *= v[i];
                }
                let m = norm.op_diag(d);
                if m > 0.0 && (m > 1e100 || m < 1e-100) {
                    *log_acc += m.ln();
                    *d /= m;
                }
            }
            (Product::Dense { p, scratch, log_acc, count }, MatrixDraw::Index(i)) => {
                let a = law.index_matrix(i);
                scratch.gemm(1.0, a, p, 0.0);
                std::mem::swap(p, scratch);
                *count += 1;
                if *count % RENORM_EVERY == 0 {
                    let m = norm.op(p);
                    if m > 0.0 {
                        *log_acc += m.ln();
                        *p /= m;
                    }
                }
            }
            _ => unreachable!("draw kind does not match product representation"),
        }
    }

    fn log_norm(&self, norm: Norm) -> f64 {
        match self {
            Product::Scalar { log_abs } => *log_abs,
            Product::Diag { d, log_acc } => log_acc + norm.op_diag(d).ln(),
            Product::Dense { p, log_acc, .. } => log_acc + norm.op(p).ln(),
        }
    }
}

/// Per-checkpoint log ||A_1 ... A_k|| for every replica.
/// Returned as `curves[checkpoint][replica]`.
fn log_norm_curves(
    law: &MatrixLaw,
    dim: usize,
    norm: Norm,
    checkpoints: &[usize],
    replicas: usize,
    domain: Domain,
    factory: &StreamFactory,
) -> Vec<Vec<f64>> {
    let per_replica: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = factory.stream(domain, r as u64);
            let mut prod = Product::identity(law, dim);
            let mut out = Vec::with_capacity(checkpoints.len());
            let mut next = 0usize;
            let n_last = *checkpoints.last().unwrap();
            for k in 1..=n_last {
                prod.push(law, norm, law.draw(&mut rng));
                while next < checkpoints.len() && checkpoints[next] == k {
                    out.push(prod.log_norm(norm));
                    next += 1;
                }
            }
            out
        })
        .collect();

    let mut curves = vec![vec![0.0_f64; replicas]; checkpoints.len()];
    for (r, c) in per_replica.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            curves[i][r] = v;
        }
    }
    curves
}

fn uniform_checkpoints(n: usize, want: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=want.min(n))
        .map(|i| (n as f64 * i as f64 / want.min(n) as f64).round() as usize)
        .map(|k| k.max(1))
        .collect();
    ks.dedup();
    ks
}

// ---------------------------------------------------------------------------
// Lyapunov exponent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LyapunovFit {
    pub lambda_hat: f64,
    pub stderr: f64,
    pub n: usize,
    pub replicas: usize,
    /// (k, mean over replicas of log ||A_1 ... A_k||).
    pub curve: Vec<(usize, f64)>,
}

/// Estimates the top Lyapunov exponent of the i.i.d. product.
///
/// The mean log-norm curve is fitted with `b + c sqrt(k) + lambda k`; the
/// sqrt term absorbs the O(sqrt(k)) expectation of the diffusive
/// fluctuation of `log ||P_k||`, which otherwise biases the plain
/// `(1/n) log ||P_n||` estimator whenever the leading exponents are close.
/// The standard error comes from refitting over 16 replica blocks.
pub fn estimate_lyapunov(
    law: &MatrixLaw,
    dim: usize,
    norm: Norm,
    n: usize,
    replicas: usize,
    factory: &StreamFactory,
) -> Result<LyapunovFit> {
    if n < 4 || replicas == 0 {
        return Err(Error::InvalidParameter(
            "lyapunov estimation needs n >= 4 and at least one replica".into(),
        ));
    }
    law.validate(dim)?;
    let checkpoints = uniform_checkpoints(n, 16);
    let curves = log_norm_curves(law, dim, norm, &checkpoints, replicas, Domain::Lyapunov, factory);

    let mean_curve: Vec<f64> = curves.iter().map(|c| pairwise_mean(c)).collect();
    if mean_curve.iter().any(|v| !v.is_finite()) {
        // A law with mass at zero annihilates the product.
        return Ok(LyapunovFit {
            lambda_hat: f64::NEG_INFINITY,
            stderr: 0.0,
            n,
            replicas,
            curve: checkpoints.iter().cloned().zip(mean_curve).collect(),
        });
    }

    let lambda_hat = fit_drift(&checkpoints, &mean_curve, n);

    // Block resampling for the standard error.
    let blocks = 16usize.min(replicas);
    let mut block_lambdas = Vec::with_capacity(blocks);
    if blocks >= 2 {
        for b in 0..blocks {
            let idx: Vec<usize> = (b * replicas / blocks..(b + 1) * replicas / blocks).collect();
            if idx.is_empty() {
                continue;
            }
            let bm: Vec<f64> = curves
                .iter()
                .map(|c| {
                    let vals: Vec<f64> = idx.iter().map(|&r| c[r]).collect();
                    pairwise_mean(&vals)
                })
                .collect();
            block_lambdas.push(fit_drift(&checkpoints, &bm, n));
        }
    }
    let stderr = if block_lambdas.len() >= 2 {
        let g = block_lambdas.len() as f64;
        let mean = block_lambdas.iter().sum::<f64>() / g;
        let var = block_lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (g - 1.0);
        (var / g).sqrt()
    } else {
        0.0
    };

    Ok(LyapunovFit {
        lambda_hat,
        stderr,
        n,
        replicas,
        curve: checkpoints.iter().cloned().zip(mean_curve).collect(),
    })
}

/// Least-squares drift of `y(k) ~ b + c sqrt(k/n) + s (k/n)`, returned in
/// per-step units `s / n`. Falls back to a plain line when there are fewer
/// than three checkpoints.
fn fit_drift(checkpoints: &[usize], ys: &[f64], n: usize) -> f64 {
    let taus: Vec<f64> = checkpoints.iter().map(|&k| k as f64 / n as f64).collect();
    if taus.len() < 3 {
        let (_, slope, _) = fit_line(&taus, ys);
        return slope / n as f64;
    }
    // Normal equations for the 3-parameter design [1, sqrt(tau), tau].
    let mut g: DMatrix<f64> = DMatrix::zeros(3, 3);
    let mut rhs: DVector<f64> = DVector::zeros(3);
    for (i, &t) in taus.iter().enumerate() {
        let row = [1.0, t.sqrt(), t];
        for a in 0..3 {
            rhs[a] += row[a] * ys[i];
            for b in 0..3 {
                g[(a, b)] += row[a] * row[b];
            }
        }
    }
    match g.lu().solve(&rhs) {
        Some(beta) => beta[2] / n as f64,
        None => {
            let (_, slope, _) = fit_line(&taus, ys);
            slope / n as f64
        }
    }
}

// ---------------------------------------------------------------------------
// kappa(alpha): alpha-moment growth rate of products
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KappaFit {
    pub alpha: f64,
    pub kappa_hat: f64,
    pub n: usize,
    pub replicas: usize,
    /// (k, (E ||A_1 ... A_k||^alpha)^{1/k}) convergence curve.
    pub per_n: Vec<(usize, f64)>,
    /// True when the empirical alpha-moment at the last checkpoint is
    /// carried by fewer than 0.1% of the replicas; the estimate is then
    /// unstable.
    pub dominated: bool,
}

/// Estimates `kappa(alpha) = lim_n (E ||A_1 ... A_n||^alpha)^{1/n}` from
/// the slope of `log E ||P_k||^alpha` over the upper half of the
/// checkpoint grid. Expectations are computed by log-sum-exp, so growth
/// never overflows.
pub fn estimate_kappa(
    law: &MatrixLaw,
    dim: usize,
    norm: Norm,
    alpha: f64,
    n: usize,
    replicas: usize,
    factory: &StreamFactory,
) -> Result<KappaFit> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive (got {alpha})")));
    }
    if n < 4 || replicas == 0 {
        return Err(Error::InvalidParameter(
            "kappa estimation needs n >= 4 and at least one replica".into(),
        ));
    }
    law.validate(dim)?;
    let checkpoints = uniform_checkpoints(n, 16);
    let curves = log_norm_curves(law, dim, norm, &checkpoints, replicas, Domain::Kappa, factory);

    let r = replicas as f64;
    let log_moments: Vec<f64> = curves
        .iter()
        .map(|c| {
            let scaled: Vec<f64> = c.iter().map(|&l| alpha * l).collect();
            log_sum_exp(&scaled) - r.ln()
        })
        .collect();

    let per_n: Vec<(usize, f64)> = checkpoints
        .iter()
        .zip(&log_moments)
        .map(|(&k, &lm)| (k, (lm / k as f64).exp()))
        .collect();

    // Slope over the upper half of the grid.
    let half = checkpoints.len() / 2;
    let xs: Vec<f64> = checkpoints[half..].iter().map(|&k| k as f64).collect();
    let ys: Vec<f64> = log_moments[half..].to_vec();
    let kappa_hat = if xs.len() >= 2 {
        let (_, slope, _) = fit_line(&xs, &ys);
        slope.exp()
    } else {
        per_n.last().map(|&(_, v)| v).unwrap_or(f64::NAN)
    };

    // Dominance diagnostic at the last checkpoint.
    let last = curves.last().unwrap();
    let scaled: Vec<f64> = last.iter().map(|&l| alpha * l).collect();
    let total = log_sum_exp(&scaled);
    let mut sorted = scaled.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top = ((replicas as f64) * 0.001).ceil() as usize;
    let top_share = (log_sum_exp(&sorted[..top.max(1).min(sorted.len())]) - total).exp();
    let dominated = replicas >= 1000 && top_share > 0.5;

    Ok(KappaFit {
        alpha,
        kappa_hat,
        n,
        replicas,
        per_n,
        dominated,
    })
}

// ---------------------------------------------------------------------------
// shared least squares
// ---------------------------------------------------------------------------

/// Centered simple linear regression; returns (intercept, slope, r2).
pub(crate) fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
        syy += (y - ybar) * (y - ybar);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ybar - slope * xbar;
    let r2 = if syy > 0.0 {
        let mut ssr = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let f = intercept + slope * x;
            ssr += (y - f) * (y - f);
        }
        1.0 - ssr / syy
    } else {
        1.0
    };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{benchmark_2d, scalar_affine, MatrixLaw, ScalarDist};

    fn factory() -> StreamFactory {
        StreamFactory::new(1234)
    }

    const HALF_LOG_2_3: f64 = -0.202_732_554_054_082_2; // (1/2) ln(2/3)

    #[test]
    fn deterministic_scalar_geometricity_is_exact() {
        let model = scalar_affine(0.5, 2.0, 1.0).unwrap();
        let fit = estimate_gamma_geometric(&model, 1.0, 8, 64, &factory()).unwrap();
        assert!((fit.rho_hat - 0.5).abs() < 1e-10);
        assert!((fit.c_hat - 1.0).abs() < 1e-10);
        assert!(fit.r2 > 1.0 - 1e-12);
        let fit = estimate_gamma_geometric(&model, 0.3, 8, 64, &factory()).unwrap();
        assert!((fit.rho_hat - 0.5_f64.powf(0.3)).abs() < 1e-10);
    }

    #[test]
    fn benchmark_contracts_at_small_gamma_expands_at_two() {
        let model = benchmark_2d(0.5, 1.0, Norm::Euclidean).unwrap();
        let small = estimate_gamma_geometric(&model, 0.1, 12, 4000, &factory()).unwrap();
        assert!(small.rho_hat < 1.0, "rho_hat = {}", small.rho_hat);
        let big = estimate_gamma_geometric(&model, 2.0, 8, 8000, &factory()).unwrap();
        assert!(big.rho_hat > 1.0, "rho_hat = {}", big.rho_hat);
        // At gamma = 2 the coordinatewise second moment grows by
        // E a^2 = (4 + 1/9)/2 per step; the product moment is noisy, so
        // the check is loose.
        assert!((big.rho_hat - 37.0 / 18.0).abs() < 0.3, "rho_hat = {}", big.rho_hat);
    }

    #[test]
    fn geometricity_rejects_short_fits() {
        let model = scalar_affine(0.5, 0.5, 1.0).unwrap();
        assert!(estimate_gamma_geometric(&model, 1.0, 3, 10, &factory()).is_err());
    }

    #[test]
    fn annihilating_map_flags_degenerate() {
        let model = scalar_affine(0.0, 0.5, 1.0).unwrap();
        let fit = estimate_gamma_geometric(&model, 1.0, 6, 32, &factory()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.rho_hat, 0.0);
    }

    #[test]
    fn deterministic_scalar_lyapunov_is_exact() {
        let law = MatrixLaw::DeterministicScalar(0.5);
        let fit = estimate_lyapunov(&law, 1, Norm::Euclidean, 256, 8, &factory()).unwrap();
        assert!((fit.lambda_hat - 0.5_f64.ln()).abs() < 1e-10);
        assert!(fit.stderr < 1e-12);
    }

    #[test]
    fn scalar_two_point_lyapunov_matches_mean_log() {
        let law = MatrixLaw::ScalarLaw(ScalarDist::Discrete {
            values: vec![0.2, 0.8],
            probs: vec![0.5, 0.5],
        });
        let fit = estimate_lyapunov(&law, 1, Norm::Euclidean, 1000, 4000, &factory()).unwrap();
        let expect = 0.5 * (0.2_f64.ln() + 0.8_f64.ln()); // -0.916291
        assert!(
            (fit.lambda_hat - expect).abs() < 0.01,
            "lambda_hat = {}, expect = {}",
            fit.lambda_hat,
            expect
        );
    }

    #[test]
    fn benchmark_lyapunov_hits_half_log_two_thirds() {
        let model = benchmark_2d(0.5, 1.0, Norm::Euclidean).unwrap();
        let fit = estimate_lyapunov(
            &model.effective_matrix_law(),
            2,
            Norm::Euclidean,
            1000,
            4000,
            &factory(),
        )
        .unwrap();
        assert!(
            (fit.lambda_hat - HALF_LOG_2_3).abs() < 0.01,
            "lambda_hat = {}, expect = {}",
            fit.lambda_hat,
            HALF_LOG_2_3
        );
    }

    #[test]
    fn deterministic_scalar_kappa_is_exact() {
        let law = MatrixLaw::DeterministicScalar(0.5);
        let fit = estimate_kappa(&law, 1, Norm::Euclidean, 0.5, 64, 8, &factory()).unwrap();
        assert!((fit.kappa_hat - 0.5_f64.powf(0.5)).abs() < 1e-12);
        for &(_, v) in &fit.per_n {
            assert!((v - 0.5_f64.powf(0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_two_point_kappa_at_alpha_one_is_half() {
        let law = MatrixLaw::ScalarLaw(ScalarDist::Discrete {
            values: vec![0.2, 0.8],
            probs: vec![0.5, 0.5],
        });
        let fit = estimate_kappa(&law, 1, Norm::Euclidean, 1.0, 64, 20_000, &factory()).unwrap();
        assert!((fit.kappa_hat - 0.5).abs() < 0.02, "kappa_hat = {}", fit.kappa_hat);
    }

    #[test]
    fn benchmark_kappa_matches_exact_enumeration() {
        // For the diagonal benchmark the product is diagonal with
        // complementary binomial log-weights, so E ||P_n||^alpha has an
        // exact binomial-sum oracle.
        let alpha = 0.5;
        let exact_log_moment = |n: usize| -> f64 {
            let mut terms = Vec::with_capacity(n + 1);
            let l2 = 2.0_f64.ln();
            let l3 = (1.0_f64 / 3.0).ln();
            let mut log_binom = 0.0_f64; // log C(n, 0)
            for k in 0..=n {
                if k > 0 {
                    log_binom += ((n - k + 1) as f64).ln() - (k as f64).ln();
                }
                let p1 = k as f64 * l2 + (n - k) as f64 * l3;
                let p2 = (n - k) as f64 * l2 + k as f64 * l3;
                let log_norm = p1.max(p2);
                terms.push(log_binom - (n as f64) * 2.0_f64.ln() + alpha * log_norm);
            }
            log_sum_exp(&terms)
        };
        let model = benchmark_2d(alpha, 1.0, Norm::Euclidean).unwrap();
        let fit = estimate_kappa(
            &model.effective_matrix_law(),
            2,
            Norm::Euclidean,
            alpha,
            16,
            200_000,
            &factory(),
        )
        .unwrap();
        for &(k, v) in &fit.per_n {
            let exact = (exact_log_moment(k) / k as f64).exp();
            assert!(
                (v - exact).abs() < 0.02,
                "k = {k}: per_n = {v}, exact = {exact}"
            );
        }
        // kappa(1/2) = (sqrt(2) + 1/sqrt(3)) / 2 from the exact recursion.
        let exact_kappa = 0.5 * (2.0_f64.sqrt() + 3.0_f64.powf(-0.5));
        assert!(
            (fit.kappa_hat - exact_kappa).abs() < 0.02,
            "kappa_hat = {}, exact = {}",
            fit.kappa_hat,
            exact_kappa
        );
    }

    #[test]
    fn rotation_products_have_unit_kappa() {
        let th = 0.9_f64;
        let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let law = MatrixLaw::DiscreteSet(vec![(rot.clone(), 0.5), (rot.transpose(), 0.5)]);
        let fit = estimate_kappa(&law, 2, Norm::Euclidean, 1.0, 64, 64, &factory()).unwrap();
        assert!((fit.kappa_hat - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jensen_inequality_between_lambda_and_kappa() {
        let law = MatrixLaw::ScalarLaw(ScalarDist::Discrete {
            values: vec![0.2, 0.8],
            probs: vec![0.5, 0.5],
        });
        let alpha = 1.0;
        let lam = estimate_lyapunov(&law, 1, Norm::Euclidean, 512, 2000, &factory()).unwrap();
        let kap = estimate_kappa(&law, 1, Norm::Euclidean, alpha, 64, 20_000, &factory()).unwrap();
        assert!(lam.lambda_hat <= kap.kappa_hat.ln() / alpha + 3.0 * lam.stderr.max(1e-6));
    }

    #[test]
    fn fits_are_worker_count_invariant() {
        let model = benchmark_2d(0.5, 1.0, Norm::Euclidean).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                estimate_gamma_geometric(&model, 0.1, 8, 512, &factory())
                    .unwrap()
                    .rho_hat
            })
        };
        assert_eq!(run(1).to_bits(), run(4).to_bits());
    }
}
