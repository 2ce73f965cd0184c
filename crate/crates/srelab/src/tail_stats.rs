//! Tail statistics of stationary ensembles: tail index, tail constant,
//! empirical spherical measure, and the normalization sequence a_n.
//!
//! The radial estimators work on norm samples; the spherical estimator on
//! full ensembles. All thresholds count strict exceedances |X| > t.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampling::SampleEnsemble;

/// One threshold of the tail-constant grid.
#[derive(Debug, Clone, Serialize)]
pub struct TailGridPoint {
    pub t: f64,
    /// t^alpha times the exceedance fraction at t.
    pub value: f64,
    pub exceedances: usize,
}

/// Tail index and tail constant read off one ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct TailFit {
    pub alpha_hat: f64,
    /// Asymptotic standard error alpha_hat / sqrt(k).
    pub alpha_stderr: f64,
    pub k_used: usize,
    /// Tail index at which the constant was measured (the model's declared
    /// index in verification runs; alpha_hat in blind ones).
    pub c_alpha: f64,
    pub c_hat: f64,
    /// Binomial per-point errors propagated through the weighted mean;
    /// cross-threshold correlation ignored.
    pub c_stderr: f64,
    pub grid: Vec<TailGridPoint>,
    /// Max over min of the per-threshold values; near 1 when the tail is
    /// exactly a power law over the grid span.
    pub flatness: f64,
}

/// Empirical law of X/|X| conditional on |X| above a threshold.
#[derive(Debug, Clone)]
pub struct SphericalEmpirical {
    /// Unit directions with probability weights (sum 1); exact duplicate
    /// directions are merged.
    pub particles: Vec<(DVector<f64>, f64)>,
    pub threshold: f64,
    /// Exceedances behind the estimate.
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ANEntry {
    pub n: usize,
    pub a_n: f64,
}

/// Empirical normalization sequence a_n on an n-grid.
#[derive(Debug, Clone, Serialize)]
pub struct NormalizationSeq {
    pub entries: Vec<ANEntry>,
    pub method: &'static str,
}

fn check_positive(norms: &[f64]) -> Result<()> {
    if norms.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if norms.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParameter("norm samples must be positive and finite".into()));
    }
    Ok(())
}

fn sorted_descending(norms: &[f64]) -> Vec<f64> {
    let mut s = norms.to_vec();
    s.sort_unstable_by(|a, b| f64::total_cmp(b, a));
    s
}

/// Hill estimator on the top k order statistics:
/// alpha_hat = k / sum_{i<=k} log(X_(i) / X_(k+1)), X_(1) >= X_(2) >= ...
pub fn hill_estimator(norms: &[f64], k: usize) -> Result<f64> {
    check_positive(norms)?;
    if k < 2 || k >= norms.len() {
        return Err(Error::InvalidParameter(format!(
            "hill estimator needs 2 <= k < sample count (got k = {k}, count = {})",
            norms.len()
        )));
    }
    let s = sorted_descending(norms);
    let pivot = s[k];
    let denom: f64 = s[..k].iter().map(|x| (x / pivot).ln()).sum();
    if denom <= 0.0 {
        return Err(Error::DegenerateOrderStats(
            "top order statistics are tied; the Hill denominator vanishes".into(),
        ));
    }
    Ok(k as f64 / denom)
}

/// Default order-statistics count: floor(m^0.6), clamped to [2, m - 1].
pub fn default_hill_k(m: usize) -> usize {
    ((m as f64).powf(0.6).floor() as usize).clamp(2, m.saturating_sub(1).max(2))
}

fn exceedances_above(sorted_asc: &[f64], t: f64) -> usize {
    sorted_asc.len() - sorted_asc.partition_point(|v| *v <= t)
}

/// Per-threshold estimates of t^alpha P(|X| > t) and their
/// exceedance-count-weighted mean.
///
/// Each threshold must keep at least 50 exceedances; fewer make the
/// binomial noise exceed the structure being measured.
pub fn tail_constant(norms: &[f64], alpha: f64, t_grid: &[f64]) -> Result<(f64, f64, Vec<TailGridPoint>, f64)> {
    check_positive(norms)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter("tail index must be positive".into()));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidParameter("threshold grid must be positive and nonempty".into()));
    }
    let mut sorted = norms.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let m = sorted.len() as f64;

    let mut grid = Vec::with_capacity(t_grid.len());
    let mut ts = t_grid.to_vec();
    ts.sort_unstable_by(f64::total_cmp);
    for &t in &ts {
        let hits = exceedances_above(&sorted, t);
        if hits < 50 {
            return Err(Error::InsufficientExceedances {
                needed: 50,
                found: hits,
                threshold: t,
            });
        }
        grid.push(TailGridPoint {
            t,
            value: t.powf(alpha) * hits as f64 / m,
            exceedances: hits,
        });
    }

    let wsum: f64 = grid.iter().map(|g| g.exceedances as f64).sum();
    let c_hat = grid.iter().map(|g| g.exceedances as f64 * g.value).sum::<f64>() / wsum;
    let var: f64 = grid
        .iter()
        .map(|g| {
            let p = g.exceedances as f64 / m;
            let point_var = g.t.powf(2.0 * alpha) * p * (1.0 - p) / m;
            (g.exceedances as f64 / wsum).powi(2) * point_var
        })
        .sum();
    let lo = grid.iter().map(|g| g.value).fold(f64::INFINITY, f64::min);
    let hi = grid.iter().map(|g| g.value).fold(0.0_f64, f64::max);
    Ok((c_hat, var.sqrt(), grid, hi / lo))
}

/// Twelve geometric thresholds between the 99th percentile and the value
/// with 50 exceedances.
pub fn default_t_grid(norms: &[f64]) -> Result<Vec<f64>> {
    check_positive(norms)?;
    let m = norms.len();
    if m < 5_100 {
        return Err(Error::InsufficientExceedances {
            needed: 5_100,
            found: m,
            threshold: 0.0,
        });
    }
    let s = sorted_descending(norms);
    let t_lo = s[m / 100];
    let t_hi = s[50];
    if !(t_hi > t_lo * (1.0 + 1e-12)) {
        return Err(Error::DegenerateOrderStats(
            "upper tail is too flat to span a threshold grid".into(),
        ));
    }
    let ratio = t_hi / t_lo;
    Ok((0..12).map(|i| t_lo * ratio.powf(i as f64 / 11.0)).collect())
}

/// Hill fit plus tail constant on the default grid.
///
/// `c_alpha` is the index used for the constant: pass the model's declared
/// index when verifying theory, or the Hill estimate when working blind.
pub fn fit_tail(ensemble: &SampleEnsemble, c_alpha: f64, k: Option<usize>) -> Result<TailFit> {
    let norms = &ensemble.norms;
    let k_used = k.unwrap_or_else(|| default_hill_k(norms.len()));
    let alpha_hat = hill_estimator(norms, k_used)?;
    let grid = default_t_grid(norms)?;
    let (c_hat, c_stderr, grid, flatness) = tail_constant(norms, c_alpha, &grid)?;
    Ok(TailFit {
        alpha_hat,
        alpha_stderr: alpha_hat / (k_used as f64).sqrt(),
        k_used,
        c_alpha,
        c_hat,
        c_stderr,
        grid,
        flatness,
    })
}

/// Normalized empirical law of X/|X| over points with |X| > threshold.
/// Needs at least 100 exceedances.
pub fn spherical_empirical(ensemble: &SampleEnsemble, threshold: f64) -> Result<SphericalEmpirical> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidParameter("threshold must be positive and finite".into()));
    }
    let mut count = 0usize;
    // Bit-exact directions merge; BTreeMap keeps the atom order
    // deterministic.
    let mut atoms: std::collections::BTreeMap<Vec<u64>, (DVector<f64>, f64)> =
        std::collections::BTreeMap::new();
    for (p, &r) in ensemble.points.iter().zip(&ensemble.norms) {
        if r > threshold {
            count += 1;
            let dir = p / r;
            let key: Vec<u64> = dir.iter().map(|c| c.to_bits()).collect();
            atoms
                .entry(key)
                .and_modify(|(_, w)| *w += 1.0)
                .or_insert((dir, 1.0));
        }
    }
    if count < 100 {
        return Err(Error::InsufficientExceedances {
            needed: 100,
            found: count,
            threshold,
        });
    }
    let total = count as f64;
    let particles = atoms
        .into_values()
        .map(|(dir, w)| (dir, w / total))
        .collect();
    Ok(SphericalEmpirical {
        particles,
        threshold,
        count,
    })
}

/// Empirical (1 - 1/n)-quantile: the (floor(m/n) + 1)-th largest sample.
pub fn empirical_a_n(norms: &[f64], n: usize) -> Result<f64> {
    check_positive(norms)?;
    let m = norms.len();
    if n < 2 {
        return Err(Error::InvalidParameter("a_n needs n >= 2".into()));
    }
    if n > m / 10 {
        return Err(Error::InvalidParameter(format!(
            "a_n at n = {n} is unstable with only {m} samples (need n <= m / 10)"
        )));
    }
    let s = sorted_descending(norms);
    Ok(s[m / n])
}

/// a_n over an n-grid, one shared sort.
pub fn compute_a_n(norms: &[f64], n_grid: &[usize]) -> Result<NormalizationSeq> {
    check_positive(norms)?;
    if n_grid.is_empty() {
        return Err(Error::InvalidParameter("a_n grid is empty".into()));
    }
    let m = norms.len();
    let s = sorted_descending(norms);
    let mut ns = n_grid.to_vec();
    ns.sort_unstable();
    let mut entries = Vec::with_capacity(ns.len());
    for n in ns {
        if n < 2 {
            return Err(Error::InvalidParameter("a_n needs n >= 2".into()));
        }
        if n > m / 10 {
            return Err(Error::InvalidParameter(format!(
                "a_n at n = {n} is unstable with only {m} samples (need n <= m / 10)"
            )));
        }
        entries.push(ANEntry { n, a_n: s[m / n] });
    }
    Ok(NormalizationSeq {
        entries,
        method: "empirical_quantile",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeavyTailLaw, MatrixLaw, ModelKind, RadialLaw, RecursionModel, SphericalLaw, Coupling};
    use crate::linalg::Norm;
    use crate::rng::{Domain, StreamFactory};
    use crate::sampling::{stationary_ensemble, Direction, EnsembleMeta};

    fn synthetic_ensemble(norms: Vec<f64>) -> SampleEnsemble {
        let points = norms.iter().map(|&v| DVector::from_vec(vec![v])).collect();
        SampleEnsemble {
            points,
            norms,
            meta: EnsembleMeta {
                model_hash: "synthetic".into(),
                n: 0,
                burn_in: 0,
                seed: 0,
                direction: Direction::Backward,
            },
        }
    }

    fn pareto_sample(alpha: f64, m: usize, seed: u64) -> Vec<f64> {
        let law = RadialLaw::ExactPareto { scale: 1.0 };
        let mut rng = StreamFactory::new(seed).stream(Domain::Stationary, 0);
        (0..m).map(|_| law.sample(alpha, &mut rng)).collect()
    }

    #[test]
    fn hill_matches_the_hand_example() {
        let a = hill_estimator(&[8.0, 4.0, 2.0, 1.0], 2).unwrap();
        let expect = 2.0 / (3.0 * std::f64::consts::LN_2);
        assert!((a - expect).abs() < 1e-15, "got {a}, want {expect}");
    }

    #[test]
    fn hill_recovers_a_pareto_quantile_grid() {
        let n = 10_000;
        let norms: Vec<f64> = (1..=n).map(|i| n as f64 / i as f64).collect();
        let a = hill_estimator(&norms, n / 2).unwrap();
        assert!((a - 1.0).abs() < 0.03, "got {a}");
    }

    #[test]
    fn hill_is_scale_invariant() {
        let norms = pareto_sample(1.2, 4_000, 5);
        let a = hill_estimator(&norms, 200).unwrap();
        let scaled: Vec<f64> = norms.iter().map(|v| v * 7.3e5).collect();
        let b = hill_estimator(&scaled, 200).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn hill_rejects_bad_requests() {
        assert!(hill_estimator(&[1.0, 2.0, 3.0], 1).is_err());
        assert!(hill_estimator(&[1.0, 2.0, 3.0], 3).is_err());
        assert!(hill_estimator(&[1.0, -2.0, 3.0], 2).is_err());
        assert!(matches!(
            hill_estimator(&[5.0, 5.0, 5.0, 5.0], 2),
            Err(Error::DegenerateOrderStats(_))
        ));
    }

    #[test]
    fn tail_constant_is_flat_on_exact_pareto() {
        let norms = pareto_sample(1.0, 1_000_000, 11);
        let grid = default_t_grid(&norms).unwrap();
        let (c, _, points, flatness) = tail_constant(&norms, 1.0, &grid).unwrap();
        assert!((c - 1.0).abs() < 0.05, "c_hat = {c}");
        assert!(flatness <= 1.3, "flatness = {flatness}");
        assert_eq!(points.len(), 12);
        for p in &points {
            assert!(p.exceedances >= 50);
        }
    }

    #[test]
    fn tail_constant_refuses_starved_grids() {
        let norms = pareto_sample(1.0, 200, 3);
        match tail_constant(&norms, 1.0, &[1e9]) {
            Err(Error::InsufficientExceedances { needed: 50, .. }) => {}
            other => panic!("expected an exceedance refusal, got {other:?}"),
        }
    }

    #[test]
    fn fit_tail_reads_a_pareto_ensemble() {
        let e = synthetic_ensemble(pareto_sample(1.0, 200_000, 17));
        let fit = fit_tail(&e, 1.0, None).unwrap();
        assert!((fit.alpha_hat - 1.0).abs() < 0.05, "alpha_hat = {}", fit.alpha_hat);
        assert!((fit.c_hat - 1.0).abs() < 0.08, "c_hat = {}", fit.c_hat);
        assert_eq!(fit.k_used, default_hill_k(200_000));
        assert!(fit.flatness < 1.3);
    }

    #[test]
    fn spherical_collapses_to_one_atom_for_positive_chains() {
        let e = synthetic_ensemble(pareto_sample(1.0, 5_000, 23));
        let s = spherical_empirical(&e, 2.0).unwrap();
        assert_eq!(s.particles.len(), 1);
        let (dir, w) = &s.particles[0];
        assert_eq!(dir[0], 1.0);
        assert!((w - 1.0).abs() < 1e-12);
        assert!(s.count >= 100);
    }

    #[test]
    fn spherical_splits_evenly_for_a_symmetric_chain() {
        let plus = DVector::from_vec(vec![1.0]);
        let minus = DVector::from_vec(vec![-1.0]);
        let model = RecursionModel::new(
            ModelKind::Affine,
            1,
            Norm::Euclidean,
            MatrixLaw::DeterministicScalar(0.5),
            HeavyTailLaw::exact_pareto(
                1.5,
                1.0,
                SphericalLaw::Discrete(vec![(plus, 0.5), (minus, 0.5)]),
            )
            .unwrap(),
            None,
            Coupling::Independent,
        )
        .unwrap();
        let e = stationary_ensemble(&model, 50_000, 30, &StreamFactory::new(31)).unwrap();
        let mut s = e.norms.clone();
        s.sort_unstable_by(f64::total_cmp);
        let threshold = s[(s.len() as f64 * 0.9) as usize];
        let sph = spherical_empirical(&e, threshold).unwrap();
        assert_eq!(sph.particles.len(), 2);
        let total: f64 = sph.particles.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (dir, w) in &sph.particles {
            assert!((dir[0].abs() - 1.0).abs() < 1e-12);
            assert!((w - 0.5).abs() < 0.02, "weight at {} is {w}", dir[0]);
        }
    }

    #[test]
    fn spherical_refuses_a_threshold_above_the_sample() {
        let e = synthetic_ensemble(vec![1.0; 500]);
        assert!(matches!(
            spherical_empirical(&e, 10.0),
            Err(Error::InsufficientExceedances { found: 0, .. })
        ));
    }

    #[test]
    fn a_n_tracks_the_pareto_quantile() {
        let n1 = pareto_sample(1.0, 1_000_000, 41);
        for n in [100usize, 1000] {
            let a = empirical_a_n(&n1, n).unwrap();
            assert!((a / n as f64 - 1.0).abs() < 0.1, "alpha 1, n = {n}: a_n = {a}");
        }
        let n2 = pareto_sample(0.5, 1_000_000, 43);
        for n in [100usize, 1000] {
            let a = empirical_a_n(&n2, n).unwrap();
            let want = (n as f64).powi(2);
            assert!((a / want - 1.0).abs() < 0.2, "alpha 0.5, n = {n}: a_n = {a}");
        }
    }

    #[test]
    fn a_n_satisfies_the_defining_bracket() {
        let norms = pareto_sample(0.8, 1_000_000, 47);
        let m = norms.len() as f64;
        let mut sorted = norms.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        for n in [1_000usize, 10_000] {
            let a = empirical_a_n(&norms, n).unwrap();
            let frac = exceedances_above(&sorted, a) as f64 / m;
            let prod = n as f64 * frac;
            assert!((0.8..=1.25).contains(&prod), "n P(|X| > a_n) = {prod} at n = {n}");
        }
    }

    #[test]
    fn a_n_is_monotone_and_guards_stability() {
        let norms = pareto_sample(1.0, 10_000, 53);
        let seq = compute_a_n(&norms, &[10, 40, 160, 640]).unwrap();
        for w in seq.entries.windows(2) {
            assert!(w[1].a_n >= w[0].a_n);
        }
        assert!(compute_a_n(&norms, &[2_000]).is_err());
        assert!(empirical_a_n(&norms, 1_001).is_err());
    }

    #[test]
    fn random_scale_does_not_move_default_grid_flatness() {
        // The default grid spans the same order-statistic range after
        // scaling, so the constant scales by s^alpha and flatness stays.
        let norms = pareto_sample(1.3, 100_000, 59);
        let g1 = default_t_grid(&norms).unwrap();
        let (_, _, _, f1) = tail_constant(&norms, 1.3, &g1).unwrap();
        let s = 37.0;
        let scaled: Vec<f64> = norms.iter().map(|v| v * s).collect();
        let g2 = default_t_grid(&scaled).unwrap();
        let (_, _, _, f2) = tail_constant(&scaled, 1.3, &g2).unwrap();
        assert!((f1 - f2).abs() < 1e-9);
    }

    #[test]
    fn stationary_tail_constant_matches_the_series_value() {
        // Scalar affine, a = 0.5, alpha = 0.5: the stationary tail
        // constant is c_b / (1 - a^alpha) = 1 / (1 - 2^{-1/2}).
        let model = crate::model::scalar_affine(0.5, 0.5, 1.0).unwrap();
        let e = stationary_ensemble(&model, 200_000, 55, &StreamFactory::new(61)).unwrap();
        let grid = default_t_grid(&e.norms).unwrap();
        let (c, _, _, _) = tail_constant(&e.norms, 0.5, &grid).unwrap();
        let want = 1.0 / (1.0 - 0.5_f64.powf(0.5));
        assert!(
            (c / want - 1.0).abs() < 0.2,
            "c_hat = {c}, series value = {want}"
        );
    }

    #[test]
    fn exceedance_counts_use_strict_inequality() {
        let mut v = vec![1.0, 2.0, 3.0, 3.0, 4.0];
        v.sort_unstable_by(f64::total_cmp);
        assert_eq!(exceedances_above(&v, 3.0), 1);
        assert_eq!(exceedances_above(&v, 0.5), 5);
        assert_eq!(exceedances_above(&v, 4.0), 0);
    }
}
