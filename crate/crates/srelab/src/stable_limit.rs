//! Alpha-stable limit verification.
//!
//! For a contractive recursion with heavy-tailed inputs the normalized
//! partial sums S_n / a_n - d_n converge to an alpha-stable law. Its
//! characteristic function is exp(C_alpha(t v)) where the exponent is an
//! integral of (e^{i<v,x>} - 1) h_v(x), minus a regime-dependent
//! compensator, against the tail measure; h_v is the characteristic
//! function of the series W(x) built from the state-only map
//! Phi_bar(y) = Phi(A y, 0).
//!
//! The module samples truncated W-series, assembles a [`StableLimitSpec`]
//! holding one cached set of series draws per spherical particle, and
//! evaluates C_alpha by reducing every radial integral to closed-form
//! Levy integrals of the sampled inner products. One cache serves every
//! (t, v) pair because Phi_bar commutes with dilations, so
//! <v, W(r omega)> = r <v, W(omega)>.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::contraction::{estimate_kappa, estimate_lyapunov};
use crate::error::{Error, Result};
use crate::levy::{cosine_integral_constant, levy_exponential_integral, panelled_simpson};
use crate::linalg::Norm;
use crate::model::{MatrixLaw, ModelKind, RecursionModel};
use crate::rng::{pairwise_mean, pairwise_sum, Domain, StreamFactory};
use crate::sampling::{partial_sums, SampleEnsemble};
use crate::tail_measure::{apply_matrix_draw, ParticleMeasure, SupportKind};
use crate::tail_stats::hill_estimator;

/// Default truncation target for the series tail at unit inputs.
pub const DEFAULT_W_TOL: f64 = 1e-6;
/// Default ceiling on series terms. Near-critical contraction rates can
/// genuinely need thousands of terms; raise the cap rather than trusting
/// a bound the cap prevents from being met.
pub const DEFAULT_W_CAP: usize = 128;
/// Per-term norm growth beyond which the state-only iteration counts as
/// divergent at run time, relative to 1 + |x|.
const DIVERGENCE_GUARD: f64 = 1e9;
/// Euclidean unit tolerance for probe directions.
const UNIT_TOL: f64 = 1e-6;
/// A spherical integral below this fraction of the largest one on the
/// grid counts as vanishing.
const DEGENERACY_FLOOR: f64 = 1e-9;
/// Stream index reserved for the generic direction grid.
const DIRECTION_GRID_INDEX: u64 = (1 << 56) - 3;

fn check_unit(v: &DVector<f64>) -> Result<()> {
    if (v.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidParameter(format!(
            "probe direction must be Euclidean-unit (got norm {})",
            v.norm()
        )));
    }
    Ok(())
}

fn cis(theta: f64) -> Complex64 {
    Complex64::new(theta.cos(), theta.sin())
}

/// Truncated sampler for the series W(x) = sum_{k>=1} W_k^x, where
/// W_k^x iterates the state-only map W_k = Phi_bar(W_{k-1}) from
/// W_0 = x.
#[derive(Debug, Clone)]
pub struct WSampler {
    model: RecursionModel,
    law: MatrixLaw,
    /// Terms kept per draw.
    pub n_terms: usize,
    /// Geometric bound on the min(alpha,1)-moment of the discarded tail
    /// at |x| = 1, when a rate is available.
    pub tail_bound: Option<f64>,
    /// Per-term growth rate behind the bound.
    pub rate: Option<f64>,
    /// True when the rate is a closed-form moment rather than a Monte
    /// Carlo estimate.
    pub rate_exact: bool,
}

impl WSampler {
    /// Builds a sampler whose tail bound at |x| = 1 is below `tol`,
    /// using at most `cap` terms.
    ///
    /// The rate is the min(alpha,1)-moment of the coefficient matrices:
    /// exact for diagonal-type laws, otherwise estimated with headroom.
    /// Since |Phi(z, 0)| <= |z| coordinatewise for every built-in map,
    /// matrix moments bound the general series, not just the affine one.
    /// A rate at or above one falls back to the top Lyapunov exponent;
    /// when that is also nonnegative the series is refused.
    pub fn new(
        model: &RecursionModel,
        tol: f64,
        cap: usize,
        factory: &StreamFactory,
    ) -> Result<WSampler> {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "series tolerance must be positive (got {tol})"
            )));
        }
        if cap == 0 {
            return Err(Error::InvalidParameter("series term cap must be at least 1".into()));
        }
        let law = model.effective_matrix_law();
        let p = model.alpha().min(1.0);
        let (mut rate, mut rate_exact) = match law.diagonal_growth_moment(p) {
            Some(r) => (r, true),
            None => {
                let fit = estimate_kappa(&law, model.dim, model.norm, p, 32, 4000, factory)?;
                // estimated rates get headroom so sampling noise is less
                // likely to understate the tail
                let r = fit.kappa_hat;
                ((1.05 * r).min(0.5 * (1.0 + r)), false)
            }
        };
        if rate >= 1.0 {
            // the moment route says nothing; almost-sure geometry decides
            let fit = estimate_lyapunov(&law, model.dim, model.norm, 128, 400, factory)?;
            if fit.lambda_hat >= -1e-3 {
                return Err(Error::ContractivityPrecheck(format!(
                    "moment rate {rate:.4} at order {p} and Lyapunov estimate {:.4} \
                     show no contraction; the series W(x) cannot be truncated",
                    fit.lambda_hat
                )));
            }
            rate = fit.lambda_hat.exp();
            rate_exact = false;
        }
        let mut n_terms = 1;
        let mut bound = tail_geometric_bound(rate, n_terms);
        while bound >= tol && n_terms < cap {
            n_terms += 1;
            bound = tail_geometric_bound(rate, n_terms);
        }
        if bound >= tol {
            return Err(Error::ContractivityPrecheck(format!(
                "rate {rate:.6} needs more than {cap} terms to push the series tail \
                 bound below {tol:.1e} (reached {bound:.3e}); raise the term cap"
            )));
        }
        Ok(WSampler {
            model: model.clone(),
            law,
            n_terms,
            tail_bound: Some(bound),
            rate: Some(rate),
            rate_exact,
        })
    }

    /// Fixed-length sampler for diagnostics and enumeration oracles.
    /// The bound is only reported when a closed-form rate exists.
    pub fn with_n_terms(model: &RecursionModel, n_terms: usize) -> Result<WSampler> {
        if n_terms == 0 {
            return Err(Error::InvalidParameter("series needs at least one term".into()));
        }
        let law = model.effective_matrix_law();
        let p = model.alpha().min(1.0);
        let (rate, tail_bound, rate_exact) = match law.diagonal_growth_moment(p) {
            Some(r) if r < 1.0 => (Some(r), Some(tail_geometric_bound(r, n_terms)), true),
            Some(r) => (Some(r), None, true),
            None => (None, None, false),
        };
        Ok(WSampler {
            model: model.clone(),
            law,
            n_terms,
            tail_bound,
            rate,
            rate_exact,
        })
    }

    pub fn law(&self) -> &MatrixLaw {
        &self.law
    }

    pub fn model(&self) -> &RecursionModel {
        &self.model
    }

    /// Sampler over the transposed coefficient law, for the adjoint
    /// fixed point behind the nondegeneracy check. Defined only when the
    /// state-only map is linear.
    pub fn adjoint(&self) -> Result<WSampler> {
        match self.model.kind {
            ModelKind::Affine | ModelKind::AffinePerturbed => {}
            _ => {
                return Err(Error::Unsupported(
                    "the state-only map is not linear, so the adjoint series is undefined \
                     and nondegeneracy stays unverified for this recursion"
                        .into(),
                ))
            }
        }
        Ok(WSampler {
            model: self.model.clone(),
            law: self.law.transposed(),
            n_terms: self.n_terms,
            tail_bound: self.tail_bound,
            rate: self.rate,
            rate_exact: self.rate_exact,
        })
    }

    /// One draw of the truncated series from starting point `x`.
    ///
    /// Iterates y <- Phi(A y, 0) and accumulates the iterates. A term
    /// whose norm exceeds [`DIVERGENCE_GUARD`] times 1 + |x| aborts the
    /// draw: the rate precheck can be fooled by custom maps, so growth
    /// is also policed where it would actually happen.
    pub fn sample_w<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if x.len() != self.model.dim {
            return Err(Error::DimensionMismatch(format!(
                "series start has length {}, model dimension is {}",
                x.len(),
                self.model.dim
            )));
        }
        let guard = DIVERGENCE_GUARD * (1.0 + self.model.norm.vec(x));
        let mut y = x.clone();
        let mut z = DVector::zeros(x.len());
        let mut acc = DVector::zeros(x.len());
        for k in 1..=self.n_terms {
            let draw = self.law.draw(rng);
            apply_matrix_draw(&self.law, &draw, &y, &mut z);
            y = self.model.phi_state_only(&z);
            acc += &y;
            let yn = self.model.norm.vec(&y);
            if !yn.is_finite() || yn > guard {
                return Err(Error::ContractivityPrecheck(format!(
                    "series term {k} reached norm {yn:.3e} from |x| = {:.3e}; the \
                     state-only iteration diverges",
                    self.model.norm.vec(x)
                )));
            }
        }
        Ok(acc)
    }
}

/// p-th moment bound on the discarded series tail: sum_{k > n} r^k.
fn tail_geometric_bound(rate: f64, n_terms: usize) -> f64 {
    if rate == 0.0 {
        return 0.0;
    }
    rate.powi(n_terms as i32 + 1) / (1.0 - rate)
}

/// Monte Carlo estimate of h_v(x) = E exp(i <v, W(x)>).
///
/// The modulus never exceeds one; x = 0 returns exactly 1 because every
/// built-in map fixes the origin.
pub fn estimate_h_v<R: Rng + ?Sized>(
    sampler: &WSampler,
    v: &DVector<f64>,
    x: &DVector<f64>,
    mc: usize,
    rng: &mut R,
) -> Result<Complex64> {
    if mc == 0 {
        return Err(Error::InvalidParameter("h_v estimation needs at least one draw".into()));
    }
    if v.len() != x.len() {
        return Err(Error::DimensionMismatch("direction and start length differ".into()));
    }
    let mut re = Vec::with_capacity(mc);
    let mut im = Vec::with_capacity(mc);
    for _ in 0..mc {
        let w = sampler.sample_w(x, rng)?;
        let theta = v.dot(&w);
        re.push(theta.cos());
        im.push(theta.sin());
    }
    Ok(Complex64::new(pairwise_mean(&re), pairwise_mean(&im)))
}

/// Settings for assembling a [`StableLimitSpec`].
#[derive(Debug, Clone)]
pub struct SpecOptions {
    /// Truncation target for the series sampler at unit inputs.
    pub w_tol: f64,
    /// Ceiling on series terms. Near-critical models (rate just under
    /// one) need this raised far beyond the default.
    pub w_cap: usize,
    /// Cached series draws per spherical particle; collapses to one
    /// when the coefficient law is deterministic.
    pub draws_per_particle: usize,
}

impl Default for SpecOptions {
    fn default() -> Self {
        SpecOptions {
            w_tol: DEFAULT_W_TOL,
            w_cap: DEFAULT_W_CAP,
            draws_per_particle: 32,
        }
    }
}

/// Everything the limiting exponent needs: tail constant, spherical
/// measure, regime descriptors, and one cached set of series draws per
/// particle.
#[derive(Debug, Clone)]
pub struct StableLimitSpec {
    pub alpha: f64,
    /// Tail constant: total mass of the spherical measure.
    pub c: f64,
    /// Stationary mean; present exactly when alpha > 1.
    pub m: Option<DVector<f64>>,
    /// First moment of the spherical measure, unnormalized. Its norm is
    /// at most the total mass.
    pub m_sigma: DVector<f64>,
    pub lambda1: ParticleMeasure,
    pub w: WSampler,
    /// draws[i][s] is one W(omega_i); indexed like the particle list.
    w_draws: Vec<Vec<DVector<f64>>>,
}

impl StableLimitSpec {
    /// Assembles the spec from a spherical particle measure.
    ///
    /// Series draws are cached here, once per particle, on the particle's
    /// own stream; every later exponent evaluation reuses them. That one
    /// cache serves all radii and all (t, v) pairs, which is what makes a
    /// dense characteristic-function grid affordable.
    pub fn new(
        model: &RecursionModel,
        lambda1: ParticleMeasure,
        stationary_mean: Option<DVector<f64>>,
        opts: &SpecOptions,
        factory: &StreamFactory,
    ) -> Result<StableLimitSpec> {
        let alpha = model.alpha();
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::Unsupported(format!(
                "tail index {alpha} is outside (0, 2); the stable regime ends at two"
            )));
        }
        if !matches!(lambda1.support, SupportKind::Sphere) {
            return Err(Error::InvalidParameter(
                "the limit spec needs a spherical particle measure".into(),
            ));
        }
        lambda1.check_support()?;
        if lambda1.is_empty() {
            return Err(Error::InvalidParameter("spherical measure has no particles".into()));
        }
        if (lambda1.alpha - alpha).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "measure index {} does not match model index {alpha}",
                lambda1.alpha
            )));
        }
        if lambda1.particles[0].0.len() != model.dim {
            return Err(Error::DimensionMismatch("particle and model dimension differ".into()));
        }
        let c = lambda1.total_mass();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tail constant must be positive and finite (got {c})"
            )));
        }
        match (&stationary_mean, alpha > 1.0) {
            (None, true) => {
                return Err(Error::InvalidParameter(
                    "a stationary mean vector is required above tail index one".into(),
                ))
            }
            (Some(_), false) => {
                return Err(Error::InvalidParameter(
                    "a mean vector is only meaningful above tail index one".into(),
                ))
            }
            (Some(m), true) if m.len() != model.dim => {
                return Err(Error::DimensionMismatch("mean vector length".into()))
            }
            _ => {}
        }
        let dim = model.dim;
        let mut m_sigma = DVector::zeros(dim);
        let mut col = vec![0.0; lambda1.len()];
        for cidx in 0..dim {
            for (j, (omega, weight)) in lambda1.particles.iter().enumerate() {
                col[j] = weight * omega[cidx];
            }
            m_sigma[cidx] = pairwise_sum(&col);
        }
        let w = WSampler::new(model, opts.w_tol, opts.w_cap, factory)?;
        let draws = if w.law().is_deterministic() {
            1
        } else {
            opts.draws_per_particle.max(1)
        };
        let w_draws = lambda1
            .particles
            .par_iter()
            .enumerate()
            .map(|(i, (omega, _))| {
                let mut rng = factory.stream(Domain::WSampler, i as u64);
                (0..draws).map(|_| w.sample_w(omega, &mut rng)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StableLimitSpec {
            alpha,
            c,
            m: stationary_mean,
            m_sigma,
            lambda1,
            w,
            w_draws,
        })
    }

    pub fn draws_per_particle(&self) -> usize {
        self.w_draws.first().map_or(0, Vec::len)
    }
}

/// The exponent at t = 1: (1/c) * sum_i w_i * mean_s [L(b_i + u_is) - L(u_is)]
/// with b_i = <v, omega_i>, u_is = <v, W_s(omega_i)>, and L the closed
/// Levy radial integral of the regime.
///
/// The reduction is exact: expanding (e^{i r b} - 1) e^{i r u} and the
/// regime compensator over the radial kernel leaves a difference of two
/// Levy integrals because the compensators of the two arguments cancel
/// against the subtracted one.
fn unit_exponent(spec: &StableLimitSpec, v: &DVector<f64>) -> Complex64 {
    let alpha = spec.alpha;
    let mut re = Vec::with_capacity(spec.lambda1.len());
    let mut im = Vec::with_capacity(spec.lambda1.len());
    for (i, (omega, weight)) in spec.lambda1.particles.iter().enumerate() {
        let b = v.dot(omega);
        let draws = &spec.w_draws[i];
        let mut dre = Vec::with_capacity(draws.len());
        let mut dim_ = Vec::with_capacity(draws.len());
        for w in draws {
            let u = v.dot(w);
            let z = levy_exponential_integral(alpha, b + u) - levy_exponential_integral(alpha, u);
            dre.push(z.re);
            dim_.push(z.im);
        }
        re.push(weight * pairwise_mean(&dre));
        im.push(weight * pairwise_mean(&dim_));
    }
    Complex64::new(pairwise_sum(&re), pairwise_sum(&im)) / spec.c
}

/// The limiting characteristic exponent C_alpha(t v) for t > 0 and a
/// Euclidean-unit direction v.
///
/// The t-dependence is factored analytically: t^alpha times the unit
/// value, plus for alpha = 1 the extra term
/// -i t log t <v, m_sigma> / c. The scaling identities therefore hold to
/// rounding, not to quadrature error.
pub fn compute_c_alpha(spec: &StableLimitSpec, t: f64, v: &DVector<f64>) -> Result<Complex64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale t must be positive (got {t})")));
    }
    if v.len() != spec.m_sigma.len() {
        return Err(Error::DimensionMismatch("direction length".into()));
    }
    check_unit(v)?;
    let unit = unit_exponent(spec, v);
    let mut out = unit * t.powf(spec.alpha);
    if spec.alpha == 1.0 {
        out -= Complex64::i() * (t * t.ln() * v.dot(&spec.m_sigma) / spec.c);
    }
    if !out.re.is_finite() || !out.im.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            context: "limiting exponent".into(),
        });
    }
    Ok(out)
}

/// Plug-in xi(t) = mean of t x / (1 + |t x|^2) over the ensemble, with
/// |.| the model norm the ensemble was recorded in.
fn xi_plugin(ensemble: &SampleEnsemble, t: f64) -> DVector<f64> {
    let d = ensemble.points[0].len();
    let m = ensemble.len();
    let mut out = DVector::zeros(d);
    let mut col = vec![0.0; m];
    for cidx in 0..d {
        for (j, x) in ensemble.points.iter().enumerate() {
            let u = t * ensemble.norms[j];
            col[j] = t * x[cidx] / (1.0 + u * u);
        }
        out[cidx] = pairwise_mean(&col);
    }
    out
}

/// Regime-dependent centering d_n: zero below index one, n xi(1/a_n) at
/// one, (n / a_n) times the ensemble mean above one.
///
/// Above one, a fitted tail index at or below one triggers a stderr
/// warning: the mean being centered on may not stabilize.
pub fn centering(
    alpha: f64,
    ensemble: &SampleEnsemble,
    a_n: f64,
    n: usize,
) -> Result<DVector<f64>> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !(a_n > 0.0 && a_n.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "normalization a_n must be positive (got {a_n})"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("centering needs n >= 1".into()));
    }
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "centering is defined for tail index in (0, 2) (got {alpha})"
        )));
    }
    let d = ensemble.points[0].len();
    if alpha < 1.0 {
        return Ok(DVector::zeros(d));
    }
    if alpha == 1.0 {
        return Ok(xi_plugin(ensemble, 1.0 / a_n) * n as f64);
    }
    let k = (ensemble.len() / 10).max(2);
    if k + 1 < ensemble.len() {
        if let Ok(alpha_hat) = hill_estimator(&ensemble.norms, k) {
            if alpha_hat <= 1.05 {
                eprintln!(
                    "warning: centering assumes tail index {alpha} > 1 but the fitted \
                     index is {alpha_hat:.3}; the ensemble mean may not stabilize"
                );
            }
        }
    }
    let mut mean = DVector::zeros(d);
    let mut col = vec![0.0; ensemble.len()];
    for cidx in 0..d {
        for (j, x) in ensemble.points.iter().enumerate() {
            col[j] = x[cidx];
        }
        mean[cidx] = pairwise_mean(&col);
    }
    Ok(mean * (n as f64 / a_n))
}

#[derive(Debug, Clone, Serialize)]
pub struct XiPoint {
    pub t: f64,
    pub xi_abs: f64,
    pub ratio: f64,
}

/// Fitted growth certificate for the plug-in xi.
#[derive(Debug, Clone, Serialize)]
pub struct XiBoundReport {
    pub delta: f64,
    /// Smallest constant with |xi(t)| <= C t^delta across the grid.
    pub fitted_c: f64,
    pub worst_t: f64,
    /// |xi(1)| in the model norm; the integrand bound |u|/(1+|u|^2) <= 1/2
    /// caps this at one half.
    pub xi_at_one: f64,
    pub points: Vec<XiPoint>,
}

/// Diagnostic for the index-one centering: checks |xi(t)| <= C t^delta on
/// a grid and reports the fitted constant.
pub fn xi_bound_check(
    ensemble: &SampleEnsemble,
    norm: Norm,
    delta: f64,
    t_grid: &[f64],
) -> Result<XiBoundReport> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must be in (0, 1) (got {delta})")));
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidParameter("xi bound check needs a nonempty grid".into()));
    }
    let mut points = Vec::with_capacity(t_grid.len());
    let mut fitted_c = 0.0_f64;
    let mut worst_t = t_grid[0];
    for &t in t_grid {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "xi bound grid points must be positive (got {t})"
            )));
        }
        let xi_abs = norm.vec(&xi_plugin(ensemble, t));
        let ratio = xi_abs / t.powf(delta);
        if ratio > fitted_c {
            fitted_c = ratio;
            worst_t = t;
        }
        points.push(XiPoint { t, xi_abs, ratio });
    }
    let xi_at_one = norm.vec(&xi_plugin(ensemble, 1.0));
    Ok(XiBoundReport {
        delta,
        fitted_c,
        worst_t,
        xi_at_one,
        points,
    })
}

/// One comparison point: theoretical versus empirical characteristic
/// function at scale t and direction v.
#[derive(Debug, Clone, Serialize)]
pub struct CFRow {
    pub t: f64,
    pub v: Vec<f64>,
    pub theory_re: f64,
    pub theory_im: f64,
    pub empirical_re: f64,
    pub empirical_im: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CFGrid {
    pub rows: Vec<CFRow>,
    pub n: usize,
    pub trials: usize,
    pub a_n: f64,
}

/// Empirical characteristic function of a_n^{-1} S_n - d_n over fresh
/// trials, paired with the theoretical exp(C_alpha(t v)).
///
/// `a_n` must come from the empirical normalization table, never from a
/// closed form, so the comparison exercises the whole pipeline. At t = 0
/// both columns are exactly one.
#[allow(clippy::too_many_arguments)]
pub fn empirical_cf(
    model: &RecursionModel,
    spec: &StableLimitSpec,
    n: usize,
    trials: usize,
    a_n: f64,
    d_n: &DVector<f64>,
    grid: &[(f64, DVector<f64>)],
    factory: &StreamFactory,
) -> Result<CFGrid> {
    if trials < 1000 {
        return Err(Error::InvalidParameter(format!(
            "the empirical characteristic function needs at least 1000 trials (got {trials})"
        )));
    }
    if !(a_n > 0.0 && a_n.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "normalization a_n must be positive (got {a_n})"
        )));
    }
    if d_n.len() != model.dim {
        return Err(Error::DimensionMismatch("centering vector length".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("characteristic function grid is empty".into()));
    }
    if (spec.alpha - model.alpha()).abs() > 1e-9 {
        return Err(Error::InvalidParameter(
            "spec and model disagree on the tail index".into(),
        ));
    }
    let x0 = DVector::zeros(model.dim);
    let batch = partial_sums(model, &x0, n, trials, factory)?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut re = vec![0.0; trials];
    let mut im = vec![0.0; trials];
    for (t, v) in grid {
        if !(*t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid scales must be nonnegative (got {t})"
            )));
        }
        if v.len() != model.dim {
            return Err(Error::DimensionMismatch("grid direction length".into()));
        }
        check_unit(v)?;
        let theory = if *t == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            compute_c_alpha(spec, *t, v)?.exp()
        };
        let vd = v.dot(d_n);
        for (j, s) in batch.sums.iter().enumerate() {
            let theta = t * (v.dot(s) / a_n - vd);
            re[j] = theta.cos();
            im[j] = theta.sin();
        }
        let empirical = Complex64::new(pairwise_mean(&re), pairwise_mean(&im));
        if !theory.re.is_finite()
            || !theory.im.is_finite()
            || !empirical.re.is_finite()
            || !empirical.im.is_finite()
        {
            return Err(Error::NonFinite {
                step: 0,
                context: format!("characteristic function at t = {t}"),
            });
        }
        rows.push(CFRow {
            t: *t,
            v: v.iter().cloned().collect(),
            theory_re: theory.re,
            theory_im: theory.im,
            empirical_re: empirical.re,
            empirical_im: empirical.im,
            abs_diff: (theory - empirical).norm(),
        });
    }
    Ok(CFGrid {
        rows,
        n,
        trials,
        a_n,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NondegeneracyEntry {
    pub direction: Vec<f64>,
    /// Integral of E |<W_v, omega>|^alpha against the first-term
    /// spherical measure.
    pub spherical_integral: f64,
    /// Cosine constant times the integral; strictly negative exactly
    /// when the integral is positive.
    pub re_c_alpha: f64,
}

/// Strict-negativity certificate for the real part of the limiting
/// exponent, one entry per probe direction.
#[derive(Debug, Clone, Serialize)]
pub struct NondegeneracyReport {
    pub alpha: f64,
    /// Closed-form radial cosine integral; negative throughout (0, 2).
    pub cosine_constant: f64,
    pub entries: Vec<NondegeneracyEntry>,
    pub min_integral: f64,
    pub max_integral: f64,
    pub all_strictly_negative: bool,
    /// First probe direction whose integral vanished, if any; the limit
    /// law then degenerates on the hyperplane orthogonal to it.
    pub degenerate_direction: Option<Vec<f64>>,
}

/// Lower-bound functional for |Re C_alpha(v)| on a grid of directions.
///
/// W_v solves the adjoint fixed point W_v = A* W_v + v in law; drawing it
/// by folding v through transposed coefficient draws and integrating
/// |<W_v, omega>|^alpha against the first-term spherical measure gives
/// Re C_alpha(v) up to the positive factor 1/c. The sign is therefore
/// exact even when the integral itself is Monte Carlo noisy: the
/// integrand is nonnegative, so only true degeneracy produces zero.
pub fn nondegeneracy(
    model: &RecursionModel,
    gamma1: &ParticleMeasure,
    adjoint: &WSampler,
    v_grid: &[DVector<f64>],
    mc: usize,
    factory: &StreamFactory,
) -> Result<NondegeneracyReport> {
    match model.kind {
        ModelKind::Affine | ModelKind::AffinePerturbed => {}
        _ => {
            return Err(Error::Unsupported(
                "the state-only map is not linear, so the adjoint series is undefined \
                 and nondegeneracy stays unverified for this recursion"
                    .into(),
            ))
        }
    }
    let alpha = model.alpha();
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::Unsupported(format!(
            "tail index {alpha} is outside (0, 2); the stable regime ends at two"
        )));
    }
    if !matches!(gamma1.support, SupportKind::Sphere) || gamma1.is_empty() {
        return Err(Error::InvalidParameter(
            "nondegeneracy needs a nonempty spherical first-term measure".into(),
        ));
    }
    if (gamma1.alpha - alpha).abs() > 1e-9 {
        return Err(Error::InvalidParameter(
            "first-term measure and model disagree on the tail index".into(),
        ));
    }
    if v_grid.is_empty() {
        return Err(Error::InvalidParameter("nondegeneracy needs probe directions".into()));
    }
    for v in v_grid {
        if v.len() != model.dim {
            return Err(Error::DimensionMismatch("probe direction length".into()));
        }
        check_unit(v)?;
    }
    if mc == 0 {
        return Err(Error::InvalidParameter("nondegeneracy needs at least one draw".into()));
    }
    let law = adjoint.law();
    let draws = if law.is_deterministic() { 1 } else { mc };
    let cosine_constant = cosine_integral_constant(alpha);
    let entries: Vec<NondegeneracyEntry> = v_grid
        .par_iter()
        .enumerate()
        .map(|(iv, v)| {
            let mut rng = factory.stream(Domain::Nondegeneracy, iv as u64);
            let mut z = DVector::zeros(model.dim);
            let mut per_draw = Vec::with_capacity(draws);
            let mut wcol = vec![0.0; gamma1.len()];
            for _ in 0..draws {
                let mut w = v.clone();
                for _ in 0..adjoint.n_terms {
                    let draw = law.draw(&mut rng);
                    apply_matrix_draw(law, &draw, &w, &mut z);
                    w = &z + v;
                }
                for (j, (omega, weight)) in gamma1.particles.iter().enumerate() {
                    wcol[j] = weight * w.dot(omega).abs().powf(alpha);
                }
                per_draw.push(pairwise_sum(&wcol));
            }
            let spherical_integral = pairwise_mean(&per_draw);
            NondegeneracyEntry {
                direction: v.iter().cloned().collect(),
                spherical_integral,
                re_c_alpha: cosine_constant * spherical_integral,
            }
        })
        .collect();
    for e in &entries {
        if !e.spherical_integral.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                context: "nondegeneracy spherical integral".into(),
            });
        }
    }
    let min_integral = entries.iter().map(|e| e.spherical_integral).fold(f64::INFINITY, f64::min);
    let max_integral = entries.iter().map(|e| e.spherical_integral).fold(0.0_f64, f64::max);
    let floor = DEGENERACY_FLOOR * (1.0 + max_integral);
    let degenerate_direction = entries
        .iter()
        .find(|e| e.spherical_integral <= floor)
        .map(|e| e.direction.clone());
    Ok(NondegeneracyReport {
        alpha,
        cosine_constant,
        entries,
        min_integral,
        max_integral,
        all_strictly_negative: degenerate_direction.is_none(),
        degenerate_direction,
    })
}

/// Deterministic spread of Euclidean-unit probe directions: both signs
/// in one dimension, equal angles in two, a fixed-stream spherical
/// sample in higher dimension.
pub fn direction_grid(dim: usize, count: usize, factory: &StreamFactory) -> Result<Vec<DVector<f64>>> {
    if dim == 0 || count == 0 {
        return Err(Error::InvalidParameter("direction grid needs dim >= 1, count >= 1".into()));
    }
    match dim {
        1 => {
            let signs = [1.0, -1.0];
            Ok(signs[..count.min(2)]
                .iter()
                .map(|&s| DVector::from_vec(vec![s]))
                .collect())
        }
        2 => Ok((0..count)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / count as f64;
                DVector::from_vec(vec![angle.cos(), angle.sin()])
            })
            .collect()),
        _ => {
            let mut rng = factory.stream(Domain::Nondegeneracy, DIRECTION_GRID_INDEX);
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let v = DVector::from_fn(dim, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let n = v.norm();
                if n > 1e-12 {
                    out.push(v / n);
                }
            }
            Ok(out)
        }
    }
}

/// Three-term tail of an oscillatory power integral:
/// int_hi^inf x^{-s} e^{i c x} dx by repeated integration by parts.
/// The remainder is O(s^3 hi^{-s-2} / |c|^3).
fn oscillatory_tail(s: f64, c: f64, hi: f64) -> Complex64 {
    debug_assert!(c != 0.0);
    let ic = Complex64::new(0.0, c);
    let e = Complex64::new(0.0, c * hi).exp();
    let h1 = hi.powf(-s);
    let t1 = h1 / ic;
    let t2 = s * (h1 / hi) / (ic * ic);
    let t3 = s * (s + 1.0) * (h1 / (hi * hi)) / (ic * ic * ic);
    -e * (t1 + t2 + t3)
}

/// Linear-step nodes through the oscillatory range, geometric before it.
fn oscillation_nodes(lo: f64, hi: f64, freq: f64) -> Vec<f64> {
    let mut nodes = vec![lo];
    let mut x = lo;
    let turn = (1.0 / freq).min(hi);
    while x < turn {
        x = (x * 1.5).min(turn);
        nodes.push(x);
    }
    let step = 0.5 / freq;
    while x < hi {
        x = (x + step).min(hi);
        nodes.push(x);
    }
    nodes
}

/// Independent reference value of the limiting exponent for the
/// deterministic scalar recursion x -> a x + input.
///
/// Here the spherical measure is one atom at +1 and the series value is
/// W = a / (1 - a) exactly, so C_alpha(t v) reduces to one radial
/// integral. It is evaluated by direct Simpson quadrature on
/// period-resolving panels with closed-form corrections below 1e-8 and
/// above 1e4, without touching the Levy closed forms the fast path uses.
/// Intended as an oracle for [`compute_c_alpha`].
pub fn scalar_cf_quadrature_reference(a: f64, alpha: f64, t: f64, v: f64) -> Result<Complex64> {
    if !(0.0..1.0).contains(&a) {
        return Err(Error::InvalidParameter(format!(
            "the scalar reference needs a in [0, 1) (got {a})"
        )));
    }
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "the scalar reference needs a tail index in (0, 2) (got {alpha})"
        )));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale t must be positive (got {t})")));
    }
    if (v.abs() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "the scalar direction must be +1 or -1 (got {v})"
        )));
    }
    // frequencies of the two complex exponentials in the integrand
    let c1 = v / (1.0 - a);
    let c2 = v * a / (1.0 - a);
    let lo = 1e-8;
    let hi = 1e4;
    let s = 1.0 + alpha;
    let nodes = oscillation_nodes(lo, hi, c1.abs().max(1.0));
    let d2 = 0.5 * (c1 * c1 - c2 * c2);
    let d3 = (c1 * c1 * c1 - c2 * c2 * c2) / 6.0;
    let unit = if alpha < 1.0 {
        let f = |x: f64| (cis(c1 * x) - cis(c2 * x)) * (alpha * x.powf(-s));
        let head = Complex64::new(
            -alpha * d2 * lo.powf(2.0 - alpha) / (2.0 - alpha),
            alpha * v * lo.powf(1.0 - alpha) / (1.0 - alpha),
        );
        let tail = (oscillatory_tail(s, c1, hi) - oscillatory_tail(s, c2, hi)) * alpha;
        panelled_simpson(&f, &nodes, 1e-10) + head + tail
    } else if alpha == 1.0 {
        let f = |x: f64| {
            (cis(c1 * x) - cis(c2 * x) - Complex64::new(0.0, v * x / (1.0 + x * x))) / (x * x)
        };
        let head = Complex64::new(-d2 * lo, 0.0);
        let tail = oscillatory_tail(2.0, c1, hi) - oscillatory_tail(2.0, c2, hi)
            - Complex64::new(0.0, v * 0.5 * (1.0 + 1.0 / (hi * hi)).ln());
        panelled_simpson(&f, &nodes, 1e-10) + head + tail
    } else {
        let f = |x: f64| {
            (cis(c1 * x) - cis(c2 * x) - Complex64::new(0.0, v * x)) * (alpha * x.powf(-s))
        };
        let head = Complex64::new(
            -alpha * d2 * lo.powf(2.0 - alpha) / (2.0 - alpha),
            -alpha * d3 * lo.powf(3.0 - alpha) / (3.0 - alpha),
        );
        let tail = (oscillatory_tail(s, c1, hi) - oscillatory_tail(s, c2, hi)) * alpha
            - Complex64::new(0.0, v * alpha * hi.powf(1.0 - alpha) / (alpha - 1.0));
        panelled_simpson(&f, &nodes, 1e-10) + head + tail
    };
    let out = if alpha == 1.0 {
        unit * t - Complex64::new(0.0, t * t.ln() * v)
    } else {
        unit * t.powf(alpha)
    };
    if !out.re.is_finite() || !out.im.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            context: "scalar quadrature reference".into(),
        });
    }
    Ok(out)
}
