//! Particle representation of the stationary tail measure.
//!
//! The tail measure is built as a series of spherical terms: the first
//! term is the tail measure of Phi(0, B1), and each further term is the
//! previous one pushed through an independent matrix draw, with weights
//! scaled by |A omega|^alpha. Particles keep every integral a finite sum
//! and make homogeneity in the radial variable exact by construction.
//!
//! Weight convention: a spherical particle set with weights w_i
//! represents the measure whose ball exceedance is
//! <1_{|x|>r}, Lambda> = sum_i w_i r^{-alpha}; the total weight is the
//! tail constant.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::contraction::estimate_kappa;
use crate::error::{Error, Result};
use crate::linalg::Norm;
use crate::model::{MatrixDraw, MatrixLaw, RecursionModel};
use crate::rng::{pairwise_sum, Domain, StreamFactory};

const SPHERE_TOL: f64 = 1e-12;
/// Exact push-forward enumeration is used up to this many branches.
const ENUM_BRANCH_BUDGET: usize = 1_000_000;
/// Terms allowed when searching for a tolerance.
const TOL_TERM_CAP: usize = 512;
const ORBIT_PROBES: usize = 48;
const ORBIT_TOL: f64 = 1e-9;
/// Headroom on Monte Carlo step-rate estimates feeding the truncation
/// bound; exact enumerated rates get none.
const RATE_HEADROOM: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    /// Particles are unit directions; the radial part is the analytic
    /// kernel of degree alpha.
    Sphere,
    /// Particles are literal points of R^d minus the origin; functionals
    /// are plain weighted indicator sums.
    PuncturedSpace,
}

/// How a measure was produced.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    /// Series terms folded in (1 for a bare first term).
    pub series_terms: usize,
    /// Monte Carlo sizes used along the way; 0 marks exact enumeration.
    pub mc_sizes: Vec<usize>,
    pub truncation_bound: Option<f64>,
}

/// Weighted particles with a homogeneity degree.
#[derive(Debug, Clone)]
pub struct ParticleMeasure {
    pub support: SupportKind,
    pub particles: Vec<(DVector<f64>, f64)>,
    pub alpha: f64,
    /// Norm in which sphere particles are unit and radii are measured.
    pub norm: Norm,
    pub provenance: Provenance,
}

impl ParticleMeasure {
    pub fn total_mass(&self) -> f64 {
        let w: Vec<f64> = self.particles.iter().map(|(_, w)| *w).collect();
        pairwise_sum(&w)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Verifies weights are finite and nonnegative and, on the sphere,
    /// that every particle is unit in the declared norm.
    pub fn check_support(&self) -> Result<()> {
        for (x, w) in &self.particles {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidParameter(format!("particle weight {w} is invalid")));
            }
            if self.support == SupportKind::Sphere {
                let r = self.norm.vec(x);
                if (r - 1.0).abs() > SPHERE_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "sphere particle has norm {r}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Truncation record for a summed series.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesTruncation {
    /// Terms included.
    pub k_max: usize,
    /// Bound on the total weight of all terms left out.
    pub tail_bound: f64,
    /// Per-term mass contraction rate the bound extrapolates with.
    pub kappa_used: f64,
}

/// Knobs for [`sum_series`].
#[derive(Debug, Clone)]
pub struct SeriesOptions {
    /// Fixed number of terms; defaults to 32 when no tolerance is given.
    pub k_max: Option<usize>,
    /// Target truncation bound; terms are added until it is met.
    pub tol: Option<f64>,
    /// Directions drawn for the first term when the input spherical law
    /// is not finitely supported.
    pub gamma1_draws: usize,
    /// Matrix draws per particle when a push cannot be enumerated.
    pub push_draws: usize,
    /// Particle count above which a term (or the final sum) is resampled.
    pub particle_budget: usize,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions {
            k_max: None,
            tol: None,
            gamma1_draws: 4096,
            push_draws: 64,
            particle_budget: 100_000,
        }
    }
}

pub(crate) fn apply_matrix_draw(
    law: &MatrixLaw,
    draw: &MatrixDraw,
    x: &DVector<f64>,
    out: &mut DVector<f64>,
) {
    match draw {
        MatrixDraw::Scalar(a) => {
            out.copy_from(x);
            *out *= *a;
        }
        MatrixDraw::Diag(d) => {
            for i in 0..x.len() {
                out[i] = d[i] * x[i];
            }
        }
        MatrixDraw::Index(i) => out.gemv(1.0, law.index_matrix(*i), x, 0.0),
    }
}

/// First series term: the tail measure of Phi(0, B1).
///
/// Directions w with spherical mass map to particles at
/// Phi(0, w)/|Phi(0, w)| weighted by c_b |Phi(0, w)|^alpha times the
/// direction mass. Finitely supported spherical laws are enumerated
/// exactly; otherwise m directions are drawn.
pub fn gamma1_particles(
    model: &RecursionModel,
    m: usize,
    factory: &StreamFactory,
) -> Result<ParticleMeasure> {
    let alpha = model.alpha();
    let c_b = model.input_law.c_b;
    let refuse = |w: &DVector<f64>| {
        Error::HypothesisRefused(format!(
            "Phi(0, w) vanishes at input direction {:?}; the first series term needs \
             nonzero images on the input sphere",
            w.as_slice()
        ))
    };
    let mut particles = Vec::new();
    let mc;
    match model.input_law.spherical.discrete_atoms() {
        Some(atoms) => {
            mc = 0;
            for (theta, p) in atoms {
                let img = model.phi_zero_input(&theta);
                let r = model.norm.vec(&img);
                if r == 0.0 {
                    return Err(refuse(&theta));
                }
                particles.push((img / r, c_b * p * r.powf(alpha)));
            }
        }
        None => {
            if m == 0 {
                return Err(Error::EmptyEnsemble);
            }
            mc = m;
            let mut rng = factory.stream(Domain::Gamma1, 0);
            let mut theta = DVector::zeros(model.dim);
            for _ in 0..m {
                model
                    .input_law
                    .spherical
                    .sample_into(model.norm, &mut rng, &mut theta);
                let img = model.phi_zero_input(&theta);
                let r = model.norm.vec(&img);
                if r == 0.0 {
                    return Err(refuse(&theta));
                }
                particles.push((img / r, c_b / m as f64 * r.powf(alpha)));
            }
        }
    }
    Ok(ParticleMeasure {
        support: SupportKind::Sphere,
        particles,
        alpha,
        norm: model.norm,
        provenance: Provenance {
            series_terms: 1,
            mc_sizes: vec![mc],
            truncation_bound: None,
        },
    })
}

/// Pushes a spherical measure through one matrix draw: particle
/// (omega, w) becomes (A omega / |A omega|, w |A omega|^alpha), averaged
/// over the law of A. Enumerated exactly for finitely supported laws
/// within the branch budget, Monte Carlo otherwise. `salt` separates the
/// RNG streams of successive pushes.
pub fn push_spherical(
    measure: &ParticleMeasure,
    law: &MatrixLaw,
    mc_per_particle: usize,
    factory: &StreamFactory,
    salt: u64,
) -> Result<ParticleMeasure> {
    if measure.support != SupportKind::Sphere {
        return Err(Error::Unsupported("push-forward needs a spherical measure".into()));
    }
    let alpha = measure.alpha;
    let norm = measure.norm;
    let dim = measure.particles.first().map_or(0, |(x, _)| x.len());
    let mut mc_sizes = measure.provenance.mc_sizes.clone();

    let atoms = if dim > 0 { law.discrete_atoms(dim) } else { None };
    let particles: Vec<(DVector<f64>, f64)> = match atoms {
        Some(atoms)
            if measure.particles.len().saturating_mul(atoms.len()) <= ENUM_BRANCH_BUDGET =>
        {
            mc_sizes.push(0);
            let mut out = Vec::with_capacity(measure.particles.len() * atoms.len());
            let mut v = DVector::zeros(dim);
            for (omega, w) in &measure.particles {
                for (mat, p) in &atoms {
                    v.gemv(1.0, mat, omega, 0.0);
                    let r = norm.vec(&v);
                    if r > 0.0 {
                        out.push((&v / r, w * p * r.powf(alpha)));
                    }
                }
            }
            out
        }
        _ => {
            if mc_per_particle == 0 {
                return Err(Error::InvalidParameter(
                    "monte carlo push needs at least one draw per particle".into(),
                ));
            }
            mc_sizes.push(mc_per_particle);
            measure
                .particles
                .par_iter()
                .enumerate()
                .map(|(idx, (omega, w))| {
                    let mut rng = factory.stream(Domain::SeriesPush, (salt << 32) | idx as u64);
                    let mut v = DVector::zeros(dim);
                    let mut out = Vec::with_capacity(mc_per_particle);
                    for _ in 0..mc_per_particle {
                        let draw = law.draw(&mut rng);
                        apply_matrix_draw(law, &draw, omega, &mut v);
                        let r = norm.vec(&v);
                        if r > 0.0 {
                            out.push((&v / r, w * r.powf(alpha) / mc_per_particle as f64));
                        }
                    }
                    out
                })
                .flatten_iter()
                .collect()
        }
    };

    Ok(ParticleMeasure {
        support: SupportKind::Sphere,
        particles,
        alpha,
        norm,
        provenance: Provenance {
            series_terms: measure.provenance.series_terms + 1,
            mc_sizes,
            truncation_bound: None,
        },
    })
}

/// Weight-proportional systematic resampling down to `target` particles.
/// Total mass is preserved exactly; every kept location carries the same
/// weight.
fn resample_particles(
    particles: &[(DVector<f64>, f64)],
    target: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(DVector<f64>, f64)> {
    use rand::Rng;
    if particles.len() <= target || target == 0 {
        return particles.to_vec();
    }
    let weights: Vec<f64> = particles.iter().map(|(_, w)| *w).collect();
    let total = pairwise_sum(&weights);
    if total <= 0.0 {
        return Vec::new();
    }
    let u0: f64 = rng.random();
    let each = total / target as f64;
    let mut out = Vec::with_capacity(target);
    let mut cum = 0.0;
    let mut i = 0usize;
    for j in 0..target {
        let pos = (j as f64 + u0) * each;
        while cum + weights[i] < pos && i + 1 < particles.len() {
            cum += weights[i];
            i += 1;
        }
        out.push((particles[i].0.clone(), each));
    }
    out
}

/// Per-step mass contraction rate sup_omega E|A omega|^alpha, evaluated
/// over directions the series has actually visited.
struct StepRate {
    alpha: f64,
    norm: Norm,
    kind: RateKind,
    max_seen: f64,
    exact: bool,
}

enum RateKind {
    /// Scalar laws: E|a|^alpha, direction-free and exact.
    Fixed(f64),
    /// Finite matrix set: exact expectation per direction.
    Atoms(Vec<(DMatrix<f64>, f64)>),
    /// Anything else: shared-draw Monte Carlo per direction.
    Sampled(MatrixLaw),
}

impl StepRate {
    fn new(law: &MatrixLaw, dim: usize, norm: Norm, alpha: f64) -> StepRate {
        let (kind, exact) = if let Some(m) = law.scalar_abs_moment(alpha) {
            (RateKind::Fixed(m), true)
        } else if let Some(atoms) = law.discrete_atoms(dim) {
            (RateKind::Atoms(atoms), true)
        } else {
            (RateKind::Sampled(law.clone()), false)
        };
        StepRate {
            alpha,
            norm,
            kind,
            max_seen: 0.0,
            exact,
        }
    }

    /// Folds the directions of a new term into the running maximum.
    fn observe(&mut self, particles: &[(DVector<f64>, f64)], factory: &StreamFactory) {
        match &self.kind {
            RateKind::Fixed(m) => self.max_seen = self.max_seen.max(*m),
            RateKind::Atoms(atoms) => {
                let dim = match particles.first() {
                    Some((x, _)) => x.len(),
                    None => return,
                };
                let mut v = DVector::zeros(dim);
                let rate_at = |omega: &DVector<f64>, v: &mut DVector<f64>| -> f64 {
                    let mut e = 0.0;
                    for (mat, p) in atoms {
                        v.gemv(1.0, mat, omega, 0.0);
                        e += p * self.norm.vec(v).powf(self.alpha);
                    }
                    e
                };
                // The rate at each direction, and one push ahead so the
                // geometric extrapolation also covers directions the next
                // term will visit.
                let mut ahead = DVector::zeros(dim);
                let mut img = DVector::zeros(dim);
                for (omega, _) in particles {
                    self.max_seen = self.max_seen.max(rate_at(omega, &mut v));
                    for (mat, _) in atoms {
                        img.gemv(1.0, mat, omega, 0.0);
                        let r = self.norm.vec(&img);
                        if r > 0.0 {
                            ahead.copy_from(&img);
                            ahead /= r;
                            self.max_seen = self.max_seen.max(rate_at(&ahead, &mut v));
                        }
                    }
                }
            }
            RateKind::Sampled(law) => {
                // Shared draws across directions; the heaviest directions
                // are enough for a maximum.
                const DRAWS: usize = 512;
                const DIRS: usize = 1024;
                let mut idx: Vec<usize> = (0..particles.len()).collect();
                idx.sort_by(|&a, &b| {
                    f64::total_cmp(&particles[b].1, &particles[a].1).then(a.cmp(&b))
                });
                idx.truncate(DIRS);
                let dim = match particles.first() {
                    Some((x, _)) => x.len(),
                    None => return,
                };
                let mut rng = factory.stream(Domain::SeriesPush, (1 << 56) - 2);
                let draws: Vec<MatrixDraw> = (0..DRAWS).map(|_| law.draw(&mut rng)).collect();
                let mut v = DVector::zeros(dim);
                for &i in &idx {
                    let omega = &particles[i].0;
                    let mut acc = 0.0;
                    for draw in &draws {
                        apply_matrix_draw(law, draw, omega, &mut v);
                        acc += self.norm.vec(&v).powf(self.alpha);
                    }
                    self.max_seen = self.max_seen.max(acc / DRAWS as f64);
                }
            }
        }
    }

    /// Rate used in the truncation bound, with headroom when sampled.
    fn safe(&self) -> f64 {
        if self.exact {
            self.max_seen
        } else {
            (self.max_seen * RATE_HEADROOM).min((1.0 + self.max_seen) / 2.0)
        }
    }
}

/// Checks Phi(x, 0) = x on sampled points of the input orbit (matrix
/// products applied to scaled images of input directions).
fn orbit_fixed_point_check(
    model: &RecursionModel,
    law: &MatrixLaw,
    factory: &StreamFactory,
) -> Result<()> {
    let mut rng = factory.stream(Domain::SeriesPush, (1 << 56) - 1);
    let mut theta = DVector::zeros(model.dim);
    let mut buf = DVector::zeros(model.dim);
    let radii = [0.5, 1.0, 4.0];
    for probe in 0..ORBIT_PROBES {
        model
            .input_law
            .spherical
            .sample_into(model.norm, &mut rng, &mut theta);
        let mut x = model.phi_zero_input(&theta) * radii[probe % radii.len()];
        for _ in 0..(probe % 7) {
            let draw = law.draw(&mut rng);
            apply_matrix_draw(law, &draw, &x, &mut buf);
            std::mem::swap(&mut x, &mut buf);
        }
        let y = model.phi_state_only(&x);
        let rel = self_norm_rel(model, &x, &y);
        if rel > ORBIT_TOL {
            return Err(Error::HypothesisRefused(format!(
                "Phi(x, 0) = x fails on the input orbit (relative error {rel:.2e} at a \
                 sampled point); the series construction needs the map to fix its input orbit"
            )));
        }
    }
    Ok(())
}

fn self_norm_rel(model: &RecursionModel, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    model.norm.vec(&(y - x)) / (1.0 + model.norm.vec(x))
}

/// Sums the spherical series: term 1 from [`gamma1_particles`], each next
/// term one [`push_spherical`] of the previous.
///
/// Before summing, two standing assumptions are verified: the product
/// alpha-moment rate kappa(alpha) must be below one (otherwise the total
/// mass may diverge), and the map must fix sampled points of its input
/// orbit. The returned truncation record bounds the mass of all omitted
/// terms by geometric extrapolation with the observed per-step rate.
pub fn sum_series(
    model: &RecursionModel,
    opts: &SeriesOptions,
    factory: &StreamFactory,
) -> Result<(ParticleMeasure, SeriesTruncation)> {
    let alpha = model.alpha();
    let law = model.effective_matrix_law();

    // Divergence precheck. Diagonal laws have an exact product growth
    // rate; everything else is estimated, with the noise the estimator
    // carries near the critical value.
    let kappa_hat = match law.diagonal_growth_moment(alpha) {
        Some(exact) => exact,
        None => estimate_kappa(&law, model.dim, model.norm, alpha, 64, 4000, factory)?.kappa_hat,
    };
    if !(kappa_hat < 1.0 - 1e-9) {
        return Err(Error::HypothesisRefused(format!(
            "kappa({alpha}) = {kappa_hat:.6} is not below one; the spherical series may diverge"
        )));
    }
    orbit_fixed_point_check(model, &law, factory)?;

    let cap = match (opts.k_max, opts.tol) {
        (Some(k), _) => k.max(1),
        (None, Some(_)) => TOL_TERM_CAP,
        (None, None) => 32,
    };

    let mut term = gamma1_particles(model, opts.gamma1_draws, factory)?;
    let mut rate = StepRate::new(&law, model.dim, model.norm, alpha);
    rate.observe(&term.particles, factory);
    let mut mc_sizes = term.provenance.mc_sizes.clone();
    let mut particles = term.particles.clone();
    let mut last_mass = term.total_mass();
    let mut k = 1usize;

    let truncation = loop {
        let s = rate.safe();
        let bound = if s < 1.0 {
            last_mass * s / (1.0 - s)
        } else {
            f64::INFINITY
        };
        let done = match opts.tol {
            Some(tol) => bound < tol || k >= cap,
            None => k >= cap,
        };
        if done {
            if let Some(tol) = opts.tol {
                if bound >= tol {
                    return Err(Error::InvalidParameter(format!(
                        "series truncation bound {bound:.3e} cannot reach tolerance {tol:.3e} \
                         within {cap} terms (observed per-step rate {s:.6})"
                    )));
                }
            }
            break SeriesTruncation {
                k_max: k,
                tail_bound: bound,
                kappa_used: s,
            };
        }

        term = push_spherical(&term, &law, opts.push_draws, factory, k as u64)?;
        if term.particles.len() > opts.particle_budget {
            let mut rng = factory.stream(Domain::Resample, k as u64);
            term.particles = resample_particles(&term.particles, opts.particle_budget, &mut rng);
        }
        rate.observe(&term.particles, factory);
        if let Some(&m) = term.provenance.mc_sizes.last() {
            mc_sizes.push(m);
        }
        last_mass = term.total_mass();
        particles.extend_from_slice(&term.particles);
        k += 1;
    };

    let mut combined = ParticleMeasure {
        support: SupportKind::Sphere,
        particles,
        alpha,
        norm: model.norm,
        provenance: Provenance {
            series_terms: truncation.k_max,
            mc_sizes,
            truncation_bound: Some(truncation.tail_bound),
        },
    };
    if combined.particles.len() > opts.particle_budget {
        let mut rng = factory.stream(Domain::Resample, (1 << 30) as u64);
        combined.particles =
            resample_particles(&combined.particles, opts.particle_budget, &mut rng);
    }
    Ok((combined, truncation))
}

/// Test functionals with closed-form radial integrals.
#[derive(Debug, Clone)]
pub enum TailFunctional {
    /// 1 on {|x| > r}.
    BallComplement { r: f64 },
    /// 1 on {<u, x> > r}.
    HalfSpace { u: DVector<f64>, r: f64 },
    /// |x|^p on {|x| > r}; needs p < alpha.
    RadialPowerBall { p: f64, r: f64 },
}

/// Integrates a supported functional against the measure.
///
/// On the sphere the radial integral is analytic, so homogeneity
/// f(s x): value(r/s) = s^alpha value(r) holds at the level of the
/// formulas. On a punctured-space particle set the functional is a plain
/// weighted indicator sum.
pub fn tail_functional(measure: &ParticleMeasure, functional: &TailFunctional) -> Result<f64> {
    let alpha = measure.alpha;
    let check_r = |r: f64| -> Result<()> {
        if r > 0.0 && r.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter("functional radius must be positive".into()))
        }
    };
    match (functional, measure.support) {
        (TailFunctional::BallComplement { r }, SupportKind::Sphere) => {
            check_r(*r)?;
            Ok(measure.total_mass() * r.powf(-alpha))
        }
        (TailFunctional::BallComplement { r }, SupportKind::PuncturedSpace) => {
            check_r(*r)?;
            let hits: Vec<f64> = measure
                .particles
                .iter()
                .filter(|(x, _)| measure.norm.vec(x) > *r)
                .map(|(_, w)| *w)
                .collect();
            Ok(pairwise_sum(&hits))
        }
        (TailFunctional::HalfSpace { u, r }, SupportKind::Sphere) => {
            check_r(*r)?;
            let vals: Vec<f64> = measure
                .particles
                .iter()
                .filter_map(|(omega, w)| {
                    let d = u.dot(omega);
                    (d > 0.0).then(|| w * (d / r).powf(alpha))
                })
                .collect();
            Ok(pairwise_sum(&vals))
        }
        (TailFunctional::HalfSpace { u, r }, SupportKind::PuncturedSpace) => {
            check_r(*r)?;
            let hits: Vec<f64> = measure
                .particles
                .iter()
                .filter(|(x, _)| u.dot(x) > *r)
                .map(|(_, w)| *w)
                .collect();
            Ok(pairwise_sum(&hits))
        }
        (TailFunctional::RadialPowerBall { p, r }, SupportKind::Sphere) => {
            check_r(*r)?;
            if !(*p < alpha) {
                return Err(Error::Unsupported(format!(
                    "radial power {p} diverges against a degree-{alpha} tail"
                )));
            }
            Ok(measure.total_mass() * alpha / (alpha - p) * r.powf(p - alpha))
        }
        (TailFunctional::RadialPowerBall { .. }, SupportKind::PuncturedSpace) => Err(
            Error::Unsupported("radial powers need the spherical representation".into()),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        benchmark_2d, scalar_affine, scalar_extremal, Coupling, CustomPhi, HeavyTailLaw,
        ModelKind, RecursionModel, SphericalLaw,
    };
    use std::sync::Arc;

    fn factory() -> StreamFactory {
        StreamFactory::new(77031)
    }

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn sphere_atom(dim_point: DVector<f64>, w: f64, alpha: f64) -> ParticleMeasure {
        ParticleMeasure {
            support: SupportKind::Sphere,
            particles: vec![(dim_point, w)],
            alpha,
            norm: Norm::Euclidean,
            provenance: Provenance {
                series_terms: 1,
                mc_sizes: vec![0],
                truncation_bound: None,
            },
        }
    }

    #[test]
    fn first_term_of_a_positive_scalar_model_is_one_atom() {
        for model in [
            scalar_affine(0.5, 0.7, 1.0).unwrap(),
            scalar_extremal(0.5, 0.7, 1.0).unwrap(),
        ] {
            let g = gamma1_particles(&model, 0, &factory()).unwrap();
            assert_eq!(g.len(), 1);
            let (dir, w) = &g.particles[0];
            assert_eq!(dir[0], 1.0);
            assert_eq!(*w, 1.0);
            g.check_support().unwrap();
        }
    }

    #[test]
    fn first_term_enumerates_two_dimensional_axis_atoms() {
        let model = benchmark_2d(0.5, 2.0, Norm::Euclidean).unwrap();
        let g = gamma1_particles(&model, 0, &factory()).unwrap();
        assert_eq!(g.len(), 2);
        for (dir, w) in &g.particles {
            assert!((w - 1.0).abs() < 1e-15, "axis atom weight {w}");
            assert!((Norm::Euclidean.vec(dir) - 1.0).abs() < 1e-15);
        }
        assert!((g.total_mass() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn first_term_refuses_maps_that_kill_the_input() {
        let phi: CustomPhi = Arc::new(|x: &DVector<f64>, _y: &DVector<f64>| x.clone());
        let model = RecursionModel::new(
            ModelKind::Custom { phi },
            1,
            Norm::Euclidean,
            MatrixLaw::DeterministicScalar(0.5),
            HeavyTailLaw::exact_pareto(1.0, 1.0, SphericalLaw::Point(DVector::from_vec(vec![1.0])))
                .unwrap(),
            None,
            Coupling::Independent,
        )
        .unwrap();
        match gamma1_particles(&model, 0, &factory()) {
            Err(Error::HypothesisRefused(msg)) => assert!(msg.contains("Phi(0, w)")),
            other => panic!("expected a refusal, got {other:?}"),
        }
    }

    #[test]
    fn push_through_a_deterministic_scalar_halves_the_weight() {
        let m = sphere_atom(DVector::from_vec(vec![1.0]), 1.0, 1.0);
        let p = push_spherical(&m, &MatrixLaw::DeterministicScalar(0.5), 1, &factory(), 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.particles[0].0[0], 1.0);
        assert!((p.particles[0].1 - 0.5).abs() < 1e-15);
        assert_eq!(p.provenance.series_terms, 2);
    }

    #[test]
    fn push_through_a_rotation_moves_atoms_and_keeps_weights() {
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let m = sphere_atom(vec2(1.0, 0.0), 1.3, 0.8);
        let p = push_spherical(&m, &MatrixLaw::DeterministicMatrix(rot), 1, &factory(), 1).unwrap();
        assert_eq!(p.len(), 1);
        let (dir, w) = &p.particles[0];
        assert!((dir[0] - 0.0).abs() < 1e-15 && (dir[1] - 1.0).abs() < 1e-15);
        assert!((w - 1.3).abs() < 1e-15);
    }

    #[test]
    fn push_enumerates_two_point_scalar_laws_exactly() {
        let m = sphere_atom(DVector::from_vec(vec![1.0]), 1.0, 1.0);
        let law = MatrixLaw::ScalarLaw(crate::model::ScalarDist::Discrete {
            values: vec![0.2, 0.8],
            probs: vec![0.5, 0.5],
        });
        let p = push_spherical(&m, &law, 2, &factory(), 1).unwrap();
        assert_eq!(p.len(), 2);
        let mut ws: Vec<f64> = p.particles.iter().map(|(_, w)| *w).collect();
        ws.sort_by(f64::total_cmp);
        assert!((ws[0] - 0.1).abs() < 1e-15);
        assert!((ws[1] - 0.4).abs() < 1e-15);
        assert!((p.total_mass() - 0.5).abs() < 1e-15);
        for (dir, _) in &p.particles {
            assert_eq!(dir[0], 1.0);
        }
    }

    #[test]
    fn series_mass_matches_the_geometric_closed_form() {
        // a = 0.5, alpha = 0.5, c_b = 1: total mass 1 / (1 - 2^{-1/2}).
        let model = scalar_affine(0.5, 0.5, 1.0).unwrap();
        let opts = SeriesOptions {
            tol: Some(1e-6),
            ..SeriesOptions::default()
        };
        let (measure, trunc) = sum_series(&model, &opts, &factory()).unwrap();
        let want = 1.0 / (1.0 - 0.5_f64.powf(0.5));
        assert!(
            (measure.total_mass() - want).abs() < 1e-6,
            "mass {} vs {want}",
            measure.total_mass()
        );
        assert!(trunc.tail_bound < 1e-6);
        assert!((trunc.kappa_used - 0.5_f64.powf(0.5)).abs() < 1e-12);
        measure.check_support().unwrap();
    }

    #[test]
    fn series_mass_matches_a_second_scalar_closed_form() {
        let model = scalar_affine(0.3, 1.2, 1.0).unwrap();
        let opts = SeriesOptions {
            tol: Some(1e-6),
            ..SeriesOptions::default()
        };
        let (measure, _) = sum_series(&model, &opts, &factory()).unwrap();
        let want = 1.0 / (1.0 - 0.3_f64.powf(1.2));
        assert!((measure.total_mass() - want).abs() < 1e-6);
    }

    #[test]
    fn benchmark_terms_follow_the_exact_mass_products() {
        // Diagonal matrices keep axis atoms on the axes, and both axes
        // share E|A e|^alpha = (2^a + 3^{-a}) / 2, so k terms of the sum
        // have mass c_b sum_{j<k} q^j exactly.
        let alpha = 0.5;
        let model = benchmark_2d(alpha, 2.0, Norm::Euclidean).unwrap();
        let opts = SeriesOptions {
            k_max: Some(8),
            ..SeriesOptions::default()
        };
        let (measure, trunc) = sum_series(&model, &opts, &factory()).unwrap();
        let q = (2.0_f64.powf(alpha) + 3.0_f64.powf(-alpha)) / 2.0;
        let want: f64 = (0..8).map(|j| 2.0 * q.powi(j)).sum();
        assert!(
            (measure.total_mass() - want).abs() < 1e-10,
            "mass {} vs {want}",
            measure.total_mass()
        );
        assert_eq!(trunc.k_max, 8);
        assert!((trunc.kappa_used - q).abs() < 1e-12);
    }

    #[test]
    fn series_refuses_rotation_laws() {
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let model = RecursionModel::new(
            ModelKind::Affine,
            2,
            Norm::Euclidean,
            MatrixLaw::DeterministicMatrix(rot),
            HeavyTailLaw::exact_pareto(1.0, 1.0, SphericalLaw::Point(vec2(1.0, 0.0))).unwrap(),
            None,
            Coupling::Independent,
        )
        .unwrap();
        match sum_series(&model, &SeriesOptions::default(), &factory()) {
            Err(Error::HypothesisRefused(msg)) => assert!(msg.contains("kappa")),
            other => panic!("expected a kappa refusal, got {other:?}"),
        }
    }

    #[test]
    fn series_refuses_maps_that_move_the_orbit() {
        // Phi(x, y) = x/2 + y contracts states inside the map itself, so
        // Phi(x, 0) = x fails on every orbit point.
        let phi: CustomPhi =
            Arc::new(|x: &DVector<f64>, y: &DVector<f64>| x * 0.5 + y);
        let model = RecursionModel::new(
            ModelKind::Custom { phi },
            1,
            Norm::Euclidean,
            MatrixLaw::DeterministicScalar(0.5),
            HeavyTailLaw::exact_pareto(1.0, 1.0, SphericalLaw::Point(DVector::from_vec(vec![1.0])))
                .unwrap(),
            None,
            Coupling::Independent,
        )
        .unwrap();
        match sum_series(&model, &SeriesOptions::default(), &factory()) {
            Err(Error::HypothesisRefused(msg)) => assert!(msg.contains("orbit")),
            other => panic!("expected an orbit refusal, got {other:?}"),
        }
    }

    #[test]
    fn truncation_bound_is_honest_for_scalar_laws() {
        for (a, alpha) in [(0.5, 0.5), (0.3, 1.2)] {
            let model = scalar_affine(a, alpha, 1.0).unwrap();
            let short = SeriesOptions {
                k_max: Some(6),
                ..SeriesOptions::default()
            };
            let long = SeriesOptions {
                k_max: Some(40),
                ..SeriesOptions::default()
            };
            let (m6, t6) = sum_series(&model, &short, &factory()).unwrap();
            let (m40, _) = sum_series(&model, &long, &factory()).unwrap();
            let moved = (m40.total_mass() - m6.total_mass()).abs();
            assert!(
                moved <= t6.tail_bound * (1.0 + 1e-9),
                "a = {a}, alpha = {alpha}: mass moved {moved} beyond bound {}",
                t6.tail_bound
            );
        }
    }

    #[test]
    fn truncation_bound_is_honest_for_a_random_scalar_law() {
        let law = MatrixLaw::ScalarLaw(crate::model::ScalarDist::Discrete {
            values: vec![0.2, 0.8],
            probs: vec![0.5, 0.5],
        });
        let model = RecursionModel::new(
            ModelKind::Affine,
            1,
            Norm::Euclidean,
            law,
            HeavyTailLaw::exact_pareto(1.0, 1.0, SphericalLaw::Point(DVector::from_vec(vec![1.0])))
                .unwrap(),
            None,
            Coupling::Independent,
        )
        .unwrap();
        let short = SeriesOptions {
            k_max: Some(6),
            ..SeriesOptions::default()
        };
        let long = SeriesOptions {
            k_max: Some(12),
            ..SeriesOptions::default()
        };
        let (m6, t6) = sum_series(&model, &short, &factory()).unwrap();
        let (m12, _) = sum_series(&model, &long, &factory()).unwrap();
        // E A = 0.5 exactly, so masses halve per term and the remainder
        // after 6 terms equals the 6th term's mass.
        let moved = (m12.total_mass() - m6.total_mass()).abs();
        assert!(moved <= t6.tail_bound * (1.0 + 1e-9));
        assert!((t6.kappa_used - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resampling_preserves_total_mass_and_count() {
        let mut rng = factory().stream(Domain::Resample, 0);
        use rand::Rng;
        let particles: Vec<(DVector<f64>, f64)> = (0..3000)
            .map(|i| {
                let u: f64 = rng.random();
                (DVector::from_vec(vec![i as f64]), u)
            })
            .collect();
        let w: Vec<f64> = particles.iter().map(|(_, w)| *w).collect();
        let total = pairwise_sum(&w);
        let mut r1 = factory().stream(Domain::Resample, 1);
        let kept = resample_particles(&particles, 500, &mut r1);
        assert_eq!(kept.len(), 500);
        let kw: Vec<f64> = kept.iter().map(|(_, w)| *w).collect();
        assert!((pairwise_sum(&kw) - total).abs() < 1e-9 * total);
        let mut r2 = factory().stream(Domain::Resample, 1);
        let again = resample_particles(&particles, 500, &mut r2);
        for (a, b) in kept.iter().zip(&again) {
            assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
    }

    #[test]
    fn over_budget_terms_are_resampled_inside_the_series() {
        let model = scalar_affine(0.5, 1.0, 1.0).unwrap();
        let opts = SeriesOptions {
            k_max: Some(4),
            particle_budget: 3,
            ..SeriesOptions::default()
        };
        // One particle per term here, so the budget never binds; this
        // guards the plumbing with a benchmark model instead.
        let (m, _) = sum_series(&model, &opts, &factory()).unwrap();
        assert!(m.len() <= 4);
        let bench = benchmark_2d(0.5, 2.0, Norm::Euclidean).unwrap();
        let opts = SeriesOptions {
            k_max: Some(10),
            particle_budget: 64,
            ..SeriesOptions::default()
        };
        let (bm, _) = sum_series(&bench, &opts, &factory()).unwrap();
        assert!(bm.len() <= 64);
        bm.check_support().unwrap();
    }

    #[test]
    fn ball_functional_matches_hand_values() {
        let m = sphere_atom(DVector::from_vec(vec![1.0]), 3.0, 1.0);
        let v = tail_functional(&m, &TailFunctional::BallComplement { r: 2.0 }).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
        let unit = tail_functional(&m, &TailFunctional::BallComplement { r: 1.0 }).unwrap();
        assert!((unit - 3.0).abs() < 1e-15);
    }

    #[test]
    fn halfspace_functional_matches_hand_values() {
        // Atom omega with <u, omega> = 0.5, weight 2, alpha 1, r = 1:
        // crossing radius 2, value 2 * (1/2) = 1.
        let omega = vec2(0.5, 3.0_f64.sqrt() / 2.0);
        let m = sphere_atom(omega, 2.0, 1.0);
        let u = vec2(1.0, 0.0);
        let v = tail_functional(&m, &TailFunctional::HalfSpace { u: u.clone(), r: 1.0 }).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        // Opposite half-space sees nothing.
        let v2 = tail_functional(&m, &TailFunctional::HalfSpace { u: -u, r: 1.0 }).unwrap();
        assert_eq!(v2, 0.0);
    }

    #[test]
    fn functionals_scale_with_the_homogeneity_degree() {
        let alpha = 0.7;
        let m = sphere_atom(DVector::from_vec(vec![1.0]), 2.5, alpha);
        for s in [0.5, 2.0, 7.0] {
            let base = tail_functional(&m, &TailFunctional::BallComplement { r: 1.0 }).unwrap();
            let scaled = tail_functional(&m, &TailFunctional::BallComplement { r: s }).unwrap();
            assert!((scaled - base * s.powf(-alpha)).abs() < 1e-12 * base);
        }
    }

    #[test]
    fn radial_power_functional_uses_the_analytic_integral() {
        let alpha = 1.5;
        let m = sphere_atom(DVector::from_vec(vec![1.0]), 2.0, alpha);
        let v = tail_functional(&m, &TailFunctional::RadialPowerBall { p: 0.5, r: 2.0 }).unwrap();
        let want = 2.0 * alpha / (alpha - 0.5) * 2.0_f64.powf(0.5 - alpha);
        assert!((v - want).abs() < 1e-12);
        assert!(matches!(
            tail_functional(&m, &TailFunctional::RadialPowerBall { p: 2.0, r: 1.0 }),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn punctured_space_functionals_are_indicator_sums() {
        let m = ParticleMeasure {
            support: SupportKind::PuncturedSpace,
            particles: vec![
                (DVector::from_vec(vec![3.0]), 0.25),
                (DVector::from_vec(vec![0.5]), 0.5),
                (DVector::from_vec(vec![-4.0]), 0.125),
            ],
            alpha: 1.0,
            norm: Norm::Euclidean,
            provenance: Provenance {
                series_terms: 0,
                mc_sizes: vec![],
                truncation_bound: None,
            },
        };
        let ball = tail_functional(&m, &TailFunctional::BallComplement { r: 1.0 }).unwrap();
        assert!((ball - 0.375).abs() < 1e-15);
        let hs = tail_functional(
            &m,
            &TailFunctional::HalfSpace { u: DVector::from_vec(vec![1.0]), r: 1.0 },
        )
        .unwrap();
        assert!((hs - 0.25).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_pushes_are_worker_count_invariant() {
        let model = RecursionModel::new(
            ModelKind::Affine,
            2,
            Norm::Euclidean,
            MatrixLaw::ScalarLaw(crate::model::ScalarDist::Uniform { lo: 0.2, hi: 0.7 }),
            HeavyTailLaw::exact_pareto(1.0, 1.0, SphericalLaw::Uniform).unwrap(),
            None,
            Coupling::Independent,
        )
        .unwrap();
        let opts = SeriesOptions {
            k_max: Some(3),
            gamma1_draws: 128,
            push_draws: 8,
            ..SeriesOptions::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let (m, _) = sum_series(&model, &opts, &factory()).unwrap();
                m.particles
                    .iter()
                    .flat_map(|(x, w)| {
                        x.iter().map(|c| c.to_bits()).chain([w.to_bits()]).collect::<Vec<_>>()
                    })
                    .collect::<Vec<u64>>()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn sphere_invariant_rejects_off_sphere_particles() {
        let m = sphere_atom(DVector::from_vec(vec![1.5]), 1.0, 1.0);
        assert!(m.check_support().is_err());
    }
}
