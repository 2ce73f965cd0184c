//! Model definition: the dilation-commuting map Phi, the matrix law of A,
//! and the heavy-tailed input law of B.
//!
//! A [`RecursionModel`] bundles everything needed to run one step of
//! `X_n = Phi(A_n X_{n-1}, B_n(X_{n-1}))`: the kind of Phi, the dimension,
//! the ambient norm, the law of the i.i.d. matrices `A_n`, the law of the
//! regularly varying input `B1_n` (radial Pareto component times an
//! independent spherical direction), an optional bounded perturbation
//! `B2_n(x)` with `|B2(x)| <= B3 |x|^delta0`, and the coupling between
//! `A` and `B1`.
//!
//! Radial laws are exact-tail by construction: `P(R > t) = c_b t^{-alpha}`
//! for `t` above the scale/threshold, so every tail constant downstream has
//! a closed form to test against.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Norm;

/// Relative tolerance for homogeneity violations of built-in kinds.
pub const HOMOGENEITY_TOL: f64 = 1e-9;

const PROB_TOL: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// scalar distributions
// ---------------------------------------------------------------------------

/// Scalar distribution used for matrix entries, perturbation magnitudes,
/// shift coordinates and radial body parts.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarDist {
    Constant(f64),
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    Uniform { lo: f64, hi: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl ScalarDist {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarDist::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::InvalidParameter("constant must be finite".into()));
                }
            }
            ScalarDist::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::InvalidParameter(
                        "discrete law needs matching nonempty values/probs".into(),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter("discrete values must be finite".into()));
                }
                validate_probs(probs)?;
            }
            ScalarDist::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidParameter("uniform law needs lo < hi".into()));
                }
            }
            ScalarDist::LogNormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::InvalidParameter("lognormal needs finite mu, sigma >= 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ScalarDist::Constant(c) => *c,
            ScalarDist::Discrete { values, probs } => {
                let u: f64 = rng.random();
                values[discrete_index(probs, u)]
            }
            ScalarDist::Uniform { lo, hi } => {
                let u: f64 = rng.random();
                lo + (hi - lo) * u
            }
            ScalarDist::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
        }
    }

    /// E|V|^p in closed form.
    pub fn abs_moment(&self, p: f64) -> f64 {
        match self {
            ScalarDist::Constant(c) => c.abs().powf(p),
            ScalarDist::Discrete { values, probs } => values
                .iter()
                .zip(probs)
                .map(|(v, q)| q * v.abs().powf(p))
                .sum(),
            ScalarDist::Uniform { lo, hi } => {
                // Piecewise integral of |x|^p over [lo, hi].
                let seg = |a: f64, b: f64| -> f64 {
                    // a, b both >= 0
                    (b.powf(p + 1.0) - a.powf(p + 1.0)) / (p + 1.0)
                };
                let total = if *lo >= 0.0 {
                    seg(*lo, *hi)
                } else if *hi <= 0.0 {
                    seg(-*hi, -*lo)
                } else {
                    seg(0.0, -*lo) + seg(0.0, *hi)
                };
                total / (hi - lo)
            }
            ScalarDist::LogNormal { mu, sigma } => (p * mu + 0.5 * p * p * sigma * sigma).exp(),
        }
    }

    /// Supremum of |V| over the support, when bounded.
    pub fn abs_bound(&self) -> Option<f64> {
        match self {
            ScalarDist::Constant(c) => Some(c.abs()),
            ScalarDist::Discrete { values, .. } => {
                Some(values.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
            }
            ScalarDist::Uniform { lo, hi } => Some(lo.abs().max(hi.abs())),
            ScalarDist::LogNormal { .. } => None,
        }
    }

    /// Infimum of the support.
    pub fn min_value(&self) -> f64 {
        match self {
            ScalarDist::Constant(c) => *c,
            ScalarDist::Discrete { values, .. } => {
                values.iter().cloned().fold(f64::INFINITY, f64::min)
            }
            ScalarDist::Uniform { lo, .. } => *lo,
            ScalarDist::LogNormal { .. } => 0.0,
        }
    }
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::ProbabilityMass { sum });
    }
    Ok(())
}

fn discrete_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// matrix law
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixLaw {
    /// A = a * Id with a fixed scalar.
    DeterministicScalar(f64),
    /// A = fixed matrix.
    DeterministicMatrix(DMatrix<f64>),
    /// A drawn from finitely many matrices with given probabilities.
    DiscreteSet(Vec<(DMatrix<f64>, f64)>),
    /// A diagonal with i.i.d. entries from per-coordinate scalar laws.
    DiagonalIid(Vec<ScalarDist>),
    /// A = a * Id with a random scalar.
    ScalarLaw(ScalarDist),
}

impl MatrixLaw {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            MatrixLaw::DeterministicScalar(a) => {
                if !a.is_finite() {
                    return Err(Error::InvalidParameter("matrix scalar must be finite".into()));
                }
            }
            MatrixLaw::DeterministicMatrix(m) => {
                check_square(m, dim)?;
            }
            MatrixLaw::DiscreteSet(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::InvalidParameter("discrete matrix set is empty".into()));
                }
                for (m, _) in atoms {
                    check_square(m, dim)?;
                }
                let probs: Vec<f64> = atoms.iter().map(|(_, p)| *p).collect();
                validate_probs(&probs)?;
            }
            MatrixLaw::DiagonalIid(entries) => {
                if entries.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "diagonal law has {} entries for dimension {}",
                        entries.len(),
                        dim
                    )));
                }
                for e in entries {
                    e.validate()?;
                }
            }
            MatrixLaw::ScalarLaw(dist) => dist.validate()?,
        }
        Ok(())
    }

    /// True when the law has a single atom (every draw is the same matrix).
    pub fn is_deterministic(&self) -> bool {
        match self {
            MatrixLaw::DeterministicScalar(_) | MatrixLaw::DeterministicMatrix(_) => true,
            MatrixLaw::DiscreteSet(atoms) => atoms.len() == 1,
            MatrixLaw::DiagonalIid(entries) => {
                entries.iter().all(|e| matches!(e, ScalarDist::Constant(_)))
            }
            MatrixLaw::ScalarLaw(dist) => matches!(dist, ScalarDist::Constant(_)),
        }
    }

    /// Discrete atoms (matrix, prob) when the law is finitely supported.
    pub fn discrete_atoms(&self, dim: usize) -> Option<Vec<(DMatrix<f64>, f64)>> {
        match self {
            MatrixLaw::DeterministicScalar(a) => {
                Some(vec![(DMatrix::identity(dim, dim) * *a, 1.0)])
            }
            MatrixLaw::DeterministicMatrix(m) => Some(vec![(m.clone(), 1.0)]),
            MatrixLaw::DiscreteSet(atoms) => Some(atoms.clone()),
            MatrixLaw::ScalarLaw(ScalarDist::Constant(a)) => {
                Some(vec![(DMatrix::identity(dim, dim) * *a, 1.0)])
            }
            MatrixLaw::ScalarLaw(ScalarDist::Discrete { values, probs }) => Some(
                values
                    .iter()
                    .zip(probs)
                    .map(|(v, p)| (DMatrix::identity(dim, dim) * *v, *p))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Exact product growth rate `max_i E|A_{ii}|^p` when the law is
    /// almost surely diagonal. Diagonal entries multiply independently
    /// across steps, and the operator norm of a diagonal product is the
    /// largest coordinate product in absolute value, so
    /// `lim_n (E ||A_1 ... A_n||^p)^{1/n}` equals the largest
    /// per-coordinate moment with no estimation error.
    pub fn diagonal_growth_moment(&self, p: f64) -> Option<f64> {
        let diag_of = |m: &DMatrix<f64>| -> Option<Vec<f64>> {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if i != j && m[(i, j)] != 0.0 {
                        return None;
                    }
                }
            }
            Some((0..m.nrows()).map(|i| m[(i, i)]).collect())
        };
        match self {
            MatrixLaw::DeterministicScalar(a) => Some(a.abs().powf(p)),
            MatrixLaw::ScalarLaw(dist) => Some(dist.abs_moment(p)),
            MatrixLaw::DiagonalIid(entries) => entries
                .iter()
                .map(|d| d.abs_moment(p))
                .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v)))),
            MatrixLaw::DeterministicMatrix(m) => {
                let d = diag_of(m)?;
                d.iter()
                    .map(|x| x.abs().powf(p))
                    .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
            }
            MatrixLaw::DiscreteSet(atoms) => {
                let diags: Vec<(Vec<f64>, f64)> = atoms
                    .iter()
                    .map(|(m, q)| diag_of(m).map(|d| (d, *q)))
                    .collect::<Option<_>>()?;
                let dim = diags.first().map(|(d, _)| d.len())?;
                (0..dim)
                    .map(|i| diags.iter().map(|(d, q)| q * d[i].abs().powf(p)).sum())
                    .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
            }
        }
    }

    /// Transposed law, for adjoint series.
    pub fn transposed(&self) -> MatrixLaw {
        match self {
            MatrixLaw::DeterministicMatrix(m) => MatrixLaw::DeterministicMatrix(m.transpose()),
            MatrixLaw::DiscreteSet(atoms) => MatrixLaw::DiscreteSet(
                atoms.iter().map(|(m, p)| (m.transpose(), *p)).collect(),
            ),
            other => other.clone(),
        }
    }

    /// Closed-form E||A||^p when available (norm-independent cases only:
    /// scalar multiples of the identity).
    pub fn scalar_abs_moment(&self, p: f64) -> Option<f64> {
        match self {
            MatrixLaw::DeterministicScalar(a) => Some(a.abs().powf(p)),
            MatrixLaw::ScalarLaw(dist) => Some(dist.abs_moment(p)),
            _ => None,
        }
    }

    /// One draw from the law, without reference to a model.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> MatrixDraw {
        match self {
            MatrixLaw::DeterministicScalar(a) => MatrixDraw::Scalar(*a),
            MatrixLaw::DeterministicMatrix(_) => MatrixDraw::Index(0),
            MatrixLaw::DiscreteSet(set) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, (_, p)) in set.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return MatrixDraw::Index(i);
                    }
                }
                MatrixDraw::Index(set.len() - 1)
            }
            MatrixLaw::DiagonalIid(entries) => {
                MatrixDraw::Diag(DVector::from_fn(entries.len(), |i, _| entries[i].sample(rng)))
            }
            MatrixLaw::ScalarLaw(dist) => MatrixDraw::Scalar(dist.sample(rng)),
        }
    }

    /// The matrix behind an index draw.
    pub fn index_matrix(&self, i: usize) -> &DMatrix<f64> {
        match self {
            MatrixLaw::DeterministicMatrix(m) => m,
            MatrixLaw::DiscreteSet(set) => &set[i].0,
            _ => unreachable!("index draw without a matrix set"),
        }
    }
}

/// A matrix drawn from a [`MatrixLaw`], with set atoms referenced by index.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixDraw {
    Scalar(f64),
    Diag(DVector<f64>),
    Index(usize),
}

fn check_square(m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{}, model dimension is {}",
            m.nrows(),
            m.ncols(),
            dim
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("matrix entries must be finite".into()));
    }
    Ok(())
}

/// One drawn matrix, stored without copying set atoms.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixAtom {
    Scalar(f64),
    Diag(DVector<f64>),
    /// Index into the model's `DiscreteSet`.
    SetIndex(usize),
    /// Index into the model's joint coupling atoms.
    JointIndex(usize),
    Dense(DMatrix<f64>),
}

// ---------------------------------------------------------------------------
// heavy-tailed input law
// ---------------------------------------------------------------------------

/// Spherical (directional) part of the input law, a probability measure on
/// the unit sphere of the model norm.
#[derive(Debug, Clone, PartialEq)]
pub enum SphericalLaw {
    Point(DVector<f64>),
    Discrete(Vec<(DVector<f64>, f64)>),
    Uniform,
}

impl SphericalLaw {
    fn validate_and_normalize(&mut self, dim: usize, norm: Norm) -> Result<()> {
        let fix_unit = |v: &mut DVector<f64>| -> Result<()> {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "direction has length {}, model dimension is {}",
                    v.len(),
                    dim
                )));
            }
            let n = norm.vec(v);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidParameter(format!(
                    "direction must be unit in the model norm (got |w| = {n})"
                )));
            }
            *v /= n;
            Ok(())
        };
        match self {
            SphericalLaw::Point(v) => fix_unit(v)?,
            SphericalLaw::Discrete(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::InvalidParameter("discrete spherical law is empty".into()));
                }
                for (v, _) in atoms.iter_mut() {
                    fix_unit(v)?;
                }
                let probs: Vec<f64> = atoms.iter().map(|(_, p)| *p).collect();
                validate_probs(&probs)?;
            }
            SphericalLaw::Uniform => {}
        }
        Ok(())
    }

    /// Atoms (direction, prob) when finitely supported.
    pub fn discrete_atoms(&self) -> Option<Vec<(DVector<f64>, f64)>> {
        match self {
            SphericalLaw::Point(v) => Some(vec![(v.clone(), 1.0)]),
            SphericalLaw::Discrete(atoms) => Some(atoms.clone()),
            SphericalLaw::Uniform => None,
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, norm: Norm, rng: &mut R, out: &mut DVector<f64>) {
        match self {
            SphericalLaw::Point(v) => out.copy_from(v),
            SphericalLaw::Discrete(atoms) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in atoms {
                    acc += p;
                    if u < acc {
                        out.copy_from(v);
                        return;
                    }
                }
                out.copy_from(&atoms[atoms.len() - 1].0);
            }
            SphericalLaw::Uniform => {
                // Gaussian direction, renormalized in the model norm.
                loop {
                    for i in 0..out.len() {
                        out[i] = StandardNormal.sample(rng);
                    }
                    let n = norm.vec(out);
                    if n > 1e-12 {
                        *out /= n;
                        return;
                    }
                }
            }
        }
    }
}

/// Radial part of the input law, with an exact power tail:
/// `P(R > t) = c_b t^{-alpha}` for all `t` above the scale (or threshold).
#[derive(Debug, Clone, PartialEq)]
pub enum RadialLaw {
    /// R = scale * U^{-1/alpha}: pure Pareto, P(R > t) = (scale/t)^alpha
    /// for t >= scale.
    ExactPareto { scale: f64 },
    /// With probability `tail_prob` a Pareto above `threshold`, otherwise a
    /// bounded body below it. P(R > t) = tail_prob * (threshold/t)^alpha
    /// for t >= threshold.
    BodyPlusPareto {
        threshold: f64,
        tail_prob: f64,
        body: ScalarDist,
    },
    /// R = value with probability one. No power tail; used for exact
    /// hand-checkable models and calibration runs.
    Degenerate { value: f64 },
}

impl RadialLaw {
    pub fn sample<R: Rng + ?Sized>(&self, alpha: f64, rng: &mut R) -> f64 {
        match self {
            RadialLaw::ExactPareto { scale } => {
                let u: f64 = rng.random();
                scale * (1.0 - u).powf(-1.0 / alpha)
            }
            RadialLaw::BodyPlusPareto {
                threshold,
                tail_prob,
                body,
            } => {
                let u: f64 = rng.random();
                if u < *tail_prob {
                    let v: f64 = rng.random();
                    threshold * (1.0 - v).powf(-1.0 / alpha)
                } else {
                    body.sample(rng)
                }
            }
            RadialLaw::Degenerate { value } => *value,
        }
    }

    /// Exact survival function P(R > t) for t at or above the power-tail
    /// onset.
    pub fn tail_survival(&self, alpha: f64, t: f64) -> f64 {
        match self {
            RadialLaw::ExactPareto { scale } => (scale / t).powf(alpha).min(1.0),
            RadialLaw::BodyPlusPareto {
                threshold,
                tail_prob,
                ..
            } => tail_prob * (threshold / t).powf(alpha).min(1.0),
            RadialLaw::Degenerate { .. } => 0.0,
        }
    }

    /// First value above which the survival is exactly a power function.
    pub fn tail_onset(&self) -> f64 {
        match self {
            RadialLaw::ExactPareto { scale } => *scale,
            RadialLaw::BodyPlusPareto { threshold, .. } => *threshold,
            RadialLaw::Degenerate { .. } => f64::INFINITY,
        }
    }

    /// E R^p in closed form; None when the power tail makes it infinite
    /// (p >= alpha).
    pub fn abs_moment(&self, alpha: f64, p: f64) -> Option<f64> {
        match self {
            RadialLaw::ExactPareto { scale } => {
                (p < alpha).then(|| scale.powf(p) * alpha / (alpha - p))
            }
            RadialLaw::BodyPlusPareto {
                threshold,
                tail_prob,
                body,
            } => {
                if p >= alpha {
                    return None;
                }
                let tail = tail_prob * threshold.powf(p) * alpha / (alpha - p);
                Some(tail + (1.0 - tail_prob) * body.abs_moment(p))
            }
            RadialLaw::Degenerate { value } => Some(value.powf(p)),
        }
    }
}

/// Law of the unperturbed input `B1 = R * Theta`: independent radial and
/// spherical parts with tail index `alpha` and tail constant `c_b`, so that
/// `t^alpha P(|B1| > t) = c_b` for all large `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyTailLaw {
    pub alpha: f64,
    pub c_b: f64,
    pub spherical: SphericalLaw,
    pub radial: RadialLaw,
}

impl HeavyTailLaw {
    /// Pure-Pareto radial part: the scale is pinned by `c_b = scale^alpha`.
    pub fn exact_pareto(alpha: f64, c_b: f64, spherical: SphericalLaw) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("tail index must be positive (got {alpha})")));
        }
        if !(c_b > 0.0 && c_b.is_finite()) {
            return Err(Error::InvalidParameter(format!("tail constant must be positive (got {c_b})")));
        }
        Ok(HeavyTailLaw {
            alpha,
            c_b,
            spherical,
            radial: RadialLaw::ExactPareto {
                scale: c_b.powf(1.0 / alpha),
            },
        })
    }

    /// Bounded body below `threshold`, Pareto above it; the mixture weight
    /// is pinned by `c_b = tail_prob * threshold^alpha`.
    pub fn body_plus_pareto(
        alpha: f64,
        c_b: f64,
        spherical: SphericalLaw,
        threshold: f64,
        body: ScalarDist,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("tail index must be positive (got {alpha})")));
        }
        if !(c_b > 0.0 && c_b.is_finite()) {
            return Err(Error::InvalidParameter(format!("tail constant must be positive (got {c_b})")));
        }
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::InvalidParameter("threshold must be positive".into()));
        }
        let tail_prob = c_b / threshold.powf(alpha);
        if !(tail_prob > 0.0 && tail_prob <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "c_b = {c_b} and threshold = {threshold} give tail probability {tail_prob} outside (0, 1]"
            )));
        }
        body.validate()?;
        if body.min_value() < 0.0 {
            return Err(Error::InvalidParameter("radial body must be nonnegative".into()));
        }
        match body.abs_bound() {
            Some(b) if b <= threshold => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "radial body must be bounded by the threshold".into(),
                ))
            }
        }
        Ok(HeavyTailLaw {
            alpha,
            c_b,
            spherical,
            radial: RadialLaw::BodyPlusPareto {
                threshold,
                tail_prob,
                body,
            },
        })
    }

    /// Input with a fixed radius: B1 = value * Theta. The tail constant is
    /// zero (there is no power tail); `alpha` is kept as a label so that
    /// code reading `law.alpha` stays well defined.
    pub fn degenerate(alpha: f64, value: f64, spherical: SphericalLaw) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("tail index must be positive (got {alpha})")));
        }
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::InvalidParameter("degenerate radius must be finite and nonnegative".into()));
        }
        Ok(HeavyTailLaw {
            alpha,
            c_b: 0.0,
            spherical,
            radial: RadialLaw::Degenerate { value },
        })
    }
}

// ---------------------------------------------------------------------------
// perturbation and shifts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum PerturbDirection {
    /// B2(x) points along a fixed unit vector.
    Fixed(DVector<f64>),
    /// B2(x) points along x/|x|.
    Radial,
}

/// State-dependent input component `B2(x) = B3 * min(|x|, clip)^delta0 * u`,
/// with `B3` drawn fresh each step. The clip keeps `|B2|` bounded, and
/// `|B2(x)| <= B3 |x|^delta0` holds for `|x| <= clip`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationLaw {
    pub b3: ScalarDist,
    pub delta0: f64,
    pub clip: f64,
    pub direction: PerturbDirection,
}

impl PerturbationLaw {
    fn validate(&self, dim: usize, norm: Norm) -> Result<()> {
        self.b3.validate()?;
        if self.b3.min_value() < 0.0 {
            return Err(Error::InvalidParameter("perturbation magnitude law must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.delta0) {
            return Err(Error::InvalidParameter(format!(
                "delta0 must lie in [0, 1) (got {})",
                self.delta0
            )));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::InvalidParameter("clip must be positive and finite".into()));
        }
        if let PerturbDirection::Fixed(u) = &self.direction {
            if u.len() != dim {
                return Err(Error::DimensionMismatch("perturbation direction length".into()));
            }
            let n = norm.vec(u);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidParameter("perturbation direction must be unit".into()));
            }
        }
        Ok(())
    }

    /// Uniform bound on |B2(x)| over all x, when the magnitude law is
    /// bounded.
    pub fn uniform_bound(&self) -> Option<f64> {
        let clip_pow = if self.delta0 == 0.0 {
            1.0
        } else {
            self.clip.powf(self.delta0)
        };
        self.b3.abs_bound().map(|b| b * clip_pow)
    }
}

/// Independent per-coordinate law of a random vector (used for the additive
/// shift of the max-shift kind).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorLaw(pub Vec<ScalarDist>);

impl VectorLaw {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.0.len() != dim {
            return Err(Error::DimensionMismatch("shift law length".into()));
        }
        for d in &self.0 {
            d.validate()?;
        }
        Ok(())
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut DVector<f64>) {
        for (i, d) in self.0.iter().enumerate() {
            out[i] = d.sample(rng);
        }
    }

    pub fn abs_bound(&self) -> Option<f64> {
        self.0
            .iter()
            .map(|d| d.abs_bound())
            .try_fold(0.0_f64, |m, b| b.map(|b| m.max(b)))
    }
}

// ---------------------------------------------------------------------------
// model kind, coupling, model
// ---------------------------------------------------------------------------

pub type CustomPhi = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// The dilation-commuting map Phi.
#[derive(Clone)]
pub enum ModelKind {
    /// Phi(x, y) = x + y.
    Affine,
    /// Phi(x, y) = coordinatewise max(x, y).
    Extremal,
    /// Phi(x, (y, c)) = max(x, y) + c, with c drawn from `shift`.
    MaxShift { shift: VectorLaw },
    /// Affine with the perturbation B2 active.
    AffinePerturbed,
    /// Arbitrary user map, for diagnostics (not serializable).
    Custom { phi: CustomPhi },
}

impl fmt::Debug for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Affine => write!(f, "Affine"),
            ModelKind::Extremal => write!(f, "Extremal"),
            ModelKind::MaxShift { .. } => write!(f, "MaxShift"),
            ModelKind::AffinePerturbed => write!(f, "AffinePerturbed"),
            ModelKind::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Affine => "affine",
            ModelKind::Extremal => "extremal",
            ModelKind::MaxShift { .. } => "max_shift",
            ModelKind::AffinePerturbed => "affine_perturbed",
            ModelKind::Custom { .. } => "custom",
        }
    }
}

/// Dependence between the matrix and the input direction.
///
/// Under joint coupling, one categorical draw selects a (matrix, direction)
/// pair; the radial part stays independent, so the input keeps its exact
/// power tail and the marginal matrix law is the discrete set of the pair
/// matrices.
#[derive(Debug, Clone)]
pub enum Coupling {
    Independent,
    JointDiscrete(Vec<JointAtom>),
}

#[derive(Debug, Clone)]
pub struct JointAtom {
    pub matrix: DMatrix<f64>,
    pub direction: DVector<f64>,
    pub prob: f64,
}

/// One realized step: the drawn matrix, the drawn unperturbed input, the
/// drawn perturbation magnitude and (for max-shift) the drawn shift.
///
/// A step sample is a function-free record: re-applying it to any state is
/// deterministic, and re-drawing from the same stream reproduces it bit for
/// bit. `stream_id`/`step_index` record where in the stream space it came
/// from.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub a: MatrixAtom,
    pub b1: DVector<f64>,
    pub b3: f64,
    pub shift: Option<DVector<f64>>,
    pub stream_id: u64,
    pub step_index: u64,
}

impl StepSample {
    pub fn zero(dim: usize) -> Self {
        StepSample {
            a: MatrixAtom::Scalar(0.0),
            b1: DVector::zeros(dim),
            b3: 0.0,
            shift: None,
            stream_id: 0,
            step_index: 0,
        }
    }
}

/// Full specification of the recursion.
#[derive(Debug, Clone)]
pub struct RecursionModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub norm: Norm,
    pub matrix_law: MatrixLaw,
    pub input_law: HeavyTailLaw,
    pub perturbation: Option<PerturbationLaw>,
    pub coupling: Coupling,
}

impl RecursionModel {
    /// Validates every component against every other and returns the model.
    pub fn new(
        kind: ModelKind,
        dim: usize,
        norm: Norm,
        matrix_law: MatrixLaw,
        mut input_law: HeavyTailLaw,
        perturbation: Option<PerturbationLaw>,
        coupling: Coupling,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        matrix_law.validate(dim)?;
        input_law.spherical.validate_and_normalize(dim, norm)?;
        match &kind {
            ModelKind::MaxShift { shift } => shift.validate(dim)?,
            ModelKind::AffinePerturbed => {
                if perturbation.is_none() {
                    return Err(Error::InvalidParameter(
                        "affine_perturbed requires a perturbation law".into(),
                    ));
                }
            }
            _ => {
                if perturbation.is_some() {
                    return Err(Error::InvalidParameter(
                        "perturbation law is only meaningful for affine_perturbed".into(),
                    ));
                }
            }
        }
        if let Some(p) = &perturbation {
            p.validate(dim, norm)?;
        }
        if let Coupling::JointDiscrete(atoms) = &coupling {
            if atoms.is_empty() {
                return Err(Error::InvalidParameter("joint coupling atoms are empty".into()));
            }
            let probs: Vec<f64> = atoms.iter().map(|a| a.prob).collect();
            validate_probs(&probs)?;
            for a in atoms {
                check_square(&a.matrix, dim)?;
                if a.direction.len() != dim {
                    return Err(Error::DimensionMismatch("joint coupling direction length".into()));
                }
                let n = norm.vec(&a.direction);
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::InvalidParameter(
                        "joint coupling directions must be unit in the model norm".into(),
                    ));
                }
            }
        }
        Ok(RecursionModel {
            kind,
            dim,
            norm,
            matrix_law,
            input_law,
            perturbation,
            coupling,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.input_law.alpha
    }

    /// Short hex digest of the model structure, for run manifests and
    /// ensemble metadata. Custom maps hash by kind only.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!(
            "{:?}|{}|{:?}|{:?}|{:?}|{:?}|{:?}",
            self.kind,
            self.dim,
            self.norm,
            self.matrix_law,
            self.input_law,
            self.perturbation,
            self.coupling
        ));
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The marginal law of A, folding joint coupling atoms into a discrete
    /// set.
    pub fn effective_matrix_law(&self) -> MatrixLaw {
        match &self.coupling {
            Coupling::Independent => self.matrix_law.clone(),
            Coupling::JointDiscrete(atoms) => MatrixLaw::DiscreteSet(
                atoms.iter().map(|a| (a.matrix.clone(), a.prob)).collect(),
            ),
        }
    }

    /// Draws A, B1, the perturbation magnitude and (if applicable) the
    /// shift into `step`, reusing its buffers.
    pub fn draw_step_into<R: Rng + ?Sized>(&self, rng: &mut R, step: &mut StepSample) {
        match &self.coupling {
            Coupling::Independent => {
                self.draw_matrix_into(rng, &mut step.a);
                self.input_law
                    .spherical
                    .sample_into(self.norm, rng, &mut step.b1);
            }
            Coupling::JointDiscrete(atoms) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut idx = atoms.len() - 1;
                for (i, a) in atoms.iter().enumerate() {
                    acc += a.prob;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                step.a = MatrixAtom::JointIndex(idx);
                step.b1.copy_from(&atoms[idx].direction);
            }
        }
        let r = self.input_law.radial.sample(self.input_law.alpha, rng);
        step.b1 *= r;
        step.b3 = match &self.perturbation {
            Some(p) => p.b3.sample(rng),
            None => 0.0,
        };
        if let ModelKind::MaxShift { shift } = &self.kind {
            let buf = step
                .shift
                .get_or_insert_with(|| DVector::zeros(self.dim));
            shift.sample_into(rng, buf);
        }
    }

    fn draw_matrix_into<R: Rng + ?Sized>(&self, rng: &mut R, atom: &mut MatrixAtom) {
        match &self.matrix_law {
            MatrixLaw::DeterministicScalar(a) => *atom = MatrixAtom::Scalar(*a),
            MatrixLaw::DeterministicMatrix(_) => *atom = MatrixAtom::SetIndex(0),
            MatrixLaw::DiscreteSet(set) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut idx = set.len() - 1;
                for (i, (_, p)) in set.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                *atom = MatrixAtom::SetIndex(idx);
            }
            MatrixLaw::DiagonalIid(entries) => {
                match atom {
                    MatrixAtom::Diag(d) if d.len() == self.dim => {
                        for (i, e) in entries.iter().enumerate() {
                            d[i] = e.sample(rng);
                        }
                    }
                    _ => {
                        let d = DVector::from_fn(self.dim, |i, _| entries[i].sample(rng));
                        *atom = MatrixAtom::Diag(d);
                    }
                }
            }
            MatrixLaw::ScalarLaw(dist) => *atom = MatrixAtom::Scalar(dist.sample(rng)),
        }
    }

    /// out = A x for the drawn atom.
    pub fn mat_vec(&self, atom: &MatrixAtom, x: &DVector<f64>, out: &mut DVector<f64>) {
        match atom {
            MatrixAtom::Scalar(s) => {
                out.copy_from(x);
                *out *= *s;
            }
            MatrixAtom::Diag(d) => {
                for i in 0..x.len() {
                    out[i] = d[i] * x[i];
                }
            }
            MatrixAtom::SetIndex(i) => {
                let m = self.set_matrix(*i);
                out.gemv(1.0, m, x, 0.0);
            }
            MatrixAtom::JointIndex(i) => match &self.coupling {
                Coupling::JointDiscrete(atoms) => out.gemv(1.0, &atoms[*i].matrix, x, 0.0),
                Coupling::Independent => unreachable!("joint atom without joint coupling"),
            },
            MatrixAtom::Dense(m) => out.gemv(1.0, m, x, 0.0),
        }
    }

    fn set_matrix(&self, i: usize) -> &DMatrix<f64> {
        match &self.matrix_law {
            MatrixLaw::DeterministicMatrix(m) => m,
            MatrixLaw::DiscreteSet(set) => &set[i].0,
            _ => unreachable!("set index without a matrix set"),
        }
    }

    /// Applies a realized step: out = Phi(A x, B(x)).
    pub fn apply_step(&self, step: &StepSample, x: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.kind {
            ModelKind::Affine => {
                self.mat_vec(&step.a, x, out);
                *out += &step.b1;
            }
            ModelKind::AffinePerturbed => {
                let xnorm = self.norm.vec(x);
                self.mat_vec(&step.a, x, out);
                *out += &step.b1;
                self.add_perturbation(step.b3, xnorm, x, out);
            }
            ModelKind::Extremal => {
                self.mat_vec(&step.a, x, out);
                for i in 0..self.dim {
                    out[i] = out[i].max(step.b1[i]);
                }
            }
            ModelKind::MaxShift { .. } => {
                self.mat_vec(&step.a, x, out);
                for i in 0..self.dim {
                    out[i] = out[i].max(step.b1[i]);
                }
                if let Some(c) = &step.shift {
                    *out += c;
                }
            }
            ModelKind::Custom { phi } => {
                let mut ax = DVector::zeros(self.dim);
                self.mat_vec(&step.a, x, &mut ax);
                out.copy_from(&phi(&ax, &step.b1));
            }
        }
    }

    fn add_perturbation(&self, b3: f64, xnorm: f64, x: &DVector<f64>, out: &mut DVector<f64>) {
        let p = self.perturbation.as_ref().expect("perturbed kind has a law");
        let clipped = xnorm.min(p.clip);
        let magnitude = if p.delta0 == 0.0 {
            b3
        } else {
            b3 * clipped.powf(p.delta0)
        };
        if magnitude == 0.0 {
            return;
        }
        match &p.direction {
            PerturbDirection::Fixed(u) => out.axpy(magnitude, u, 1.0),
            PerturbDirection::Radial => {
                if xnorm > 0.0 {
                    out.axpy(magnitude / xnorm, x, 1.0);
                }
            }
        }
    }

    /// One random step from state `x`. Fails on non-finite output.
    pub fn step<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let mut step = StepSample::zero(self.dim);
        self.draw_step_into(rng, &mut step);
        let mut out = DVector::zeros(self.dim);
        self.apply_step(&step, x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 1,
                context: "single step produced a non-finite coordinate".into(),
            });
        }
        Ok(out)
    }

    /// Phi evaluated on explicit arguments (and shift, where the kind has
    /// one). Used by the homogeneity check and the tail-measure front end.
    pub fn phi(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        shift: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        match &self.kind {
            ModelKind::Affine | ModelKind::AffinePerturbed => x + y,
            ModelKind::Extremal => x.zip_map(y, f64::max),
            ModelKind::MaxShift { .. } => {
                let mut v = x.zip_map(y, f64::max);
                if let Some(c) = shift {
                    v += c;
                }
                v
            }
            ModelKind::Custom { phi } => phi(x, y),
        }
    }

    /// Phi(0, w): the image of a pure input.
    pub fn phi_zero_input(&self, w: &DVector<f64>) -> DVector<f64> {
        let zero = DVector::zeros(self.dim);
        self.phi(&zero, w, Some(&zero))
    }

    /// Phi(x, 0): identity on states for affine kinds; clamps for extremal
    /// kinds.
    pub fn phi_state_only(&self, x: &DVector<f64>) -> DVector<f64> {
        let zero = DVector::zeros(self.dim);
        self.phi(x, &zero, Some(&zero))
    }
}

// ---------------------------------------------------------------------------
// homogeneity check
// ---------------------------------------------------------------------------

/// Worst observed violation of Phi(t x, t y) = t Phi(x, y).
#[derive(Debug, Clone)]
pub struct HomogeneityReport {
    pub max_abs_violation: f64,
    pub max_rel_violation: f64,
    /// (t, x, y, absolute violation) at the worst offender.
    pub worst: Option<(f64, DVector<f64>, DVector<f64>, f64)>,
    pub ok: bool,
}

/// Probes dilation-commutation of the model's Phi on `n_samples` random
/// argument pairs plus the origin pair, across `t_grid`.
///
/// Relative violations are measured against `t * (1 + |Phi(x, y)|)` in the
/// model norm, so the report is meaningful at the origin too.
pub fn check_homogeneity<R: Rng + ?Sized>(
    model: &RecursionModel,
    n_samples: usize,
    t_grid: &[f64],
    rng: &mut R,
) -> HomogeneityReport {
    let d = model.dim;
    let mut max_abs = 0.0_f64;
    let mut max_rel = 0.0_f64;
    let mut worst = None;

    let mut pairs: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> =
        Vec::with_capacity(n_samples + 1);
    pairs.push((DVector::zeros(d), DVector::zeros(d), DVector::zeros(d)));
    for _ in 0..n_samples {
        let x = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let y = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let c = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        pairs.push((x, y, c));
    }

    for (x, y, c) in &pairs {
        let base = model.phi(x, y, Some(c));
        for &t in t_grid {
            let scaled_args = model.phi(&(x * t), &(y * t), Some(&(c * t)));
            let scaled_base = &base * t;
            let abs = model.norm.vec(&(&scaled_args - &scaled_base));
            let rel = abs / (t.abs() * (1.0 + model.norm.vec(&base)));
            if abs > max_abs {
                max_abs = abs;
                worst = Some((t, x.clone(), y.clone(), abs));
            }
            max_rel = max_rel.max(rel);
        }
    }

    HomogeneityReport {
        max_abs_violation: max_abs,
        max_rel_violation: max_rel,
        worst,
        ok: max_rel <= HOMOGENEITY_TOL,
    }
}

// ---------------------------------------------------------------------------
// convenience constructors for common models
// ---------------------------------------------------------------------------

/// Scalar affine model X_n = a X_{n-1} + B_n with B = R Theta,
/// R exact Pareto(alpha, c_b), Theta = +1.
pub fn scalar_affine(a: f64, alpha: f64, c_b: f64) -> Result<RecursionModel> {
    RecursionModel::new(
        ModelKind::Affine,
        1,
        Norm::Euclidean,
        MatrixLaw::DeterministicScalar(a),
        HeavyTailLaw::exact_pareto(alpha, c_b, SphericalLaw::Point(DVector::from_vec(vec![1.0])))?,
        None,
        Coupling::Independent,
    )
}

/// Scalar model with constant coefficient a and constant input b, for
/// exact hand-checkable trajectories.
pub fn scalar_constant_input(kind: ModelKind, a: f64, b: f64) -> Result<RecursionModel> {
    RecursionModel::new(
        kind,
        1,
        Norm::Euclidean,
        MatrixLaw::DeterministicScalar(a),
        HeavyTailLaw::degenerate(1.0, b, SphericalLaw::Point(DVector::from_vec(vec![1.0])))?,
        None,
        Coupling::Independent,
    )
}

/// Scalar extremal model X_n = max(a X_{n-1}, B_n), same input law.
pub fn scalar_extremal(a: f64, alpha: f64, c_b: f64) -> Result<RecursionModel> {
    RecursionModel::new(
        ModelKind::Extremal,
        1,
        Norm::Euclidean,
        MatrixLaw::DeterministicScalar(a),
        HeavyTailLaw::exact_pareto(alpha, c_b, SphericalLaw::Point(DVector::from_vec(vec![1.0])))?,
        None,
        Coupling::Independent,
    )
}

/// The two-dimensional benchmark with random diagonal matrices
/// diag(2, 1/3) and diag(1/3, 2), equiprobable, and input directions split
/// evenly between the coordinate axes.
pub fn benchmark_2d(alpha: f64, c_b: f64, norm: Norm) -> Result<RecursionModel> {
    let m1 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0 / 3.0]));
    let m2 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / 3.0, 2.0]));
    let e1 = DVector::from_vec(vec![1.0, 0.0]);
    let e2 = DVector::from_vec(vec![0.0, 1.0]);
    RecursionModel::new(
        ModelKind::Affine,
        2,
        norm,
        MatrixLaw::DiscreteSet(vec![(m1, 0.5), (m2, 0.5)]),
        HeavyTailLaw::exact_pareto(
            alpha,
            c_b,
            SphericalLaw::Discrete(vec![(e1, 0.5), (e2, 0.5)]),
        )?,
        None,
        Coupling::Independent,
    )
}
