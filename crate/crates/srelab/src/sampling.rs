//! Chain simulation: forward paths, backward paths, stationary ensembles
//! and partial sums.
//!
//! The stationary law is sampled through the backward composition
//! Y_n = Phi_1(Phi_2(... Phi_n(0))), which converges pathwise under the
//! gamma-moment contraction measured by the contraction module. The burn
//! length n comes from [`plan_stationary`], which turns the fitted (C, rho)
//! into the smallest n whose predicted residual bias meets a declared
//! budget.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::contraction::estimate_gamma_geometric;
use crate::error::{Error, Result};
use crate::model::{ModelKind, PerturbDirection, RecursionModel, StepSample};
use crate::rng::{pairwise_mean, Domain, StreamFactory};

/// Order in which the step maps were composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// states[k] = Phi_k(states[k-1]): new maps applied on the outside.
    Forward,
    /// states[k] = Phi_1 ∘ ... ∘ Phi_k(x0): new maps applied on the inside.
    Backward,
}

/// One realized chain, state by state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// x0 first, then one state per step; length n + 1.
    pub states: Vec<DVector<f64>>,
    /// Stream id of the generator that produced the steps.
    pub seed: u64,
    pub direction: Direction,
}

impl Trajectory {
    pub fn endpoint(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least the start state")
    }
}

/// Ensemble provenance, written alongside every CSV export.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleMeta {
    pub model_hash: String,
    /// Chain length behind each point.
    pub n: usize,
    /// Forward steps discarded before recording; zero for the backward
    /// construction, which needs no warm-up.
    pub burn_in: usize,
    /// Master seed of the stream factory.
    pub seed: u64,
    pub direction: Direction,
}

/// Independent draws approximating the stationary law.
#[derive(Debug, Clone)]
pub struct SampleEnsemble {
    pub points: Vec<DVector<f64>>,
    /// Model-norm of each point, in the same order.
    pub norms: Vec<f64>,
    pub meta: EnsembleMeta,
}

impl SampleEnsemble {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, DVector::len)
    }
}

/// Independent realizations of S_n = X_1 + ... + X_n from a common start.
#[derive(Debug, Clone)]
pub struct PartialSumBatch {
    pub sums: Vec<DVector<f64>>,
    pub n: usize,
    pub start: DVector<f64>,
}

fn check_finite(v: &DVector<f64>, step: usize, what: &str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            context: format!("{what} overflowed"),
        })
    }
}

/// Runs the chain forward: states[k] = Phi_k(states[k-1]), steps drawn in
/// order 1..n from `rng`.
pub fn forward_path(
    model: &RecursionModel,
    x0: &DVector<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let d = model.dim;
    if x0.len() != d {
        return Err(Error::DimensionMismatch("start point length".into()));
    }
    let seed = rng.get_stream();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    let mut step = StepSample::zero(d);
    let mut next = DVector::zeros(d);
    for k in 1..=n {
        model.draw_step_into(rng, &mut step);
        model.apply_step(&step, &states[k - 1], &mut next);
        check_finite(&next, k, "forward chain")?;
        states.push(next.clone());
    }
    Ok(Trajectory {
        states,
        seed,
        direction: Direction::Forward,
    })
}

/// Composes the same step sequence inside-out: states[k] is the image of
/// x0 under Phi_1 ∘ ... ∘ Phi_k. With the same `rng` state, the step
/// sequence is identical to [`forward_path`]'s, so states[n] matches the
/// forward endpoint in distribution (not pathwise).
pub fn backward_path(
    model: &RecursionModel,
    x0: &DVector<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let d = model.dim;
    if x0.len() != d {
        return Err(Error::DimensionMismatch("start point length".into()));
    }
    let seed = rng.get_stream();
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = StepSample::zero(d);
        model.draw_step_into(rng, &mut s);
        steps.push(s);
    }
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    let mut cur = DVector::zeros(d);
    let mut buf = DVector::zeros(d);
    for k in 1..=n {
        // Y_k applies step k first and step 1 last.
        cur.copy_from(x0);
        for i in (0..k).rev() {
            model.apply_step(&steps[i], &cur, &mut buf);
            std::mem::swap(&mut cur, &mut buf);
            check_finite(&cur, i + 1, "backward chain")?;
        }
        states.push(cur.clone());
    }
    Ok(Trajectory {
        states,
        seed,
        direction: Direction::Backward,
    })
}

/// Draws n steps, then folds them from the inside out, reusing the
/// caller's buffers. Returns Y_n only.
fn backward_endpoint(
    model: &RecursionModel,
    x0: &DVector<f64>,
    steps: &mut Vec<StepSample>,
    n: usize,
    rng: &mut ChaCha8Rng,
    cur: &mut DVector<f64>,
    buf: &mut DVector<f64>,
) -> Result<()> {
    let d = model.dim;
    if steps.len() != n {
        steps.clear();
        steps.extend(std::iter::repeat_with(|| StepSample::zero(d)).take(n));
    }
    for s in steps.iter_mut() {
        model.draw_step_into(rng, s);
    }
    cur.copy_from(x0);
    for i in (0..n).rev() {
        model.apply_step(&steps[i], cur, buf);
        std::mem::swap(cur, buf);
        check_finite(cur, i + 1, "backward chain")?;
    }
    Ok(())
}

/// Draws m independent copies of Y_n from start 0, one RNG stream per
/// replica. The caller picks n, normally from [`plan_stationary`].
pub fn stationary_ensemble(
    model: &RecursionModel,
    m: usize,
    n: usize,
    factory: &StreamFactory,
) -> Result<SampleEnsemble> {
    if m == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let d = model.dim;
    let zero = DVector::zeros(d);
    let points: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map_init(
            || (Vec::new(), DVector::zeros(d), DVector::zeros(d)),
            |(steps, cur, buf), i| {
                let mut rng = factory.stream(Domain::Stationary, i as u64);
                backward_endpoint(model, &zero, steps, n, &mut rng, cur, buf)?;
                Ok(cur.clone())
            },
        )
        .collect::<Result<_>>()?;
    let norms = points.iter().map(|p| model.norm.vec(p)).collect();
    Ok(SampleEnsemble {
        points,
        norms,
        meta: EnsembleMeta {
            model_hash: model.fingerprint(),
            n,
            burn_in: 0,
            seed: factory.master_seed(),
            direction: Direction::Backward,
        },
    })
}

/// Burn length chosen for a declared bias budget.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryPlan {
    /// Backward steps per replica.
    pub n: usize,
    /// Moment order the contraction was measured in.
    pub gamma: f64,
    pub rho_hat: f64,
    pub c_hat: f64,
    /// Upper bound on E|X_1|^gamma from start 0.
    pub step_moment: f64,
    /// C rho^n E|X_1|^gamma / (1 - rho) at the chosen n.
    pub predicted_bias: f64,
}

const MIN_BURN: usize = 8;
const MAX_BURN: usize = 1_000_000;
const PLAN_FIT_N: usize = 12;
const PLAN_FIT_PAIRS: usize = 2000;
const PLAN_MC: usize = 4096;

/// Upper bound on E|X_1|^gamma from start 0.
///
/// X_1 is Phi(0, B1) plus, depending on the kind, a shift or a
/// state-dependent input at 0. Each extra term is bounded through
/// subadditivity of t^gamma for gamma <= 1 and through
/// (a+b)^g <= 2^{g-1}(a^g + b^g) otherwise, so the result is a bound, not
/// an exact moment; it only enters the burn length logarithmically.
fn one_step_moment_bound(model: &RecursionModel, gamma: f64, factory: &StreamFactory) -> Result<f64> {
    let alpha = model.alpha();
    let radial = model
        .input_law
        .radial
        .abs_moment(alpha, gamma)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "E R^gamma is infinite at gamma = {gamma} (tail index {alpha}); lower gamma"
            ))
        })?;

    // E|Phi(0, Theta)|^gamma: exact over discrete atoms, Monte Carlo on a
    // bounded integrand otherwise.
    let dir_moment = match model.input_law.spherical.discrete_atoms() {
        Some(atoms) => atoms
            .iter()
            .map(|(v, p)| p * model.norm.vec(&model.phi_zero_input(v)).powf(gamma))
            .sum(),
        None => {
            let mut rng = factory.stream(Domain::Stationary, (1 << 56) - 1);
            let mut theta = DVector::zeros(model.dim);
            let vals: Vec<f64> = (0..PLAN_MC)
                .map(|_| {
                    model.input_law.spherical.sample_into(model.norm, &mut rng, &mut theta);
                    model.norm.vec(&model.phi_zero_input(&theta)).powf(gamma)
                })
                .collect();
            pairwise_mean(&vals)
        }
    };

    let mut terms = vec![radial * dir_moment];
    match &model.kind {
        ModelKind::MaxShift { shift } => {
            let mut rng = factory.stream(Domain::Stationary, (1 << 56) - 2);
            let mut c = DVector::zeros(model.dim);
            let vals: Vec<f64> = (0..PLAN_MC)
                .map(|_| {
                    shift.sample_into(&mut rng, &mut c);
                    model.norm.vec(&c).powf(gamma)
                })
                .collect();
            terms.push(pairwise_mean(&vals));
        }
        ModelKind::AffinePerturbed => {
            let p = model.perturbation.as_ref().expect("validated at construction");
            // B2(0) vanishes unless delta0 = 0, where min(|x|, clip)^0 = 1.
            if p.delta0 == 0.0 {
                let u_norm = match &p.direction {
                    PerturbDirection::Fixed(u) => model.norm.vec(u),
                    PerturbDirection::Radial => 1.0,
                };
                terms.push(p.b3.abs_moment(gamma) * u_norm.powf(gamma));
            }
        }
        _ => {}
    }

    let sum: f64 = terms.iter().sum();
    let k = terms.len() as f64;
    Ok(if gamma <= 1.0 { sum } else { k.powf(gamma - 1.0) * sum })
}

/// Fits the gamma-moment contraction and sizes the backward burn so that
/// the predicted residual bias C rho^n E|X_1|^gamma / (1 - rho) is below
/// `bias_budget`. Refuses models whose fitted contraction factor is not
/// below one.
pub fn plan_stationary(
    model: &RecursionModel,
    gamma: f64,
    bias_budget: f64,
    factory: &StreamFactory,
) -> Result<StationaryPlan> {
    if !(bias_budget > 0.0 && bias_budget.is_finite()) {
        return Err(Error::InvalidParameter("bias budget must be positive".into()));
    }
    let fit = estimate_gamma_geometric(model, gamma, PLAN_FIT_N, PLAN_FIT_PAIRS, factory)?;
    if fit.degenerate {
        return Ok(StationaryPlan {
            n: MIN_BURN,
            gamma,
            rho_hat: 0.0,
            c_hat: 0.0,
            step_moment: 0.0,
            predicted_bias: 0.0,
        });
    }
    if !(fit.rho_hat < 1.0) {
        return Err(Error::ContractivityPrecheck(format!(
            "fitted gamma-moment contraction factor {:.6} at gamma = {gamma} is not below 1",
            fit.rho_hat
        )));
    }
    let step_moment = one_step_moment_bound(model, gamma, factory)?;
    let scale = fit.c_hat * step_moment / (1.0 - fit.rho_hat);
    let n = if scale <= bias_budget {
        MIN_BURN
    } else {
        let raw = ((bias_budget / scale).ln() / fit.rho_hat.ln()).ceil();
        if !raw.is_finite() || raw > MAX_BURN as f64 {
            return Err(Error::InvalidParameter(format!(
                "bias budget {bias_budget} needs more than {MAX_BURN} backward steps \
                 (fitted contraction factor {:.6})",
                fit.rho_hat
            )));
        }
        (raw as usize).max(MIN_BURN)
    };
    Ok(StationaryPlan {
        n,
        gamma,
        rho_hat: fit.rho_hat,
        c_hat: fit.c_hat,
        step_moment,
        predicted_bias: scale * fit.rho_hat.powi(n as i32),
    })
}

/// m independent realizations of S_n = X_1 + ... + X_n started at x0, one
/// RNG stream per replica.
pub fn partial_sums(
    model: &RecursionModel,
    x0: &DVector<f64>,
    n: usize,
    m: usize,
    factory: &StreamFactory,
) -> Result<PartialSumBatch> {
    if n == 0 {
        return Err(Error::InvalidParameter("partial sums need n >= 1".into()));
    }
    if m == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let d = model.dim;
    if x0.len() != d {
        return Err(Error::DimensionMismatch("start point length".into()));
    }
    let sums: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map_init(
            || (StepSample::zero(d), DVector::zeros(d), DVector::zeros(d)),
            |(step, x, next), j| {
                let mut rng = factory.stream(Domain::PartialSums, j as u64);
                x.copy_from(x0);
                let mut sum = DVector::zeros(d);
                for k in 1..=n {
                    model.draw_step_into(&mut rng, step);
                    model.apply_step(step, x, next);
                    check_finite(next, k, "partial-sum chain")?;
                    sum += &*next;
                    std::mem::swap(x, next);
                }
                check_finite(&sum, n, "partial sum")?;
                Ok(sum)
            },
        )
        .collect::<Result<_>>()?;
    Ok(PartialSumBatch {
        sums,
        n,
        start: x0.clone(),
    })
}

/// Two-sample Kolmogorov-Smirnov statistic sup_t |F_a(t) - F_b(t)|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0_f64;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        // Consume every copy of x from both sides before comparing, so
        // ties contribute a single evaluation point.
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Large-sample two-sided rejection threshold at the given level:
/// c(level) sqrt((na + nb) / (na nb)) with c = sqrt(-ln(level/2) / 2).
pub fn ks_critical(level: f64, na: usize, nb: usize) -> f64 {
    let c = (-(level / 2.0).ln() / 2.0).sqrt();
    c * ((na + nb) as f64 / (na as f64 * nb as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scalar_affine, scalar_constant_input, HeavyTailLaw, MatrixLaw, ModelKind, RecursionModel, ScalarDist, SphericalLaw, Coupling};
    use crate::linalg::Norm;

    fn factory() -> StreamFactory {
        StreamFactory::new(20240817)
    }

    fn one(v: f64) -> DVector<f64> {
        DVector::from_vec(vec![v])
    }

    /// Scalar chain with A in {0.2, 0.8} equiprobable and B = 1.
    fn two_point_constant_input() -> RecursionModel {
        RecursionModel::new(
            ModelKind::Affine,
            1,
            Norm::Euclidean,
            MatrixLaw::ScalarLaw(ScalarDist::Discrete {
                values: vec![0.2, 0.8],
                probs: vec![0.5, 0.5],
            }),
            HeavyTailLaw::degenerate(1.0, 1.0, SphericalLaw::Point(one(1.0))).unwrap(),
            None,
            Coupling::Independent,
        )
        .unwrap()
    }

    #[test]
    fn forward_affine_accumulates_geometrically() {
        let m = scalar_constant_input(ModelKind::Affine, 0.5, 1.0).unwrap();
        let mut rng = factory().stream(Domain::Forward, 0);
        let t = forward_path(&m, &one(0.0), 3, &mut rng).unwrap();
        let got: Vec<f64> = t.states.iter().map(|s| s[0]).collect();
        assert_eq!(got, vec![0.0, 1.0, 1.5, 1.75]);
        assert_eq!(t.direction, Direction::Forward);
    }

    #[test]
    fn forward_zero_steps_is_the_start_alone() {
        let m = scalar_constant_input(ModelKind::Affine, 0.5, 1.0).unwrap();
        let mut rng = factory().stream(Domain::Forward, 0);
        let t = forward_path(&m, &one(3.25), 0, &mut rng).unwrap();
        assert_eq!(t.states.len(), 1);
        assert_eq!(t.states[0][0], 3.25);
    }

    #[test]
    fn forward_extremal_hand_iteration() {
        let m = scalar_constant_input(ModelKind::Extremal, 0.5, 1.0).unwrap();
        let mut rng = factory().stream(Domain::Forward, 0);
        let t = forward_path(&m, &one(4.0), 2, &mut rng).unwrap();
        let got: Vec<f64> = t.states.iter().map(|s| s[0]).collect();
        assert_eq!(got, vec![4.0, 2.0, 1.0]);
    }

    #[test]
    fn overflow_reports_the_failing_step() {
        let m = scalar_constant_input(ModelKind::Affine, 3.0, 1e308).unwrap();
        let mut rng = factory().stream(Domain::Forward, 0);
        match forward_path(&m, &one(0.0), 5, &mut rng) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected a non-finite fault, got {other:?}"),
        }
    }

    #[test]
    fn backward_equals_forward_for_deterministic_models() {
        let m = scalar_constant_input(ModelKind::Affine, 0.5, 1.0).unwrap();
        let mut r1 = factory().stream(Domain::Forward, 0);
        let mut r2 = factory().stream(Domain::Forward, 0);
        let f = forward_path(&m, &one(0.0), 12, &mut r1).unwrap();
        let b = backward_path(&m, &one(0.0), 12, &mut r2).unwrap();
        for (a, c) in f.states.iter().zip(&b.states) {
            assert_eq!(a[0].to_bits(), c[0].to_bits());
        }
    }

    #[test]
    fn backward_single_step_matches_forward_pathwise() {
        let m = scalar_affine(0.5, 1.5, 1.0).unwrap();
        let mut r1 = factory().stream(Domain::Forward, 9);
        let mut r2 = factory().stream(Domain::Forward, 9);
        let f = forward_path(&m, &one(2.0), 1, &mut r1).unwrap();
        let b = backward_path(&m, &one(2.0), 1, &mut r2).unwrap();
        assert_eq!(f.states[1][0].to_bits(), b.states[1][0].to_bits());
    }

    #[test]
    fn backward_and_forward_endpoints_agree_in_distribution() {
        let m = two_point_constant_input();
        let n = 20;
        let reps = 20_000;
        let fac = factory();
        let fwd: Vec<f64> = (0..reps)
            .map(|i| {
                let mut rng = fac.stream(Domain::Forward, i);
                forward_path(&m, &one(0.0), n, &mut rng).unwrap().endpoint()[0]
            })
            .collect();
        let bwd: Vec<f64> = (0..reps)
            .map(|i| {
                let mut rng = fac.stream(Domain::Backward, i);
                backward_path(&m, &one(0.0), n, &mut rng).unwrap().endpoint()[0]
            })
            .collect();
        let d = ks_statistic(&fwd, &bwd).unwrap();
        assert!(
            d < ks_critical(0.01, fwd.len(), bwd.len()),
            "KS statistic {d} rejects forward/backward equality"
        );
    }

    #[test]
    fn backward_differences_decay_geometrically_pathwise() {
        let m = scalar_affine(0.5, 2.0, 1.0).unwrap();
        let fac = factory();
        let n = 16;
        // Bound the drawn inputs from a clone of the same stream.
        let mut probe = fac.stream(Domain::Backward, 3);
        let mut s = StepSample::zero(1);
        let mut bmax = 0.0_f64;
        for _ in 0..n {
            m.draw_step_into(&mut probe, &mut s);
            bmax = bmax.max(s.b1[0].abs());
        }
        let mut rng = fac.stream(Domain::Backward, 3);
        let t = backward_path(&m, &one(0.0), n, &mut rng).unwrap();
        for k in 0..n {
            let diff = (t.states[k + 1][0] - t.states[k][0]).abs();
            assert!(
                diff <= 0.5_f64.powi(k as i32) * bmax * (1.0 + 1e-12),
                "difference at k = {k} is {diff}, above the geometric envelope"
            );
        }
    }

    #[test]
    fn stationary_deterministic_chain_sits_at_the_fixed_point_approach() {
        let m = scalar_constant_input(ModelKind::Affine, 0.5, 1.0).unwrap();
        let e = stationary_ensemble(&m, 5, 10, &factory()).unwrap();
        let expect = 2.0 * (1.0 - 0.5_f64.powi(10));
        for p in &e.points {
            assert_eq!(p[0].to_bits(), expect.to_bits());
        }
        assert_eq!(e.norms[0], expect);
        assert_eq!(e.meta.burn_in, 0);
        assert_eq!(e.meta.direction, Direction::Backward);
    }

    #[test]
    fn stationary_rejects_an_empty_request() {
        let m = scalar_constant_input(ModelKind::Affine, 0.5, 1.0).unwrap();
        assert!(matches!(
            stationary_ensemble(&m, 0, 10, &factory()),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn plan_sizes_the_burn_for_the_budget() {
        let m = scalar_affine(0.5, 0.5, 1.0).unwrap();
        let plan = plan_stationary(&m, 0.25, 1e-3, &factory()).unwrap();
        // Deterministic coefficient: the fitted factor is 0.5^0.25 exactly.
        assert!((plan.rho_hat - 0.5_f64.powf(0.25)).abs() < 1e-9);
        assert!((plan.c_hat - 1.0).abs() < 1e-9);
        // E R^0.25 = 0.5 / (0.5 - 0.25) = 2 for the unit-scale power law.
        assert!((plan.step_moment - 2.0).abs() < 1e-9);
        assert!(plan.predicted_bias <= 1e-3);
        assert!((50..=70).contains(&plan.n), "burn length {} off target", plan.n);
    }

    #[test]
    fn plan_refuses_an_expanding_model() {
        let m = scalar_affine(1.1, 2.0, 1.0).unwrap();
        match plan_stationary(&m, 1.0, 1e-3, &factory()) {
            Err(Error::ContractivityPrecheck(_)) => {}
            other => panic!("expected a contractivity refusal, got {other:?}"),
        }
    }

    #[test]
    fn partial_sums_of_a_constant_chain_count_steps() {
        let m = scalar_constant_input(ModelKind::Affine, 0.0, 1.0).unwrap();
        let batch = partial_sums(&m, &one(0.0), 5, 3, &factory()).unwrap();
        for s in &batch.sums {
            assert_eq!(s[0], 5.0);
        }
    }

    #[test]
    fn partial_sums_match_the_hand_iterated_chain() {
        let m = scalar_constant_input(ModelKind::Affine, 0.5, 1.0).unwrap();
        let batch = partial_sums(&m, &one(0.0), 2, 2, &factory()).unwrap();
        for s in &batch.sums {
            assert_eq!(s[0], 2.5);
        }
    }

    #[test]
    fn partial_sums_scale_like_the_stable_normalization() {
        // alpha = 1/2: the stationary tail constant is c_b / (1 - a^alpha)
        // and a_n solves n c a_n^{-1/2} = 1, so a_n = (c n)^2.
        let m = scalar_affine(0.5, 0.5, 1.0).unwrap();
        let n = 500;
        let batch = partial_sums(&m, &one(0.0), n, 200, &factory()).unwrap();
        let c = 1.0 / (1.0 - 0.5_f64.powf(0.5));
        let a_n = (c * n as f64).powi(2);
        let mut scaled: Vec<f64> = batch.sums.iter().map(|s| s[0].abs() / a_n).collect();
        scaled.sort_by(f64::total_cmp);
        let median = scaled[scaled.len() / 2];
        assert!(scaled.iter().all(|v| v.is_finite()));
        assert!(
            (0.1..10.0).contains(&median),
            "median |S_n| / a_n = {median} is out of range"
        );
    }

    #[test]
    fn partial_sums_reject_degenerate_requests() {
        let m = scalar_constant_input(ModelKind::Affine, 0.5, 1.0).unwrap();
        assert!(partial_sums(&m, &one(0.0), 0, 3, &factory()).is_err());
        assert!(matches!(
            partial_sums(&m, &one(0.0), 3, 0, &factory()),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn ks_statistic_matches_a_hand_computation() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.5, 2.5];
        let d = ks_statistic(&a, &b).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
        let same = ks_statistic(&a, &a).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn ensembles_are_worker_count_invariant() {
        let m = scalar_affine(0.5, 1.5, 1.0).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let e = stationary_ensemble(&m, 64, 30, &factory()).unwrap();
                let s = partial_sums(&m, &one(0.0), 20, 32, &factory()).unwrap();
                (
                    e.points.iter().map(|p| p[0].to_bits()).collect::<Vec<_>>(),
                    s.sums.iter().map(|p| p[0].to_bits()).collect::<Vec<_>>(),
                )
            })
        };
        assert_eq!(run(1), run(3));
    }
}
