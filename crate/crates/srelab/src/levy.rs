//! Closed forms for the radial integrals behind alpha-stable
//! characteristic exponents.
//!
//! Throughout, the radial measure on (0, infinity) is `alpha r^{-1-alpha} dr`
//! (the normalization under which the mass above radius r is exactly
//! r^{-alpha}). The three compensation regimes match the three branches of
//! the limit exponent: none for alpha below one, the bounded kernel
//! `icr/(1+r^2)` at one, and the full linear term above one.

use num_complex::Complex64;
use statrs::consts::EULER_MASCHERONI;
use statrs::function::gamma::gamma;

/// `alpha * Gamma(-alpha)`, computed from positive-argument gamma values
/// on both sides of the pole at alpha = 1.
fn alpha_gamma_neg(alpha: f64) -> f64 {
    if alpha < 1.0 {
        -gamma(1.0 - alpha)
    } else {
        gamma(2.0 - alpha) / (alpha - 1.0)
    }
}

/// The compensated exponential integral against `alpha r^{-1-alpha} dr`:
///
/// * alpha in (0,1):  integral of (e^{icr} - 1),
/// * alpha = 1:       integral of (e^{icr} - 1 - icr/(1+r^2)),
/// * alpha in (1,2):  integral of (e^{icr} - 1 - icr),
///
/// each over r in (0, infinity). All three have classical closed forms:
/// `alpha Gamma(-alpha) |c|^alpha e^{-i pi alpha sgn(c)/2}` off alpha = 1,
/// and `-pi|c|/2 + ic(1 - gamma_E - log|c|)` at alpha = 1.
pub(crate) fn levy_exponential_integral(alpha: f64, c: f64) -> Complex64 {
    debug_assert!(alpha > 0.0 && alpha < 2.0);
    if c == 0.0 {
        return Complex64::ZERO;
    }
    if alpha == 1.0 {
        let re = -std::f64::consts::FRAC_PI_2 * c.abs();
        let im = c * (1.0 - EULER_MASCHERONI - c.abs().ln());
        return Complex64::new(re, im);
    }
    let mag = alpha_gamma_neg(alpha) * c.abs().powf(alpha);
    let phase = -c.signum() * std::f64::consts::FRAC_PI_2 * alpha;
    mag * Complex64::new(phase.cos(), phase.sin())
}

/// The cosine integral `integral of (cos r - 1) alpha r^{-1-alpha} dr`
/// over (0, infinity): the real part of [`levy_exponential_integral`] at
/// c = 1, strictly negative on all of (0, 2).
pub(crate) fn cosine_integral_constant(alpha: f64) -> f64 {
    debug_assert!(alpha > 0.0 && alpha < 2.0);
    if alpha == 1.0 {
        -std::f64::consts::FRAC_PI_2
    } else {
        alpha_gamma_neg(alpha) * (std::f64::consts::FRAC_PI_2 * alpha).cos()
    }
}

/// Adaptive Simpson integration of a complex-valued function, used as an
/// independent oracle against the closed forms. Splits until the local
/// Richardson error estimate is below the local tolerance share.
pub(crate) fn adaptive_simpson<F: Fn(f64) -> Complex64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
) -> Complex64 {
    fn simpson(fa: Complex64, fm: Complex64, fb: Complex64, h: f64) -> Complex64 {
        (fa + 4.0 * fm + fb) * (h / 6.0)
    }
    fn recurse<F: Fn(f64) -> Complex64>(
        f: &F,
        a: f64,
        b: f64,
        fa: Complex64,
        fm: Complex64,
        fb: Complex64,
        whole: Complex64,
        tol: f64,
        depth: u32,
    ) -> Complex64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let err = left + right - whole;
        if depth == 0 || err.norm() <= 15.0 * tol {
            return left + right + err / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Integrates `f` over panels `[nodes[i], nodes[i+1]]` adaptively; useful
/// when the integrand oscillates, so each panel sees few periods.
pub(crate) fn panelled_simpson<F: Fn(f64) -> Complex64>(
    f: &F,
    nodes: &[f64],
    tol_per_panel: f64,
) -> Complex64 {
    nodes
        .windows(2)
        .map(|w| adaptive_simpson(f, w[0], w[1], tol_per_panel))
        .sum()
}
