//! srelab: a laboratory for multivariate stochastic recursions with
//! heavy-tailed input.
//!
//! The object of study is the Markov chain
//!
//! ```text
//! X_n = Phi(A_n X_{n-1}, B_n(X_{n-1})),        X_0 = x,
//! ```
//!
//! where `Phi` commutes with dilations (`Phi(t x, t y) = t Phi(x, y)` for
//! `t > 0`), the `A_n` are i.i.d. random matrices and the input
//! `B_n(x) = B1_n + B2_n(x)` has a regularly varying unperturbed part `B1`
//! of index `alpha` and a small state-dependent perturbation `B2`.
//! Affine recursions (`Phi(x, y) = x + y`) and extremal recursions
//! (coordinatewise maximum) are the two built-in flagship cases.
//!
//! The crate provides:
//!
//! * exact-step simulation of forward and backward iterations and of the
//!   stationary law ([`sampling`]),
//! * contraction diagnostics: gamma-moment geometricity, top Lyapunov
//!   exponent, and the alpha-moment growth rate of matrix products
//!   ([`contraction`]),
//! * empirical tail statistics: Hill estimation, tail-constant fits,
//!   spherical exceedance laws and tail quantile tables ([`tail_stats`]),
//! * a particle construction of the stationary tail measure as a series of
//!   pushforward spherical measures ([`tail_measure`]),
//! * the alpha-stable limit apparatus for normalized partial sums:
//!   characteristic-function exponents, centerings and nondegeneracy
//!   certificates ([`stable_limit`]),
//! * a JSON-driven CLI with reproducible, worker-count-independent output
//!   ([`config`], [`cli`]).
//!
//! All Monte Carlo work is driven by counter-addressed ChaCha streams so
//! that every result is a pure function of `(config, seed)` regardless of
//! thread count.

pub mod cli;
pub mod config;
pub mod contraction;
pub mod error;
pub mod hypotheses;
pub mod linalg;
pub mod model;
pub mod output;
pub mod rng;
pub mod sampling;
pub mod stable_limit;
pub mod tail_measure;
pub mod tail_stats;

mod levy;

pub use error::{Error, Result};
