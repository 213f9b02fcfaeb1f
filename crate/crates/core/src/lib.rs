//! Model-based derivative-free optimization in randomized subspaces.
//!
//! This crate implements a trust-region solver for nonlinear least-squares
//! problems `min_x sum_i f_i(x)^2` where only the residual vector is
//! observable (no derivatives). Per iteration the solver samples a random
//! subset of directions from an orthonormal frame adapted to the history of
//! evaluated points, builds quadratic interpolation models restricted to the
//! sampled subspace, and combines them with sketch-and-project running
//! estimates of the residual gradients and Hessians. The subset sampling
//! probabilities are chosen to minimize the variance of the resulting
//! gradient estimator, so cheap iterations (few new evaluations) can be
//! taken without losing the trust-region convergence machinery.
//!
//! Module map:
//!
//! - [`linalg`]: dense kernels (updatable QR factorizations, bidiagonal
//!   singular values, pivot-checked Cholesky).
//! - [`model`]: polynomial interpolation bases and the constrained
//!   minimum-norm model solves.
//! - [`geometry`]: the evaluation bank, subspace identification, and
//!   interpolation-set selection.
//! - [`sketch`]: sampling probabilities, subset realization, and the
//!   averaged/ameliorated gradient and Hessian estimators.
//! - [`trust_region`]: the trust-region subproblem and radius management.
//! - [`solver`]: the full iteration loop (randomized and deterministic).
//! - [`problems`]: scalable least-squares test problems and the counting
//!   evaluation oracle.
//! - [`bench`]: data profiles, performance profiles, and campaign running.

pub mod bench;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod problems;
pub mod sketch;
pub mod solver;
pub mod trust_region;
