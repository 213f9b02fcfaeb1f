//! Polynomial interpolation bases and minimum-norm quadratic model solves.
//!
//! Models live in the monomial-like basis
//!
//! ```text
//! 1, y_1, ..., y_n,  y_1^2/2, ..., y_n^2/2,  y_1 y_2/sqrt(2), ..., y_{n-1} y_n/sqrt(2)
//! ```
//!
//! where the quadratic block (squares in index order, then pairs in
//! lexicographic order) is scaled so that the Euclidean norm of its
//! coefficient vector equals the Frobenius norm of the model Hessian. A
//! subspace with orthonormal rows `S` induces the reduced linear basis
//! `{1, s_1^T y, ..., s_p^T y}` and its complement `{t_1^T y, ...}`.
//!
//! Two constrained solves are provided. Both interpolate given values on a
//! point set and pick, among all interpolating quadratics, the one whose
//! curvature (and, for the sketched variant, out-of-subspace slope) moves
//! least from a prior:
//!
//! - [`solve_sketched`] restricts the fitted slope to the rows of `S`,
//!   leaves the complement slope `gamma` and curvature coefficients `beta`
//!   as regularized degrees of freedom, and solves the KKT system through a
//!   QR null-space reduction plus a Cholesky solve of the reduced Gram
//!   matrix.
//! - [`solve_min_norm_hessian`] is the full-space analogue (slope entirely
//!   free, curvature regularized) and is deliberately implemented through a
//!   different route, a direct LU factorization of the saddle system, so the
//!   two can cross-check each other when `S` spans everything.
//!
//! Gram matrices of the quadratic block are never materialized: for the
//! scaled basis, `phi(u)^T phi(v) = (u^T v)^2 / 4`, which the tests verify
//! against the explicit rectangular factors.

use crate::linalg::{
    cholesky_solve, cholesky_with_tol, min_singular_value, qr_factorize, singular_values,
    LinalgError,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Errors from model construction.
#[derive(Debug, Error)]
pub enum ModelError {
    /// The point set cannot pin down a unique model: the sketched linear
    /// part is rank deficient or the reduced curvature system is not
    /// positive definite.
    #[error("interpolation set is not poised: {reason}")]
    NotPoised { reason: String },
    /// Inconsistent dimensions between the subspace, points, and values.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl From<LinalgError> for ModelError {
    fn from(e: LinalgError) -> Self {
        ModelError::NotPoised {
            reason: e.to_string(),
        }
    }
}

/// A family of basis functions evaluated on displacement vectors in R^n.
#[derive(Debug, Clone)]
pub enum BasisSpec {
    /// `{1, y_1, ..., y_n}`.
    Linear(usize),
    /// `{1, y, squares/2, pairs/sqrt(2)}`: the full quadratic space.
    Quadratic(usize),
    /// `{1, s_1^T y, ..., s_p^T y}` for a `p x n` matrix with orthonormal rows.
    Sketched(DMatrix<f64>),
    /// `{t_1^T y, ...}` for the complement rows; no constant function.
    SketchComplement(DMatrix<f64>),
    /// The quadratic block alone: squares in index order, then pairs
    /// `(i, j)`, `i < j`, in lexicographic order.
    QuadraticComplement(usize),
}

impl BasisSpec {
    /// Ambient dimension n of the displacement vectors.
    pub fn dim(&self) -> usize {
        match self {
            BasisSpec::Linear(n) | BasisSpec::Quadratic(n) | BasisSpec::QuadraticComplement(n) => {
                *n
            }
            BasisSpec::Sketched(s) | BasisSpec::SketchComplement(s) => s.ncols(),
        }
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        match self {
            BasisSpec::Linear(n) => n + 1,
            BasisSpec::Quadratic(n) => 1 + n + n * (n + 1) / 2,
            BasisSpec::Sketched(s) => s.nrows() + 1,
            BasisSpec::SketchComplement(s) => s.nrows(),
            BasisSpec::QuadraticComplement(n) => n * (n + 1) / 2,
        }
    }

    /// True when the basis contains no functions (e.g. the complement of a
    /// full-rank sketch).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Evaluates every function of `spec` at the displacement `y`.
pub fn eval_basis(spec: &BasisSpec, y: &DVector<f64>) -> DVector<f64> {
    assert_eq!(y.len(), spec.dim(), "displacement has wrong dimension");
    match spec {
        BasisSpec::Linear(n) => {
            let mut v = DVector::zeros(n + 1);
            v[0] = 1.0;
            v.rows_mut(1, *n).copy_from(y);
            v
        }
        BasisSpec::Quadratic(n) => {
            let mut v = DVector::zeros(1 + n + n * (n + 1) / 2);
            v[0] = 1.0;
            v.rows_mut(1, *n).copy_from(y);
            let quad = eval_basis(&BasisSpec::QuadraticComplement(*n), y);
            v.rows_mut(1 + n, quad.len()).copy_from(&quad);
            v
        }
        BasisSpec::Sketched(s) => {
            let mut v = DVector::zeros(s.nrows() + 1);
            v[0] = 1.0;
            let sy = s * y;
            v.rows_mut(1, s.nrows()).copy_from(&sy);
            v
        }
        BasisSpec::SketchComplement(s) => s * y,
        BasisSpec::QuadraticComplement(n) => {
            let n = *n;
            let mut v = DVector::zeros(n * (n + 1) / 2);
            for i in 0..n {
                v[i] = 0.5 * y[i] * y[i];
            }
            let mut k = n;
            let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..n {
                for j in i + 1..n {
                    v[k] = y[i] * y[j] * inv_sqrt2;
                    k += 1;
                }
            }
            v
        }
    }
}

/// Stacks `eval_basis` rows for each point: the interpolation matrix
/// `M(spec, points)` with one row per point.
pub fn assemble_vandermonde(spec: &BasisSpec, points: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(points.len(), spec.len());
    for (i, y) in points.iter().enumerate() {
        let row = eval_basis(spec, y);
        for j in 0..row.len() {
            m[(i, j)] = row[j];
        }
    }
    m
}

/// Maps a symmetric Hessian to quadratic-block coefficients: diagonal
/// entries in index order, then `sqrt(2) * H_ij` for `i < j` lexicographic.
///
/// With this scaling `||coeffs|| = ||H||_F` and
/// `coeffs . phi_quad(y) = y^T H y / 2`.
pub fn hessian_to_coeffs(h: &DMatrix<f64>) -> DVector<f64> {
    let n = h.nrows();
    assert_eq!(n, h.ncols());
    let mut beta = DVector::zeros(n * (n + 1) / 2);
    for i in 0..n {
        beta[i] = h[(i, i)];
    }
    let mut k = n;
    let sqrt2 = std::f64::consts::SQRT_2;
    for i in 0..n {
        for j in i + 1..n {
            beta[k] = sqrt2 * h[(i, j)];
            k += 1;
        }
    }
    beta
}

/// Inverse of [`hessian_to_coeffs`].
pub fn coeffs_to_hessian(beta: &DVector<f64>, n: usize) -> DMatrix<f64> {
    assert_eq!(beta.len(), n * (n + 1) / 2);
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = beta[i];
    }
    let mut k = n;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in i + 1..n {
            h[(i, j)] = beta[k] * inv_sqrt2;
            h[(j, i)] = h[(i, j)];
            k += 1;
        }
    }
    h
}

/// A quadratic model `m(x) = c + g^T (x - x0) + (x - x0)^T H (x - x0) / 2`.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    /// Expansion point `x0`.
    pub center: DVector<f64>,
    /// Model value at the center.
    pub constant: f64,
    /// Gradient at the center.
    pub g: DVector<f64>,
    /// Symmetric Hessian.
    pub h: DMatrix<f64>,
}

impl QuadraticModel {
    /// Lipschitz constant of the model gradient: the spectral norm of `H`.
    pub fn gradient_lipschitz(&self) -> f64 {
        if self.h.nrows() == 0 {
            return 0.0;
        }
        singular_values(&self.h)
            .into_iter()
            .fold(0.0f64, f64::max)
    }
}

/// Model value at an arbitrary point.
pub fn model_value(m: &QuadraticModel, x: &DVector<f64>) -> f64 {
    let d = x - &m.center;
    m.constant + m.g.dot(&d) + 0.5 * d.dot(&(&m.h * &d))
}

/// Model gradient at an arbitrary point.
pub fn model_gradient(m: &QuadraticModel, x: &DVector<f64>) -> DVector<f64> {
    let d = x - &m.center;
    &m.g + &m.h * d
}

/// Conditioning diagnostics attached to each constrained solve.
#[derive(Debug, Clone, Copy)]
pub struct ConditioningDiag {
    /// Smallest singular value of the reduced curvature Gram matrix
    /// `N^T M M^T N` (`f64::INFINITY` when the null space is empty).
    pub reduced_sigma_min: f64,
    /// `1 / sigma_min` of the sketched seed displacement matrix (`NaN` when
    /// there are fewer than `p + 1` points to form it).
    pub seed_inverse_norm: f64,
}

/// Solution of the sketched interpolation problem.
#[derive(Debug, Clone)]
pub struct SketchSolveResult {
    /// Coefficients on `{1, s_1^T y, ..., s_p^T y}` (length `p + 1`).
    pub alpha: DVector<f64>,
    /// Coefficients on the quadratic block (length `n(n+1)/2`), including
    /// any prior contribution.
    pub beta: DVector<f64>,
    /// Coefficients on the complement directions (length `n - p`).
    pub gamma: DVector<f64>,
    /// Interpolation multipliers, one per point.
    pub lambda: DVector<f64>,
    /// Conditioning diagnostics.
    pub kappa_diag: ConditioningDiag,
}

/// Coefficient and multiplier part of a solve, without the curvature
/// assembly. `gamma` is empty for full-space systems.
#[derive(Debug, Clone)]
pub struct Multipliers {
    /// Coefficients on the constant-plus-linear block.
    pub alpha: DVector<f64>,
    /// Coefficients on the complement directions.
    pub gamma: DVector<f64>,
    /// Interpolation multipliers, one per point.
    pub lambda: DVector<f64>,
}

/// Solution of the full-space minimum-norm-Hessian problem.
#[derive(Debug, Clone)]
pub struct MnhSolveResult {
    /// Coefficients on `{1, y_1, ..., y_n}` (length `n + 1`).
    pub alpha: DVector<f64>,
    /// Coefficients on the quadratic block, including any prior contribution.
    pub beta: DVector<f64>,
    /// Interpolation multipliers, one per point.
    pub lambda: DVector<f64>,
}

/// Relative pivot floor, scaled by the trace, below which the reduced Gram
/// matrix counts as numerically semidefinite.
const REDUCED_PIVOT_RTOL: f64 = 1e-12;

/// Quadratic-block Gram entry without forming the block:
/// `phi(u)^T phi(v) = (u^T v)^2 / 4` in the scaled basis.
#[inline]
fn quad_kernel(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let d = u.dot(v);
    0.25 * d * d
}

/// Prior quadratic value `u^T H u / 2`, treating `None` as the zero prior.
#[inline]
fn prior_value(prior: Option<&DMatrix<f64>>, u: &DVector<f64>) -> f64 {
    match prior {
        Some(h) => 0.5 * u.dot(&(h * u)),
        None => 0.0,
    }
}

/// Factored sketched interpolation system for a fixed geometry.
///
/// Building the factorization is the expensive part (QR of the sketched
/// interpolation matrix, the Gram kernel, and a Cholesky of the reduced
/// system); [`SketchSystem::solve`] then handles any number of right-hand
/// sides, which is how the solver shares one geometry across all residual
/// components.
#[derive(Debug)]
pub struct SketchSystem {
    s: DMatrix<f64>,
    points: Vec<DVector<f64>>,
    /// Thin Q of `M(sketched, Y)`, `|Y| x (p+1)`.
    q_thin: DMatrix<f64>,
    /// Square R factor, `(p+1) x (p+1)`.
    r: DMatrix<f64>,
    /// Orthonormal basis of the left null space of `M(sketched, Y)`.
    null_basis: DMatrix<f64>,
    /// Gram kernel `K = M_perp M_perp^T` over the complement + quadratic block.
    kernel: DMatrix<f64>,
    /// Complement slopes of each point: column `i` holds `S_perp * u_i`.
    perp_coords: DMatrix<f64>,
    /// Lower Cholesky factor of `N^T K N` (empty when the null space is).
    reduced_chol: DMatrix<f64>,
    diag: ConditioningDiag,
}

impl SketchSystem {
    /// Factorizes the geometry defined by a sketch `S` (`p x n`, orthonormal
    /// rows), its complement `S_perp` (`(n-p) x n`), and the point set
    /// (already shifted so the model center is at the origin).
    ///
    /// Fails with [`ModelError::NotPoised`] when the sketched linear part is
    /// rank deficient or the reduced curvature system loses positive
    /// definiteness beyond `1e-12` of its trace.
    pub fn new(
        s: &DMatrix<f64>,
        s_perp: &DMatrix<f64>,
        points: &[DVector<f64>],
    ) -> Result<Self, ModelError> {
        let n = s.ncols();
        let p = s.nrows();
        if s_perp.nrows() + p != n || (s_perp.nrows() > 0 && s_perp.ncols() != n) {
            return Err(ModelError::DimensionMismatch(format!(
                "sketch is {p} x {n} but complement is {} x {}",
                s_perp.nrows(),
                s_perp.ncols()
            )));
        }
        if points.len() < p + 1 {
            return Err(ModelError::NotPoised {
                reason: format!(
                    "{} points cannot determine {} sketched coefficients",
                    points.len(),
                    p + 1
                ),
            });
        }
        for y in points {
            if y.len() != n {
                return Err(ModelError::DimensionMismatch(format!(
                    "point of dimension {} in an n = {n} problem",
                    y.len()
                )));
            }
        }

        let m_s = assemble_vandermonde(&BasisSpec::Sketched(s.clone()), points);
        let qr = qr_factorize(&m_s);
        let max_pivot = (0..p + 1).fold(0.0f64, |acc, j| acc.max(qr.r()[(j, j)].abs()));
        let tol = 1e-12 * max_pivot.max(1.0);
        for j in 0..p + 1 {
            if qr.r()[(j, j)].abs() <= tol {
                return Err(ModelError::NotPoised {
                    reason: format!(
                        "sketched interpolation matrix is rank deficient (pivot {:.3e} at {j})",
                        qr.r()[(j, j)]
                    ),
                });
            }
        }
        let q_thin = qr.range_basis();
        let r = qr.r().rows(0, p + 1).into_owned();
        let null_basis = qr.complement_basis();

        // Complement coordinates and the Gram kernel.
        let t = points.len();
        let mut perp_coords = DMatrix::zeros(s_perp.nrows(), t);
        for (i, u) in points.iter().enumerate() {
            if s_perp.nrows() > 0 {
                perp_coords.set_column(i, &(s_perp * u));
            }
        }
        let mut kernel = DMatrix::zeros(t, t);
        for i in 0..t {
            for j in 0..=i {
                let mut val = quad_kernel(&points[i], &points[j]);
                if s_perp.nrows() > 0 {
                    val += perp_coords.column(i).dot(&perp_coords.column(j));
                }
                kernel[(i, j)] = val;
                kernel[(j, i)] = val;
            }
        }

        let null_dim = null_basis.ncols();
        let (reduced_chol, reduced_sigma_min) = if null_dim > 0 {
            let reduced = null_basis.transpose() * &kernel * &null_basis;
            let floor = REDUCED_PIVOT_RTOL * reduced.trace().max(f64::MIN_POSITIVE);
            let chol = cholesky_with_tol(&reduced, floor).map_err(|e| ModelError::NotPoised {
                reason: format!("reduced curvature system is not positive definite ({e})"),
            })?;
            let sigma = min_singular_value(&reduced);
            (chol, sigma)
        } else {
            (DMatrix::zeros(0, 0), f64::INFINITY)
        };

        // Conditioning of the sketched seed: the first point is the center,
        // the next p span the sketch.
        let seed_inverse_norm = if p > 0 {
            let mut seed = DMatrix::zeros(p, p);
            for j in 0..p {
                seed.set_column(j, &(s * (&points[j + 1] - &points[0])));
            }
            let smin = min_singular_value(&seed);
            if smin > 0.0 {
                1.0 / smin
            } else {
                f64::INFINITY
            }
        } else {
            f64::NAN
        };

        Ok(Self {
            s: s.clone(),
            points: points.to_vec(),
            q_thin,
            r,
            null_basis,
            kernel,
            perp_coords,
            reduced_chol,
            diag: ConditioningDiag {
                reduced_sigma_min,
                seed_inverse_norm,
            },
        })
    }

    /// Number of interpolation points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when the system has no points (never constructible).
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Solves for one right-hand side of interpolation values, with an
    /// optional prior Hessian for the minimal-change objective. The prior
    /// enters by residualizing the values, solving with a zero prior, and
    /// adding the prior back onto the curvature.
    pub fn solve(
        &self,
        rhs: &DVector<f64>,
        prior: Option<&DMatrix<f64>>,
    ) -> Result<SketchSolveResult, ModelError> {
        let t = self.points.len();
        if rhs.len() != t {
            return Err(ModelError::DimensionMismatch(format!(
                "{} values for {} points",
                rhs.len(),
                t
            )));
        }
        let n = self.s.ncols();

        let mut f = rhs.clone();
        for i in 0..t {
            f[i] -= prior_value(prior, &self.points[i]);
        }
        let mul = self.solve_residualized(&f);

        let mut h = match prior {
            Some(hp) => hp.clone(),
            None => DMatrix::zeros(n, n),
        };
        for (i, u) in self.points.iter().enumerate() {
            let w = 0.5 * mul.lambda[i];
            if w != 0.0 {
                h.ger(w, u, u, 1.0);
            }
        }
        let beta = hessian_to_coeffs(&h);

        Ok(SketchSolveResult {
            alpha: mul.alpha,
            beta,
            gamma: mul.gamma,
            lambda: mul.lambda,
            kappa_diag: self.diag,
        })
    }

    /// Multiplier-level solve for values already residualized against the
    /// prior. Infallible: singular geometry is rejected at construction.
    pub fn solve_residualized(&self, f_tilde: &DVector<f64>) -> Multipliers {
        let t = self.points.len();
        let p = self.s.nrows();
        assert_eq!(f_tilde.len(), t, "value count mismatch");

        // lambda = N omega with (N^T K N) omega = N^T f.
        let lambda = if self.null_basis.ncols() > 0 {
            let rhs_red = self.null_basis.transpose() * f_tilde;
            let omega = cholesky_solve(&self.reduced_chol, &rhs_red);
            &self.null_basis * omega
        } else {
            DVector::zeros(t)
        };

        // R alpha = Q^T (f - K lambda).
        let resid = f_tilde - &self.kernel * &lambda;
        let qtr = self.q_thin.transpose() * &resid;
        let mut alpha = DVector::zeros(p + 1);
        for i in (0..p + 1).rev() {
            let mut sum = qtr[i];
            for j in i + 1..p + 1 {
                sum -= self.r[(i, j)] * alpha[j];
            }
            alpha[i] = sum / self.r[(i, i)];
        }

        // Stationarity maps multipliers back to coefficients.
        let gamma = if self.perp_coords.nrows() > 0 {
            &self.perp_coords * &lambda
        } else {
            DVector::zeros(0)
        };
        Multipliers {
            alpha,
            gamma,
            lambda,
        }
    }

    /// Full-space curvature implied by the multipliers plus prior, without
    /// the coefficient-vector detour.
    pub fn curvature(&self, result: &SketchSolveResult, prior: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let n = self.s.ncols();
        let mut h = match prior {
            Some(hp) => hp.clone(),
            None => DMatrix::zeros(n, n),
        };
        for (i, u) in self.points.iter().enumerate() {
            let w = 0.5 * result.lambda[i];
            if w != 0.0 {
                h.ger(w, u, u, 1.0);
            }
        }
        h
    }
}

/// One-shot sketched interpolation solve; see [`SketchSystem`].
///
/// Among all quadratics `q(y) = a_0 + (S^T a + S_perp^T gamma)^T y + y^T H y / 2`
/// that interpolate `rhs` on `points`, returns the one minimizing
/// `(||beta - beta_prior||^2 + ||gamma||^2) / 2` where `beta` are the scaled
/// curvature coefficients of `H` and `beta_prior` those of `prior`.
pub fn solve_basis_sketch(
    s: &DMatrix<f64>,
    s_perp: &DMatrix<f64>,
    points: &[DVector<f64>],
    rhs: &DVector<f64>,
    prior: Option<&DMatrix<f64>>,
) -> Result<SketchSolveResult, ModelError> {
    SketchSystem::new(s, s_perp, points)?.solve(rhs, prior)
}

/// Full-space minimum-norm-Hessian interpolation.
///
/// Solves the saddle system
///
/// ```text
/// [ M_q M_q^T   M_L ] [ lambda ]   [ rhs - prior values ]
/// [ M_L^T        0  ] [ alpha  ] = [ 0                  ]
/// ```
///
/// directly by LU, where `M_L` is the linear interpolation matrix and
/// `M_q M_q^T` the quadratic-block Gram kernel. This is intentionally a
/// different algebraic route from [`solve_basis_sketch`]; with a
/// full-rank sketch the two must agree, and the test suite holds them to
/// that.
pub fn solve_min_norm_hessian(
    points: &[DVector<f64>],
    rhs: &DVector<f64>,
    prior: Option<&DMatrix<f64>>,
) -> Result<MnhSolveResult, ModelError> {
    MnhSystem::new(points)?.solve(rhs, prior)
}

/// Factored full-space minimum-norm-Hessian system.
///
/// Like [`SketchSystem`], the LU of the saddle matrix depends only on the
/// geometry, so one factorization serves every residual component.
#[derive(Debug)]
pub struct MnhSystem {
    points: Vec<DVector<f64>>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
}

impl MnhSystem {
    /// Factorizes the saddle system for a point set (displacements from the
    /// model center, at least `n + 1` of them).
    pub fn new(points: &[DVector<f64>]) -> Result<Self, ModelError> {
        let t = points.len();
        if t == 0 {
            return Err(ModelError::NotPoised {
                reason: "empty interpolation set".to_string(),
            });
        }
        let n = points[0].len();
        if t < n + 1 {
            return Err(ModelError::NotPoised {
                reason: format!("{t} points cannot determine {} linear coefficients", n + 1),
            });
        }

        let m_l = assemble_vandermonde(&BasisSpec::Linear(n), points);
        let dim = t + n + 1;
        let mut saddle = DMatrix::zeros(dim, dim);
        for i in 0..t {
            for j in 0..=i {
                let val = quad_kernel(&points[i], &points[j]);
                saddle[(i, j)] = val;
                saddle[(j, i)] = val;
            }
        }
        for i in 0..t {
            for j in 0..n + 1 {
                saddle[(i, t + j)] = m_l[(i, j)];
                saddle[(t + j, i)] = m_l[(i, j)];
            }
        }
        let lu = saddle.lu();
        Ok(MnhSystem {
            points: points.to_vec(),
            lu,
            n,
        })
    }

    /// Number of interpolation points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when the system has no points (never constructible).
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Solves one right-hand side, with an optional prior Hessian for the
    /// minimal-change objective.
    pub fn solve(
        &self,
        rhs: &DVector<f64>,
        prior: Option<&DMatrix<f64>>,
    ) -> Result<MnhSolveResult, ModelError> {
        let t = self.points.len();
        let n = self.n;
        if rhs.len() != t {
            return Err(ModelError::DimensionMismatch(format!(
                "{} values for {} points",
                rhs.len(),
                t
            )));
        }
        let mut residualized = rhs.clone();
        for i in 0..t {
            residualized[i] -= prior_value(prior, &self.points[i]);
        }
        let mul = self.solve_residualized(&residualized)?;

        let mut h = match prior {
            Some(hp) => hp.clone(),
            None => DMatrix::zeros(n, n),
        };
        for (i, u) in self.points.iter().enumerate() {
            let w = 0.5 * mul.lambda[i];
            if w != 0.0 {
                h.ger(w, u, u, 1.0);
            }
        }
        let beta = hessian_to_coeffs(&h);

        Ok(MnhSolveResult {
            alpha: mul.alpha,
            beta,
            lambda: mul.lambda,
        })
    }

    /// Multiplier-level solve for values that the caller has already
    /// residualized against the prior. Skips the curvature assembly; batch
    /// callers reconstruct `H` from the multipliers themselves.
    pub fn solve_residualized(&self, f_tilde: &DVector<f64>) -> Result<Multipliers, ModelError> {
        let t = self.points.len();
        let n = self.n;
        assert_eq!(f_tilde.len(), t, "value count mismatch");
        let mut rhs_full = DVector::zeros(t + n + 1);
        rhs_full.rows_mut(0, t).copy_from(f_tilde);
        let sol = self
            .lu
            .solve(&rhs_full)
            .ok_or_else(|| ModelError::NotPoised {
                reason: "saddle system is singular".to_string(),
            })?;
        Ok(Multipliers {
            lambda: sol.rows(0, t).into_owned(),
            alpha: sol.rows(t, n + 1).into_owned(),
            gamma: DVector::zeros(0),
        })
    }
}

/// Builds the interpolating [`QuadraticModel`] from a sketched solve.
///
/// The model is expressed around `center` in original coordinates; `points`
/// passed to the solve must have been displacements from that center.
pub fn sketch_result_to_model(
    center: &DVector<f64>,
    s: &DMatrix<f64>,
    s_perp: &DMatrix<f64>,
    result: &SketchSolveResult,
) -> QuadraticModel {
    let n = s.ncols();
    let p = s.nrows();
    let mut g = s.transpose() * result.alpha.rows(1, p);
    if s_perp.nrows() > 0 {
        g += s_perp.transpose() * &result.gamma;
    }
    QuadraticModel {
        center: center.clone(),
        constant: result.alpha[0],
        g,
        h: coeffs_to_hessian(&result.beta, n),
    }
}

/// Worst-case interpolation-quality report for a model on a sketched ball.
#[derive(Debug, Clone, Copy)]
pub struct LinearityReport {
    /// Value-error constant: `(4 + 5 L sqrt(p)) / 2 * (l_g + l_mg) * c^2`.
    pub kappa_ef: f64,
    /// Gradient-error constant: `5 L sqrt(p) / 2 * (l_g + l_mg) * c`.
    pub kappa_eg: f64,
    /// Largest observed `|m - f| / radius^2`.
    pub worst_value_ratio: f64,
    /// Largest observed `||S (grad m - grad f)|| / radius`.
    pub worst_gradient_ratio: f64,
    /// Number of sampled directions violating either bound.
    pub violations: usize,
}

/// Samples directions in the sketched ball of the given radius and compares
/// model error against the fully-linear bounds with poisedness constant
/// `lambda_bound`, ball scale `c`, and objective gradient Lipschitz
/// constant `l_g`.
///
/// `f` returns the objective value and gradient at a full-space point. The
/// directions are `S^T z` with `z` drawn uniformly from the p-ball of the
/// radius, so every sample satisfies the subspace constraint exactly.
pub fn check_s_full_linearity<F, R>(
    model: &QuadraticModel,
    f: &F,
    s: &DMatrix<f64>,
    radius: f64,
    c: f64,
    lambda_bound: f64,
    l_g: f64,
    samples: usize,
    rng: &mut R,
) -> LinearityReport
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
    R: rand::Rng,
{
    let p = s.nrows();
    let l_mg = model.gradient_lipschitz();
    let kappa_ef = 0.5 * (4.0 + 5.0 * lambda_bound * (p as f64).sqrt()) * (l_g + l_mg) * c * c;
    let kappa_eg = 2.5 * lambda_bound * (p as f64).sqrt() * (l_g + l_mg) * c;

    let mut worst_value_ratio = 0.0f64;
    let mut worst_gradient_ratio = 0.0f64;
    let mut violations = 0;
    for _ in 0..samples {
        // Uniform point in the p-ball of the radius: normalized Gaussian
        // direction times a radius with the p-th-root law.
        let mut z = DVector::zeros(p);
        for i in 0..p {
            z[i] = standard_normal(rng);
        }
        let norm = z.norm();
        if norm > 0.0 {
            let scale = radius * rng.gen::<f64>().powf(1.0 / p as f64) / norm;
            z *= scale;
        }
        let x = &model.center + s.transpose() * &z;
        let (fx, gx) = f(&x);
        let value_ratio = (model_value(model, &x) - fx).abs() / (radius * radius);
        let grad_err = s * (model_gradient(model, &x) - gx);
        let gradient_ratio = grad_err.norm() / radius;
        worst_value_ratio = worst_value_ratio.max(value_ratio);
        worst_gradient_ratio = worst_gradient_ratio.max(gradient_ratio);
        if value_ratio > kappa_ef || gradient_ratio > kappa_eg {
            violations += 1;
        }
    }

    LinearityReport {
        kappa_ef,
        kappa_eg,
        worst_value_ratio,
        worst_gradient_ratio,
        violations,
    }
}

/// Standard normal draw by Box-Muller; avoids pulling in a distributions
/// crate for the one place that needs Gaussian samples.
#[inline]
fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
