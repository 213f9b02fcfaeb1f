//! Dense linear algebra kernels used by the geometry and model layers.
//!
//! Everything here is written for small-to-moderate dense problems (a few
//! hundred rows/columns) where determinism and explicit tolerance control
//! matter more than peak throughput:
//!
//! - [`UpdatableQR`]: a full QR factorization (`Q` square) that accepts new
//!   columns via Givens updates in `O(m^2)`, keeping the trailing columns of
//!   `Q` as an orthonormal basis of the orthogonal complement.
//! - [`RowGrowingQR`]: a thin QR of a tall matrix that accepts new rows and
//!   hands back, per insertion, the new unit vector spanning the enlarged
//!   left null space.
//! - [`min_singular_value`]: Golub–Kahan bidiagonalization followed by
//!   zero-shift QR sweeps, which preserves the relative accuracy of tiny
//!   singular values (a shifted sweep would smear `sigma_min` by
//!   `eps * sigma_max`).
//! - [`cholesky_solve_with_tol`]: Cholesky with an explicit pivot floor so
//!   callers can translate near-semidefiniteness into domain errors.

mod svd;

pub use svd::{min_singular_value, singular_values};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Errors from the dense kernels.
#[derive(Debug, Error)]
pub enum LinalgError {
    /// A column offered to [`UpdatableQR::insert_column`] lies in the span of
    /// the existing columns up to the tolerance.
    #[error("column is dependent on the current factor range (residual {residual:.3e} <= tol {tolerance:.3e})")]
    DependentColumn { residual: f64, tolerance: f64 },
    /// The factored matrix does not have full column rank.
    #[error("matrix is rank deficient (pivot {pivot:.3e} <= tol {tolerance:.3e} at column {column})")]
    RankDeficient {
        column: usize,
        pivot: f64,
        tolerance: f64,
    },
    /// A matrix that must be positive definite failed the pivot test.
    #[error("matrix is not positive definite (pivot {pivot:.3e} <= tol {tolerance:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64, tolerance: f64 },
    /// Dimension mismatch between arguments.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Relative tolerance declaring an inserted column linearly dependent.
pub const DEPENDENT_COLUMN_RTOL: f64 = 1e-12;

/// Plane rotation `(c, s, r)` with `c*a + s*b = r`, `-s*a + c*b = 0`.
///
/// Hypot-based so it cannot overflow for representable inputs; `r >= 0`.
#[inline]
pub(crate) fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        if a >= 0.0 {
            (1.0, 0.0, a)
        } else {
            (-1.0, 0.0, -a)
        }
    } else if a == 0.0 {
        if b >= 0.0 {
            (0.0, 1.0, b)
        } else {
            (0.0, -1.0, -b)
        }
    } else {
        let r = a.hypot(b);
        (a / r, b / r, r)
    }
}

/// Full QR factorization `A = Q R` with `Q` square `m x m`, updatable by
/// column insertion.
///
/// `R` is stored as an `m x k` upper-trapezoidal matrix whose diagonal is
/// kept nonnegative, which makes the factorization of a full-rank matrix
/// unique and lets the batch and incremental construction routes be compared
/// directly in tests. The trailing `m - k` columns of `Q` always form an
/// orthonormal basis of the orthogonal complement of the column span.
#[derive(Debug, Clone)]
pub struct UpdatableQR {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Largest Euclidean norm among the columns ever inserted; scales the
    /// dependence tolerance.
    max_col_norm: f64,
}

impl UpdatableQR {
    /// An empty factorization of the zero-column `m x 0` matrix (`Q = I`).
    pub fn identity(m: usize) -> Self {
        Self {
            q: DMatrix::identity(m, m),
            r: DMatrix::zeros(m, 0),
            max_col_norm: 0.0,
        }
    }

    /// Number of rows `m`.
    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    /// Number of factored columns `k`.
    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    /// The square orthogonal factor.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// The `m x k` upper-trapezoidal factor.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// First `k` columns of `Q`: an orthonormal basis of the column span.
    pub fn range_basis(&self) -> DMatrix<f64> {
        self.q.columns(0, self.ncols()).into_owned()
    }

    /// Trailing `m - k` columns of `Q`: an orthonormal basis of the
    /// orthogonal complement of the column span.
    pub fn complement_basis(&self) -> DMatrix<f64> {
        let k = self.ncols();
        self.q.columns(k, self.nrows() - k).into_owned()
    }

    /// Norm of the component of `v` outside the current column span.
    pub fn residual_norm(&self, v: &DVector<f64>) -> f64 {
        let k = self.ncols();
        let m = self.nrows();
        let mut s = 0.0;
        for j in k..m {
            s += self.q.column(j).dot(v).powi(2);
        }
        s.sqrt()
    }

    /// Inserts `col` as the new last column, updating `Q` and `R` with `m - k`
    /// Givens rotations (`O(m^2)` work, no refactorization).
    ///
    /// Fails with [`LinalgError::DependentColumn`] when the component of
    /// `col` outside the current span is at most `1e-12` times the largest
    /// column norm seen so far (the factor is left unchanged in that case).
    pub fn insert_column(&mut self, col: &DVector<f64>) -> Result<(), LinalgError> {
        let m = self.nrows();
        let k = self.ncols();
        if col.len() != m {
            return Err(LinalgError::DimensionMismatch(format!(
                "column of length {} into factorization with {} rows",
                col.len(),
                m
            )));
        }
        assert!(k < m, "cannot insert more columns than rows");
        let scale = self.max_col_norm.max(col.norm());
        let tolerance = DEPENDENT_COLUMN_RTOL * scale;

        // Coordinates of the new column in the Q basis.
        let mut w = DVector::<f64>::zeros(m);
        for i in 0..m {
            w[i] = self.q.column(i).dot(col);
        }
        let residual = w.rows(k, m - k).norm();
        if residual <= tolerance {
            return Err(LinalgError::DependentColumn {
                residual,
                tolerance,
            });
        }

        // Rotate the trailing coordinates of w into position k, accumulating
        // the rotations into Q (columns i-1, i of Q for each plane (i-1, i)).
        for i in (k + 1..m).rev() {
            let (c, s, r) = givens(w[i - 1], w[i]);
            w[i - 1] = r;
            w[i] = 0.0;
            // Q <- Q * G^T on columns (i-1, i).
            for row in 0..m {
                let a = self.q[(row, i - 1)];
                let b = self.q[(row, i)];
                self.q[(row, i - 1)] = c * a + s * b;
                self.q[(row, i)] = -s * a + c * b;
            }
        }
        // w[k] = +-residual; force the new diagonal entry positive.
        if w[k] < 0.0 {
            w[k] = -w[k];
            for row in 0..m {
                self.q[(row, k)] = -self.q[(row, k)];
            }
        }

        let mut r_new = DMatrix::<f64>::zeros(m, k + 1);
        r_new.view_mut((0, 0), (m, k)).copy_from(&self.r);
        r_new.set_column(k, &w);
        self.r = r_new;
        self.max_col_norm = scale;
        Ok(())
    }
}

/// Batch full QR factorization by Householder reflections, normalized so the
/// diagonal of `R` is nonnegative.
///
/// The result is the same (up to rounding) as building an [`UpdatableQR`]
/// by inserting the columns of `a` one at a time, which is exactly what the
/// unit tests assert.
pub fn qr_factorize(a: &DMatrix<f64>) -> UpdatableQR {
    let m = a.nrows();
    let k = a.ncols();
    assert!(k <= m, "qr_factorize expects a tall or square matrix");
    let mut q = DMatrix::<f64>::identity(m, m);
    let mut r = a.clone();
    let mut max_col_norm: f64 = 0.0;
    for j in 0..k {
        max_col_norm = max_col_norm.max(a.column(j).norm());
    }

    for j in 0..k {
        // Householder vector annihilating r[j+1.., j].
        let tail = r.view((j, j), (m - j, 1)).norm();
        if tail == 0.0 {
            continue;
        }
        let alpha = if r[(j, j)] > 0.0 { -tail } else { tail };
        let mut v = DVector::<f64>::zeros(m - j);
        for i in j..m {
            v[i - j] = r[(i, j)];
        }
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply H = I - 2 v v^T / (v^T v) to the trailing block of R and to Q.
        for col in j..k {
            let mut dot = 0.0;
            for i in j..m {
                dot += v[i - j] * r[(i, col)];
            }
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                r[(i, col)] -= f * v[i - j];
            }
        }
        for row in 0..m {
            let mut dot = 0.0;
            for i in j..m {
                dot += q[(row, i)] * v[i - j];
            }
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                q[(row, i)] -= f * v[i - j];
            }
        }
        r[(j, j)] = alpha;
        for i in j + 1..m {
            r[(i, j)] = 0.0;
        }
    }

    // Sign normalization: R diagonal >= 0.
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for col in j..k {
                r[(j, col)] = -r[(j, col)];
            }
            for row in 0..m {
                q[(row, j)] = -q[(row, j)];
            }
        }
    }

    UpdatableQR {
        q,
        r,
        max_col_norm,
    }
}

/// Orthonormal basis of the null space of `a^T` (the orthogonal complement of
/// the column span of the tall matrix `a`), as the `m - k` trailing columns
/// of the Q factor.
///
/// Fails with [`LinalgError::RankDeficient`] when any diagonal entry of `R`
/// falls at or below `1e-12` times the largest column norm of `a`: a
/// rank-deficient input would silently misclassify part of the range as
/// complement.
pub fn nullspace_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let qr = qr_factorize(a);
    let tolerance = DEPENDENT_COLUMN_RTOL * qr.max_col_norm;
    for j in 0..qr.ncols() {
        let pivot = qr.r[(j, j)].abs();
        if pivot <= tolerance {
            return Err(LinalgError::RankDeficient {
                column: j,
                pivot,
                tolerance,
            });
        }
    }
    Ok(qr.complement_basis())
}

/// Norm of the projection coefficients of `v` onto the span of the
/// orthonormal columns of `basis`, i.e. `||basis^T v||`.
///
/// Equals the norm of the orthogonal projection of `v` onto that span.
pub fn project_coefficient(basis: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    assert_eq!(
        basis.nrows(),
        v.len(),
        "basis rows must match vector length"
    );
    let mut s = 0.0;
    for j in 0..basis.ncols() {
        s += basis.column(j).dot(v).powi(2);
    }
    s.sqrt()
}

/// Thin QR of a tall matrix grown row by row.
///
/// Holds `Q` (`t x k`, orthonormal columns) and square `R` (`k x k`) with
/// `A = Q R` for the current `t x k` matrix `A`. Each call to
/// [`RowGrowingQR::insert_row`] costs `O(t k)` (one sweep of `k` plane
/// rotations) and returns the unit vector that extends an orthonormal basis
/// of the left null space `{v : A^T v = 0}`: stacking those vectors as
/// columns (each zero-padded to the current height) reproduces exactly the
/// incremental null-space bases used by the interpolation-set selection.
#[derive(Debug, Clone)]
pub struct RowGrowingQR {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl RowGrowingQR {
    /// Factorizes an initial square invertible `k x k` matrix.
    ///
    /// Fails with [`LinalgError::RankDeficient`] if the seed matrix is
    /// singular up to the dependence tolerance.
    pub fn new(seed: &DMatrix<f64>) -> Result<Self, LinalgError> {
        assert_eq!(seed.nrows(), seed.ncols(), "seed matrix must be square");
        let qr = qr_factorize(seed);
        let tolerance = DEPENDENT_COLUMN_RTOL * qr.max_col_norm;
        for j in 0..qr.ncols() {
            let pivot = qr.r[(j, j)].abs();
            if pivot <= tolerance {
                return Err(LinalgError::RankDeficient {
                    column: j,
                    pivot,
                    tolerance,
                });
            }
        }
        let k = seed.ncols();
        Ok(Self {
            q: qr.q.columns(0, k).into_owned(),
            r: qr.r.rows(0, k).into_owned(),
        })
    }

    /// Current number of rows `t`.
    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    /// Number of columns `k` of the factored matrix.
    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    /// The square triangular factor.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// The unit left-null vector (length `t + 1`) the factorization would
    /// gain if `row` were appended, without modifying the factor.
    ///
    /// With `w = R^{-T} row`, the vector is `[-Q w; 1] / sqrt(1 + ||w||^2)`;
    /// its last component is always positive, which fixes the sign.
    pub fn peek_null_vector(&self, row: &DVector<f64>) -> DVector<f64> {
        let k = self.ncols();
        let t = self.nrows();
        assert_eq!(row.len(), k, "row length must match column count");
        // Solve R^T w = row (forward substitution on the lower triangle R^T).
        let mut w = DVector::<f64>::zeros(k);
        for i in 0..k {
            let mut s = row[i];
            for j in 0..i {
                s -= self.r[(j, i)] * w[j];
            }
            w[i] = s / self.r[(i, i)];
        }
        let nu = 1.0 / (1.0 + w.norm_squared()).sqrt();
        let mut v = DVector::<f64>::zeros(t + 1);
        let qw = &self.q * &w;
        for i in 0..t {
            v[i] = -nu * qw[i];
        }
        v[t] = nu;
        v
    }

    /// Appends `row`, updates the thin factorization with `k` plane
    /// rotations, and returns the new unit left-null vector (length `t + 1`).
    pub fn insert_row(&mut self, row: &DVector<f64>) -> DVector<f64> {
        let k = self.ncols();
        let t = self.nrows();
        assert_eq!(row.len(), k, "row length must match column count");

        // Extended factors: Qe = [[Q, 0],[0, 1]] (t+1 x k+1), Re = [[R],[row^T]].
        let mut qe = DMatrix::<f64>::zeros(t + 1, k + 1);
        qe.view_mut((0, 0), (t, k)).copy_from(&self.q);
        qe[(t, k)] = 1.0;
        let mut re = DMatrix::<f64>::zeros(k + 1, k);
        re.view_mut((0, 0), (k, k)).copy_from(&self.r);
        for j in 0..k {
            re[(k, j)] = row[j];
        }

        // Zero the appended row of Re against each diagonal in turn; mirror
        // each rotation onto the columns of Qe so Qe * Re stays invariant.
        for i in 0..k {
            let (c, s, r) = givens(re[(i, i)], re[(k, i)]);
            re[(i, i)] = r;
            re[(k, i)] = 0.0;
            for j in i + 1..k {
                let a = re[(i, j)];
                let b = re[(k, j)];
                re[(i, j)] = c * a + s * b;
                re[(k, j)] = -s * a + c * b;
            }
            for rr in 0..t + 1 {
                let a = qe[(rr, i)];
                let b = qe[(rr, k)];
                qe[(rr, i)] = c * a + s * b;
                qe[(rr, k)] = -s * a + c * b;
            }
        }

        // Last column of Qe is orthogonal to the enlarged column span.
        let mut null_vec = qe.column(k).into_owned();
        if null_vec[t] < 0.0 {
            null_vec.neg_mut();
        }
        self.q = qe.columns(0, k).into_owned();
        self.r = re.rows(0, k).into_owned();
        null_vec
    }
}

/// Cholesky factor of a symmetric matrix with an explicit pivot floor.
///
/// Returns the lower factor `L` with `G = L L^T`, or
/// [`LinalgError::NotPositiveDefinite`] if any pivot drops to or below
/// `tolerance` before its square root is taken. Callers pick the floor
/// (typically a small multiple of the trace) so that "numerically
/// semidefinite" is a domain-level error rather than a NaN.
pub fn cholesky_with_tol(g: &DMatrix<f64>, tolerance: f64) -> Result<DMatrix<f64>, LinalgError> {
    let n = g.nrows();
    assert_eq!(n, g.ncols(), "matrix must be square");
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= tolerance || !s.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite {
                        row: i,
                        pivot: s,
                        tolerance,
                    });
                }
                l[(i, j)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solves `G x = b` given the lower Cholesky factor `L` of `G`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = DVector::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Convenience: `G x = b` with pivot-floored Cholesky in one call.
pub fn cholesky_solve_with_tol(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    tolerance: f64,
) -> Result<DVector<f64>, LinalgError> {
    let l = cholesky_with_tol(g, tolerance)?;
    Ok(cholesky_solve(&l, b))
}
