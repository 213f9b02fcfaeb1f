//! Point history, subspace recycling, and interpolation-set selection.
//!
//! The solver keeps every evaluated point in an append-only [`PointBank`].
//! Each iteration mines the bank twice:
//!
//! 1. [`identify_initial_subspace`] greedily re-orthonormalizes directions
//!    from the current center toward nearby bank points. Directions that
//!    bring enough new angle (complement projection at least `theta1`) are
//!    admitted; the result is a full orthogonal factor whose leading columns
//!    span the recycled directions.
//! 2. [`determine_interpolation_set`] grows the seed point set (which pins
//!    down the sketched linear coefficients by construction) with further
//!    nearby points, accepting a candidate only if the smallest singular
//!    value of the projected complement system stays at or above `theta2`,
//!    so the curvature fit cannot become arbitrarily ill-conditioned.
//!
//! All geometry runs in displacement coordinates scaled by the trust-region
//! radius: a point `y` enters as `(y - x) / delta`, so thresholds are
//! radius-independent.

use crate::linalg::{
    min_singular_value, nullspace_basis, LinalgError, RowGrowingQR,
    UpdatableQR,
};
use crate::model::{assemble_vandermonde, BasisSpec};
use nalgebra::{DMatrix, DVector};
use std::io::{self, Write};
use thiserror::Error;

/// Errors from geometry routines.
#[derive(Debug, Error)]
pub enum GeometryError {
    /// The seed point set does not invertibly pin down the sketched linear
    /// coefficients.
    #[error("degenerate seed set: {0}")]
    DegenerateSeed(#[from] LinalgError),
    /// Inconsistent dimensions between the bank, sketch, and points.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Thresholds controlling subspace recycling and point selection.
#[derive(Debug, Clone)]
pub struct GeometryConfig {
    /// Search-ball scale: points within `c * delta` of the center are
    /// eligible.
    pub c: f64,
    /// Minimum complement projection for a recycled direction.
    pub theta1: f64,
    /// Minimum singular value of the projected complement system when
    /// adding an interpolation point.
    pub theta2: f64,
    /// Hard cap on the interpolation set size, seed included.
    pub max_points: usize,
    /// Record a singular-value certificate after each accepted candidate.
    /// Off by default: the certificates cost a full SVD per acceptance and
    /// exist for verification, not for solving.
    pub record_certificates: bool,
}

impl GeometryConfig {
    /// Defaults for an `n`-dimensional problem: ball scale `sqrt(n)`,
    /// `theta1 = 1e-5`, `theta2 = 1e-3`, at most `2n + 1` points.
    pub fn for_dimension(n: usize) -> Self {
        GeometryConfig {
            c: (n as f64).sqrt(),
            theta1: 1e-5,
            theta2: 1e-3,
            max_points: 2 * n + 1,
            record_certificates: false,
        }
    }
}

/// Append-only store of evaluated points and their residual vectors.
///
/// Indices are stable; insertion order is the deterministic tie-break used
/// by every selection routine.
#[derive(Debug, Clone)]
pub struct PointBank {
    dim: usize,
    residual_dim: usize,
    points: Vec<DVector<f64>>,
    residuals: Vec<DVector<f64>>,
    sum_squares: Vec<f64>,
}

impl PointBank {
    /// Empty bank for points in R^`dim` with `residual_dim` residuals each.
    pub fn new(dim: usize, residual_dim: usize) -> Self {
        PointBank {
            dim,
            residual_dim,
            points: Vec::new(),
            residuals: Vec::new(),
            sum_squares: Vec::new(),
        }
    }

    /// Number of stored points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when nothing has been evaluated yet.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Problem dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Residual vector length.
    pub fn residual_dim(&self) -> usize {
        self.residual_dim
    }

    /// Stores an evaluated point, returning its index.
    pub fn push(&mut self, x: DVector<f64>, residuals: DVector<f64>) -> usize {
        assert_eq!(x.len(), self.dim, "point dimension mismatch");
        assert_eq!(
            residuals.len(),
            self.residual_dim,
            "residual dimension mismatch"
        );
        self.sum_squares.push(residuals.norm_squared());
        self.points.push(x);
        self.residuals.push(residuals);
        self.points.len() - 1
    }

    /// The stored point.
    pub fn point(&self, i: usize) -> &DVector<f64> {
        &self.points[i]
    }

    /// The stored residual vector.
    pub fn residuals(&self, i: usize) -> &DVector<f64> {
        &self.residuals[i]
    }

    /// Cached sum of squared residuals.
    pub fn sum_squares(&self, i: usize) -> f64 {
        self.sum_squares[i]
    }

    /// Indices of points with `||y - center|| <= radius`, in insertion order.
    pub fn within(&self, center: &DVector<f64>, radius: f64) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| (&self.points[i] - center).norm() <= radius)
            .collect()
    }

    /// Writes the bank as CSV: `index,x_0..x_{n-1},r_0..r_{m-1},f`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "index")?;
        for j in 0..self.dim {
            write!(w, ",x_{j}")?;
        }
        for j in 0..self.residual_dim {
            write!(w, ",r_{j}")?;
        }
        writeln!(w, ",f")?;
        for i in 0..self.points.len() {
            write!(w, "{i}")?;
            for v in self.points[i].iter() {
                write!(w, ",{v:.17e}")?;
            }
            for v in self.residuals[i].iter() {
                write!(w, ",{v:.17e}")?;
            }
            writeln!(w, ",{:.17e}", self.sum_squares[i])?;
        }
        Ok(())
    }
}

/// Output of [`identify_initial_subspace`].
#[derive(Debug, Clone)]
pub struct SubspaceSelection {
    /// Full `n x n` orthogonal factor; the leading [`SubspaceSelection::rank`]
    /// columns span the admitted displacement directions, the rest complete
    /// the basis deterministically.
    pub q: DMatrix<f64>,
    /// Number of admitted directions.
    pub rank: usize,
    /// Bank indices of the admitted points, in admission order.
    pub admitted: Vec<usize>,
}

/// Greedy direction recycling over the bank in insertion order.
///
/// A point is admitted when it lies within `c * delta` of the center and
/// the component of `(y - x) / (c * delta)` outside the span of already
/// admitted directions has norm at least `theta1`. Stops early once `n`
/// directions are found. The center itself (displacement zero) can never
/// pass the threshold, so no special casing is needed.
pub fn identify_initial_subspace(
    bank: &PointBank,
    center: &DVector<f64>,
    delta: f64,
    config: &GeometryConfig,
) -> SubspaceSelection {
    let n = bank.dim();
    assert_eq!(center.len(), n, "center dimension mismatch");
    let ball = config.c * delta;
    let mut qr = UpdatableQR::identity(n);
    let mut admitted = Vec::new();
    for i in 0..bank.len() {
        if qr.ncols() == n {
            break;
        }
        let d = (bank.point(i) - center) / ball;
        if d.norm() > 1.0 {
            continue;
        }
        if qr.residual_norm(&d) < config.theta1 {
            continue;
        }
        // The threshold check above guarantees independence, so insertion
        // cannot fail at any reasonable theta1.
        qr.insert_column(&d)
            .expect("direction above theta1 must be independent");
        admitted.push(i);
    }
    SubspaceSelection {
        rank: qr.ncols(),
        q: qr.q().clone(),
        admitted,
    }
}

/// Output of [`determine_interpolation_set`].
#[derive(Debug, Clone)]
pub struct InterpolationSelection {
    /// Bank indices of the final set: the seed first, then accepted
    /// candidates in acceptance order.
    pub indices: Vec<usize>,
    /// Radius-scaled displacements `(y - x) / delta`, aligned with
    /// [`InterpolationSelection::indices`].
    pub displacements: Vec<DVector<f64>>,
    /// Smallest singular value of the projected complement system recorded
    /// after each accepted candidate.
    pub sigma_mins: Vec<f64>,
}

/// Grows the seed point set with nearby bank points while keeping the
/// curvature system well conditioned.
///
/// `seed` holds bank indices whose displacements invertibly determine the
/// sketched linear coefficients (the caller constructs it that way; a
/// numerically singular seed is reported as [`GeometryError::DegenerateSeed`]).
/// Remaining bank points within `c * delta`, in insertion order, are tested
/// one at a time: a candidate is accepted when the smallest singular value
/// of `M_perp^T N` for the tentatively extended set stays strictly above
/// `theta2`, checked as positive definiteness of `N^T K N - theta2^2 I`
/// against the Gram kernel `K`. The set is capped at `max_points`.
pub fn determine_interpolation_set(
    bank: &PointBank,
    center: &DVector<f64>,
    delta: f64,
    s: &DMatrix<f64>,
    s_perp: &DMatrix<f64>,
    seed: &[usize],
    config: &GeometryConfig,
) -> Result<InterpolationSelection, GeometryError> {
    let n = bank.dim();
    let p = s.nrows();
    if s.ncols() != n || (s_perp.nrows() > 0 && s_perp.ncols() != n) {
        return Err(GeometryError::DimensionMismatch(format!(
            "sketch {} x {} and complement {} x {} for an n = {n} bank",
            s.nrows(),
            s.ncols(),
            s_perp.nrows(),
            s_perp.ncols()
        )));
    }
    if seed.len() != p + 1 {
        return Err(GeometryError::DimensionMismatch(format!(
            "seed has {} points but the sketch needs {}",
            seed.len(),
            p + 1
        )));
    }

    let displacement = |i: usize| (bank.point(i) - center) / delta;
    let mut indices: Vec<usize> = seed.to_vec();
    let mut displacements: Vec<DVector<f64>> = seed.iter().map(|&i| displacement(i)).collect();

    // Row-growing QR of the sketched interpolation matrix, seeded square.
    let seed_rows = assemble_vandermonde(&BasisSpec::Sketched(s.clone()), &displacements);
    let mut qr = RowGrowingQR::new(&seed_rows)?;

    // Gram kernel over the current set, its left-null basis, and the cached
    // reduced matrix N^T K N.
    let perp_slope = |u: &DVector<f64>| -> DVector<f64> {
        if s_perp.nrows() > 0 {
            s_perp * u
        } else {
            DVector::zeros(0)
        }
    };
    let kernel_entry = |u: &DVector<f64>, pu: &DVector<f64>, v: &DVector<f64>, pv: &DVector<f64>| {
        let d = u.dot(v);
        0.25 * d * d + pu.dot(pv)
    };
    let mut perp: Vec<DVector<f64>> = displacements.iter().map(perp_slope).collect();
    let mut kernel = DMatrix::zeros(p + 1, p + 1);
    for i in 0..p + 1 {
        for j in 0..=i {
            let v = kernel_entry(&displacements[i], &perp[i], &displacements[j], &perp[j]);
            kernel[(i, j)] = v;
            kernel[(j, i)] = v;
        }
    }
    let mut null_cols: Vec<DVector<f64>> = Vec::new();
    let mut reduced = DMatrix::<f64>::zeros(0, 0);
    // Lower Cholesky factor of `reduced - theta2^2 I`, grown one row per
    // accepted candidate. Testing a candidate is then one forward solve
    // plus a pivot sign, instead of refactorizing the whole matrix.
    let mut shifted_chol: Vec<DVector<f64>> = Vec::new();
    let mut sigma_mins = Vec::new();
    let shift = config.theta2 * config.theta2;

    // Rejections are not free (each costs a border solve), so a saturated
    // set stops scanning after a generous number of failed candidates.
    let mut attempts = 4 * config.max_points;

    for i in bank.within(center, config.c * delta) {
        if indices.len() >= config.max_points || attempts == 0 {
            break;
        }
        if indices.contains(&i) {
            continue;
        }
        attempts -= 1;
        let u = displacement(i);
        let pu = perp_slope(&u);
        let t = displacements.len();

        // Tentative null vector for the extended set and the bordered
        // reduced matrix it induces.
        let row = crate::model::eval_basis(&BasisSpec::Sketched(s.clone()), &u);
        let cand = qr.peek_null_vector(&row);
        let mut k_col = DVector::zeros(t);
        for j in 0..t {
            k_col[j] = kernel_entry(&u, &pu, &displacements[j], &perp[j]);
        }
        let k_corner = kernel_entry(&u, &pu, &u, &pu);

        let head = cand.rows(0, t).into_owned();
        let last = cand[t];
        let w_head = &kernel * &head + &k_col * last;
        let w_last = k_col.dot(&head) + k_corner * last;
        let m = null_cols.len();
        // Old null columns are zero-padded, so only the head contributes.
        let mut border = DVector::zeros(m);
        for (j, nj) in null_cols.iter().enumerate() {
            border[j] = nj.dot(&w_head);
        }
        let corner = head.dot(&w_head) + last * w_last;

        // Border the maintained factor: L z = border, then the new pivot
        // square is what remains of the shifted corner. Positive means the
        // extended reduced matrix stays above the theta2 floor.
        let mut z = DVector::zeros(m);
        for j in 0..m {
            let mut sum = border[j];
            for l in 0..j {
                sum -= shifted_chol[j][l] * z[l];
            }
            z[j] = sum / shifted_chol[j][j];
        }
        let pivot_sq = corner - shift - z.norm_squared();
        if pivot_sq <= 0.0 {
            continue;
        }

        // Accept: commit the row, pad the old null columns, extend the
        // kernel, and adopt the bordered reduced matrix and factor.
        let committed = qr.insert_row(&row);
        // Same unit vector by two routes; the peeked one rides through
        // R^{-T} and picks up kappa(R) amplification, so compare alignment
        // rather than entries.
        debug_assert!(
            committed.dot(&cand) > 1.0 - 1e-8,
            "peeked and committed null vectors diverged: alignment {}",
            committed.dot(&cand)
        );
        for nj in null_cols.iter_mut() {
            *nj = nj.clone().insert_row(t, 0.0);
        }
        null_cols.push(committed);
        let mut grown = DMatrix::zeros(t + 1, t + 1);
        grown.view_mut((0, 0), (t, t)).copy_from(&kernel);
        for j in 0..t {
            grown[(j, t)] = k_col[j];
            grown[(t, j)] = k_col[j];
        }
        grown[(t, t)] = k_corner;
        kernel = grown;
        let mut bordered = DMatrix::zeros(m + 1, m + 1);
        bordered.view_mut((0, 0), (m, m)).copy_from(&reduced);
        for j in 0..m {
            bordered[(j, m)] = border[j];
            bordered[(m, j)] = border[j];
        }
        bordered[(m, m)] = corner;
        reduced = bordered;
        let mut l_row = z;
        l_row = l_row.insert_row(m, pivot_sq.sqrt());
        shifted_chol.push(l_row);
        indices.push(i);
        displacements.push(u);
        perp.push(pu);
        if config.record_certificates {
            sigma_mins.push(min_singular_value(&reduced).max(0.0).sqrt());
        }
    }

    Ok(InterpolationSelection {
        indices,
        displacements,
        sigma_mins,
    })
}

/// Unique-solvability certificate for a sketched interpolation geometry.
#[derive(Debug, Clone, Copy)]
pub struct UniquenessReport {
    /// Smallest singular value of the sketched interpolation matrix.
    pub linear_sigma_min: f64,
    /// Smallest singular value of `M_perp^T N`; `f64::INFINITY` when the
    /// left-null space is empty, `0` when the linear part is already rank
    /// deficient.
    pub reduced_sigma_min: f64,
}

/// Checks the two conditions under which the sketched interpolation problem
/// has exactly one solution: the sketched linear matrix has full column
/// rank, and the complement system projected onto its left-null space does
/// too. Built from explicit interpolation matrices and the dense SVD, so it
/// independently certifies what the incremental selection maintains.
pub fn verify_unique_solvability(
    s: &DMatrix<f64>,
    s_perp: &DMatrix<f64>,
    displacements: &[DVector<f64>],
) -> Result<UniquenessReport, GeometryError> {
    let p = s.nrows();
    if displacements.len() < p + 1 {
        return Err(GeometryError::DimensionMismatch(format!(
            "{} points cannot determine {} sketched coefficients",
            displacements.len(),
            p + 1
        )));
    }
    let n = s.ncols();
    let m_s = assemble_vandermonde(&BasisSpec::Sketched(s.clone()), displacements);
    let linear_sigma_min = min_singular_value(&m_s);
    let nbasis = match nullspace_basis(&m_s) {
        Ok(nb) => nb,
        Err(_) => {
            return Ok(UniquenessReport {
                linear_sigma_min,
                reduced_sigma_min: 0.0,
            })
        }
    };
    if nbasis.ncols() == 0 {
        return Ok(UniquenessReport {
            linear_sigma_min,
            reduced_sigma_min: f64::INFINITY,
        });
    }
    let m_g = assemble_vandermonde(&BasisSpec::SketchComplement(s_perp.clone()), displacements);
    let m_q = assemble_vandermonde(&BasisSpec::QuadraticComplement(n), displacements);
    let mut m_perp = DMatrix::zeros(displacements.len(), m_g.ncols() + m_q.ncols());
    m_perp
        .view_mut((0, 0), (displacements.len(), m_g.ncols()))
        .copy_from(&m_g);
    m_perp
        .view_mut((0, m_g.ncols()), (displacements.len(), m_q.ncols()))
        .copy_from(&m_q);
    let projected = m_perp.transpose() * nbasis;
    Ok(UniquenessReport {
        linear_sigma_min,
        reduced_sigma_min: min_singular_value(&projected),
    })
}

/// Seed conditioning helper used by the solver's diagnostics: `1 / sigma_min`
/// of the sketched seed displacement matrix, columns `S (y_j - y_0)`.
pub fn seed_inverse_norm(s: &DMatrix<f64>, displacements: &[DVector<f64>]) -> f64 {
    let p = s.nrows();
    if p == 0 || displacements.len() < p + 1 {
        return f64::NAN;
    }
    let mut seed = DMatrix::zeros(p, p);
    for j in 0..p {
        seed.set_column(j, &(s * (&displacements[j + 1] - &displacements[0])));
    }
    let smin = min_singular_value(&seed);
    if smin > 0.0 {
        1.0 / smin
    } else {
        f64::INFINITY
    }
}
