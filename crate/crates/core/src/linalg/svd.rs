//! Singular values via Golub–Kahan bidiagonalization and bidiagonal QR.
//!
//! Only singular *values* are needed by the callers (poisedness tests and
//! conditioning diagnostics), so no orthogonal factors are accumulated. The
//! QR iteration on the bidiagonal mixes two sweep kinds per unreduced
//! block, following the classic Demmel–Kahan scheme:
//!
//! - a zero-shift sweep when the block is badly graded: it multiplies
//!   entries by exactly representable cosines and sines, keeping tiny
//!   singular values accurate relative to themselves instead of relative to
//!   `sigma_max` (a shift would smear them by `eps * sigma_max`, fatal when
//!   the two are 16 orders apart);
//! - a sweep shifted by the trailing 2 x 2 singular value when the block is
//!   well conditioned, where zero shift would crawl on clustered values
//!   (the zero-shift convergence factor is the squared ratio of adjacent
//!   singular values, which is 1 for a cluster) and a shift is harmless to
//!   relative accuracy.

use super::givens;
use nalgebra::DMatrix;

/// Relative deflation threshold for the superdiagonal recurrence.
const DEFLATE_RTOL: f64 = 1e-14;

/// Smallest singular value of a dense matrix, to high relative accuracy.
///
/// The matrix is reduced to upper-bidiagonal form by Householder reflections
/// (transposing first if it is wide) and the bidiagonal is driven to
/// diagonal form by zero-shift QR sweeps.
///
/// # Panics
///
/// Panics if the matrix has zero rows or columns.
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    let values = singular_values(a);
    values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// All singular values of a dense matrix, unordered.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    assert!(
        a.nrows() > 0 && a.ncols() > 0,
        "singular values of an empty matrix are undefined"
    );
    let (mut d, mut e) = if a.nrows() >= a.ncols() {
        bidiagonalize(&mut a.clone())
    } else {
        bidiagonalize(&mut a.transpose())
    };
    bidiagonal_values(&mut d, &mut e);
    d.iter().map(|x| x.abs()).collect()
}

/// Householder reduction of a tall matrix to upper bidiagonal form.
///
/// Returns the diagonal `d` (length n) and superdiagonal `e` (length n-1).
fn bidiagonalize(a: &mut DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let m = a.nrows();
    let n = a.ncols();
    debug_assert!(m >= n);

    for j in 0..n {
        // Left reflection: zero a[j+1.., j].
        if j + 1 < m {
            let norm = a.view((j, j), (m - j, 1)).norm();
            if norm > 0.0 {
                let alpha = if a[(j, j)] > 0.0 { -norm } else { norm };
                let mut v = vec![0.0; m - j];
                for i in j..m {
                    v[i - j] = a[(i, j)];
                }
                v[0] -= alpha;
                let vnorm2: f64 = v.iter().map(|x| x * x).sum();
                if vnorm2 > 0.0 {
                    for col in j..n {
                        let mut dot = 0.0;
                        for i in j..m {
                            dot += v[i - j] * a[(i, col)];
                        }
                        let f = 2.0 * dot / vnorm2;
                        for i in j..m {
                            a[(i, col)] -= f * v[i - j];
                        }
                    }
                }
                a[(j, j)] = alpha;
                for i in j + 1..m {
                    a[(i, j)] = 0.0;
                }
            }
        }
        // Right reflection: zero a[j, j+2..].
        if j + 2 < n {
            let norm = a.view((j, j + 1), (1, n - j - 1)).norm();
            if norm > 0.0 {
                let alpha = if a[(j, j + 1)] > 0.0 { -norm } else { norm };
                let mut v = vec![0.0; n - j - 1];
                for c in j + 1..n {
                    v[c - j - 1] = a[(j, c)];
                }
                v[0] -= alpha;
                let vnorm2: f64 = v.iter().map(|x| x * x).sum();
                if vnorm2 > 0.0 {
                    for row in j..m {
                        let mut dot = 0.0;
                        for c in j + 1..n {
                            dot += v[c - j - 1] * a[(row, c)];
                        }
                        let f = 2.0 * dot / vnorm2;
                        for c in j + 1..n {
                            a[(row, c)] -= f * v[c - j - 1];
                        }
                    }
                }
                a[(j, j + 1)] = alpha;
                for c in j + 2..n {
                    a[(j, c)] = 0.0;
                }
            }
        }
    }

    let d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let e: Vec<f64> = (0..n.saturating_sub(1)).map(|i| a[(i, i + 1)]).collect();
    (d, e)
}

/// Drives a bidiagonal (d, e) to diagonal form in place by zero-shift QR
/// sweeps on the trailing unreduced block, deflating negligible
/// superdiagonal entries with the relative-accuracy recurrence.
fn bidiagonal_values(d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    if n <= 1 {
        return;
    }
    let max_sweeps = 60 * n * n + 200;
    let eps = f64::EPSILON;
    let smax_all = d
        .iter()
        .chain(e.iter())
        .fold(0.0f64, |acc, x| acc.max(x.abs()));

    for sweep in 0..max_sweeps {
        // Relative deflation: a superdiagonal entry is negligible when it is
        // tiny against the running lower bound mu on nearby singular values.
        // Late in the budget, fall back to the absolute criterion as well;
        // by then shifts have already limited the attainable accuracy.
        let relax = sweep > max_sweeps / 2;
        let mut mu = d[0].abs();
        for i in 0..n - 1 {
            if e[i].abs() <= DEFLATE_RTOL * mu
                || e[i] == 0.0
                || mu == 0.0
                || (relax && e[i].abs() <= eps * smax_all)
            {
                e[i] = 0.0;
                mu = d[i + 1].abs();
            } else {
                mu = d[i + 1].abs() * (mu / (mu + e[i].abs()));
            }
        }

        // Locate the trailing unreduced block [lo, hi].
        let mut hi = n - 1;
        while hi > 0 && e[hi - 1] == 0.0 {
            hi -= 1;
        }
        if hi == 0 {
            return;
        }
        let mut lo = hi;
        while lo > 0 && e[lo - 1] != 0.0 {
            lo -= 1;
        }

        // Block grading decides the sweep kind: zero shift preserves
        // relative accuracy on graded blocks, a shift is needed for
        // progress on clustered ones.
        let mut smax = 0.0f64;
        for i in lo..=hi {
            smax = smax.max(d[i].abs());
            if i < hi {
                smax = smax.max(e[i].abs());
            }
        }
        let mut sminl = d[lo].abs();
        let mut mu = sminl;
        for i in lo..hi {
            mu = d[i + 1].abs() * (mu / (mu + e[i].abs()));
            sminl = sminl.min(mu);
        }

        let mut shift = 0.0;
        let block = (hi - lo + 1) as f64;
        if smax > 0.0 && block * DEFLATE_RTOL * (sminl / smax) > eps.max(0.01 * DEFLATE_RTOL) {
            let sll = d[lo].abs();
            shift = trailing_singular_value(d[hi - 1], e[hi - 1], d[hi]);
            if sll > 0.0 && (shift / sll) * (shift / sll) < eps {
                shift = 0.0;
            }
        }

        if shift == 0.0 {
            zero_shift_sweep(d, e, lo, hi);
        } else {
            shifted_sweep(d, e, lo, hi, shift);
        }
    }
    debug_assert!(false, "bidiagonal QR failed to converge");
}

/// Smaller singular value of the 2 x 2 upper triangular `[[f, g], [0, h]]`,
/// computed without squaring (the `dlas2` formulas).
fn trailing_singular_value(f: f64, g: f64, h: f64) -> f64 {
    let fa = f.abs();
    let ga = g.abs();
    let ha = h.abs();
    let fhmn = fa.min(ha);
    let fhmx = fa.max(ha);
    if fhmn == 0.0 {
        return 0.0;
    }
    if ga < fhmx {
        let a = 1.0 + fhmn / fhmx;
        let t = (fhmx - fhmn) / fhmx;
        let u = (ga / fhmx) * (ga / fhmx);
        let c = 2.0 / ((a * a + u).sqrt() + (t * t + u).sqrt());
        fhmn * c
    } else {
        let u = fhmx / ga;
        if u == 0.0 {
            // ga overflows the ratio; the product form avoids it.
            fhmn * fhmx / ga
        } else {
            let a = 1.0 + fhmn / fhmx;
            let t = (fhmx - fhmn) / fhmx;
            let c = 1.0 / ((1.0 + (a * u) * (a * u)).sqrt() + (1.0 + (t * u) * (t * u)).sqrt());
            2.0 * fhmn * c * u
        }
    }
}

/// One forward implicit QR sweep with the given shift on the block
/// `lo..=hi`, chasing the bulge top to bottom.
fn shifted_sweep(d: &mut [f64], e: &mut [f64], lo: usize, hi: usize, shift: f64) {
    let mut f = (d[lo].abs() - shift) * (d[lo].signum() + shift / d[lo]);
    let mut g = e[lo];
    for i in lo..hi {
        let (cosr, sinr, r) = givens(f, g);
        if i > lo {
            e[i - 1] = r;
        }
        f = cosr * d[i] + sinr * e[i];
        e[i] = cosr * e[i] - sinr * d[i];
        g = sinr * d[i + 1];
        d[i + 1] *= cosr;
        let (cosl, sinl, r2) = givens(f, g);
        d[i] = r2;
        f = cosl * e[i] + sinl * d[i + 1];
        d[i + 1] = cosl * d[i + 1] - sinl * e[i];
        if i < hi - 1 {
            g = sinl * e[i + 1];
            e[i + 1] *= cosl;
        }
    }
    e[hi - 1] = f;
}

/// One forward zero-shift QR sweep on the block `lo..=hi`.
fn zero_shift_sweep(d: &mut [f64], e: &mut [f64], lo: usize, hi: usize) {
    let mut cs = 1.0;
    let mut oldcs = 1.0;
    let mut oldsn = 0.0;
    for i in lo..hi {
        let (c, s, r) = givens(d[i] * cs, e[i]);
        cs = c;
        let sn = s;
        if i > lo {
            e[i - 1] = oldsn * r;
        }
        let (oc, os, dn) = givens(oldcs * r, d[i + 1] * sn);
        oldcs = oc;
        oldsn = os;
        d[i] = dn;
    }
    let h = d[hi] * cs;
    e[hi - 1] = h * oldsn;
    d[hi] = h * oldcs;
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Independent oracle: eigenvalues of a symmetric matrix by cyclic
    /// Jacobi rotations. Used only to cross-check the bidiagonal route via
    /// eig(A^T A) = sigma^2.
    fn jacobi_eigenvalues(sym: &DMatrix<f64>) -> Vec<f64> {
        let n = sym.nrows();
        let mut a = sym.clone();
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off.sqrt() < 1e-14 * (1.0 + a.abs().max()) {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[(i, i)]).collect()
    }

    #[test]
    fn diagonal_matrix_with_extreme_scale_spread() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-8, 1e8]));
        let smin = min_singular_value(&a);
        assert!(
            (smin - 1e-8).abs() <= 1e-10 * 1e-8,
            "sigma_min = {smin:e}, relative error {:.3e}",
            (smin - 1e-8).abs() / 1e-8
        );
    }

    #[test]
    fn graded_bidiagonal_keeps_relative_accuracy() {
        // Kahan-style graded matrix: sigma_min far below sigma_max, with
        // couplings that defeat absolute-accuracy deflation.
        let n = 12;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = 10f64.powi(-(i as i32));
            if i + 1 < n {
                a[(i, i + 1)] = 0.5 * 10f64.powi(-(i as i32));
            }
        }
        let smin = min_singular_value(&a);
        // Oracle on A^T A in extended precision is unavailable; instead check
        // against the determinant identity |det A| = prod sigma_i, using the
        // remaining values from the same routine but the determinant from the
        // triangular structure (exact product of diagonals).
        let values = singular_values(&a);
        let prod: f64 = values.iter().map(|v| v.ln()).sum();
        let det: f64 = (0..n).map(|i| a[(i, i)].ln()).sum();
        assert!(
            (prod - det).abs() < 1e-10,
            "log-product mismatch {prod} vs {det}"
        );
        assert!(smin > 0.0 && smin < 1e-10);
    }

    #[test]
    fn random_rectangular_matches_jacobi_oracle() {
        let mut rng = StdRng::seed_from_u64(41);
        for &(m, k) in &[(5usize, 3usize), (3, 5), (9, 9), (14, 6)] {
            let a = DMatrix::from_fn(m, k, |_, _| rng.gen_range(-1.0..1.0));
            let mut ours = singular_values(&a);
            ours.sort_by(|x, y| x.partial_cmp(y).unwrap());

            let gram = if m >= k {
                a.transpose() * &a
            } else {
                &a * a.transpose()
            };
            let mut eig = jacobi_eigenvalues(&gram);
            eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (s, lam) in ours.iter().zip(eig.iter()) {
                let expected = lam.max(0.0).sqrt();
                assert!(
                    (s - expected).abs() < 1e-8 * (1.0 + expected),
                    "sigma {s} vs oracle {expected}"
                );
            }
        }
    }

    #[test]
    fn rank_deficient_matrix_reports_zero() {
        let mut rng = StdRng::seed_from_u64(43);
        let b = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
        let a = &b * b.transpose(); // rank 2 in a 6x6 frame
        let smin = min_singular_value(&a);
        assert!(smin.abs() < 1e-12, "sigma_min = {smin:e}");
    }

    #[test]
    fn clustered_values_converge_and_stay_accurate() {
        // Repeated singular values stall zero-shift sweeps (the convergence
        // factor is the squared ratio of adjacent values, 1 on a cluster),
        // so this exercises the shifted path.
        let mut rng = StdRng::seed_from_u64(53);
        let n = 8;
        let target = [2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 0.5, 0.5];
        let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q1 = crate::linalg::qr_factorize(&raw).q().clone();
        let raw2 = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q2 = crate::linalg::qr_factorize(&raw2).q().clone();
        let a = &q1 * DMatrix::from_diagonal(&DVector::from_row_slice(&target)) * q2.transpose();
        let mut got = singular_values(&a);
        got.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (g, t) in got.iter().zip(target.iter()) {
            assert!((g - t).abs() < 1e-12 * (1.0 + t), "{g} vs {t}");
        }
    }

    #[test]
    fn singular_values_invariant_under_transpose() {
        let mut rng = StdRng::seed_from_u64(47);
        let a = DMatrix::from_fn(7, 4, |_, _| rng.gen_range(-1.0..1.0));
        let mut s1 = singular_values(&a);
        let mut s2 = singular_values(&a.transpose());
        s1.sort_by(|x, y| x.partial_cmp(y).unwrap());
        s2.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in s1.iter().zip(s2.iter()) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }
}
