//! Randomized sampling machinery: optimal inclusion probabilities, the
//! adaptive sketch size, Bernoulli subset realization, and the two
//! estimator families built on them.
//!
//! The *average* estimators (`g_bar`, `H_bar`) follow a sketch-and-project
//! rule: after each iteration they move the minimum distance needed to
//! agree with the freshly fitted model on the sampled directions. The
//! *ameliorated* estimators reweight the same information by inverse
//! inclusion probabilities, which makes them unbiased for the model
//! quantity at the cost of variance; the variance has a closed weighted
//! norm form, and the probabilities minimizing it under an expected-size
//! budget have a water-filling closed form.
//!
//! Everything here is verified against independent routes: constrained
//! projection oracles for the closed forms, a dual bisection for the
//! optimal probabilities, and exhaustive subset enumeration (n small) for
//! the estimator laws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors from sampling utilities.
#[derive(Debug, Error)]
pub enum SketchError {
    /// The exhaustive enumeration oracle refuses large dimensions.
    #[error("enumeration over 2^{0} subsets refused (limit n <= 12)")]
    EnumerationTooLarge(usize),
    /// Inconsistent dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Floor applied to inclusion probabilities so inverse weights stay finite.
///
/// The closed form can emit exact zeros when a component of `Q^T delta`
/// vanishes; flooring perturbs the expected size by at most `n` times this.
pub const PROBABILITY_FLOOR: f64 = 1e-8;

/// Per-coordinate inclusion probabilities with their expected subset size.
#[derive(Debug, Clone)]
pub struct ProbabilityVector {
    /// Entries in `[PROBABILITY_FLOOR, 1]`.
    pub pi: DVector<f64>,
    /// Sum of the entries (after flooring).
    pub expected_size: f64,
}

impl ProbabilityVector {
    /// Floors and clamps raw probabilities into the valid range.
    pub fn new(raw: DVector<f64>) -> Self {
        let pi = raw.map(|x| x.clamp(PROBABILITY_FLOOR, 1.0));
        let expected_size = pi.sum();
        ProbabilityVector { pi, expected_size }
    }

    /// Number of coordinates.
    pub fn len(&self) -> usize {
        self.pi.len()
    }

    /// True when there are no coordinates.
    pub fn is_empty(&self) -> bool {
        self.pi.len() == 0
    }

    /// All-ones probabilities (deterministic full subset).
    pub fn ones(n: usize) -> Self {
        ProbabilityVector {
            pi: DVector::from_element(n, 1.0),
            expected_size: n as f64,
        }
    }
}

/// A realized subset together with the RNG position that produced it, so
/// the draw can be replayed exactly.
#[derive(Debug, Clone)]
pub struct SampleRealization {
    /// Sorted included indices (0-based).
    pub j: Vec<usize>,
    /// Stream of the generator at the time of the draws.
    pub stream: u64,
    /// Word position of the generator just before the draws.
    pub word_pos: u128,
}

/// Water-filling probabilities minimizing the reweighted variance
/// `sum_i v_i^2 / pi_i` subject to `sum_i pi_i = p_k` and `pi_i <= 1`,
/// where `v = |Q^T delta|`.
///
/// Sorting `v` ascending (ties broken by original index), the largest
/// `c` with `0 < p_k + c - n` and `(p_k + c - n) v_(c) <= sum_{j<=c} v_(j)`
/// determines which coordinates stay interior; those receive probability
/// proportional to `v`, the rest saturate at 1. The sum equals `p_k`
/// exactly before flooring. All-zero `delta` falls back to uniform
/// `p_k / n`; an all-zero *interior* group spreads its budget uniformly.
pub fn optimal_probabilities(
    delta: &DVector<f64>,
    q: &DMatrix<f64>,
    p_k: usize,
) -> ProbabilityVector {
    let n = delta.len();
    assert!(q.nrows() == n && q.ncols() == n, "Q must be n x n");
    assert!(1 <= p_k && p_k <= n, "p_k must be in 1..=n");
    if p_k == n {
        return ProbabilityVector::ones(n);
    }
    let v = (q.transpose() * delta).map(f64::abs);
    if v.iter().all(|&x| x == 0.0) {
        return ProbabilityVector::new(DVector::from_element(n, p_k as f64 / n as f64));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));

    // Prefix sums over the sorted values; find the largest feasible c.
    let mut prefix = vec![0.0; n + 1];
    for (rank, &idx) in order.iter().enumerate() {
        prefix[rank + 1] = prefix[rank] + v[idx];
    }
    let mut chosen = None;
    for c in (1..=n).rev() {
        let budget = p_k as f64 + c as f64 - n as f64;
        if budget <= 0.0 {
            break;
        }
        if budget * v[order[c - 1]] <= prefix[c] {
            chosen = Some(c);
            break;
        }
    }
    // c = n - p_k + 1 always satisfies the inequality (budget 1, and the
    // pivot value is one of the summands), so a feasible c exists.
    let c = chosen.expect("water-filling always has a feasible split");
    let budget = p_k as f64 + c as f64 - n as f64;

    let mut raw = DVector::zeros(n);
    if prefix[c] > 0.0 {
        for &idx in &order[..c] {
            raw[idx] = budget * v[idx] / prefix[c];
        }
    } else {
        // Interior values are all zero: the budget is spread uniformly.
        for &idx in &order[..c] {
            raw[idx] = budget / c as f64;
        }
    }
    for &idx in &order[c..] {
        raw[idx] = 1.0;
    }
    ProbabilityVector::new(raw)
}

/// Smallest expected subset size whose optimal probabilities keep the
/// reweighted deviation of `delta` within the accuracy budget.
///
/// Starting at `b0`, each candidate size is accepted when
/// `||delta||^2_{Q D Q^T - I} <= n C^2 radius^2` with `D = diag(1 / pi_i)`.
/// `C = 0` forces the full deterministic subset outright, bypassing the
/// search (even a zero norm must not admit a smaller subset then, or the
/// zero-variance reduction to the deterministic method would break).
pub fn choose_sketch_size(
    radius: f64,
    q: &DMatrix<f64>,
    big_c: f64,
    delta: &DVector<f64>,
    b0: usize,
) -> (usize, ProbabilityVector) {
    let n = delta.len();
    assert!(1 <= b0 && b0 <= n, "b0 must be in 1..=n");
    if big_c == 0.0 {
        return (n, ProbabilityVector::ones(n));
    }
    let bound = n as f64 * big_c * big_c * radius * radius;
    for b in b0..=n {
        let pi = optimal_probabilities(delta, q, b);
        if weighted_deviation(delta, q, &pi) <= bound {
            return (b, pi);
        }
    }
    (n, ProbabilityVector::ones(n))
}

/// The weighted norm `||x||^2_{Q D Q^T - I}` with `D = diag(1 / pi_i)`,
/// equal to `sum_i (1/pi_i - 1) [Q^T x]_i^2` for orthogonal `Q`.
fn weighted_deviation(x: &DVector<f64>, q: &DMatrix<f64>, pi: &ProbabilityVector) -> f64 {
    let w = q.transpose() * x;
    let mut total = 0.0;
    for i in 0..w.len() {
        total += (1.0 / pi.pi[i] - 1.0) * w[i] * w[i];
    }
    total
}

/// Independent Bernoulli realization: index `i` joins the subset when the
/// `i`-th draw falls below `pi_i`. Exactly `n` draws are consumed in index
/// order, so trajectories replay bit for bit from the recorded state.
pub fn realize_subset(pi: &ProbabilityVector, rng: &mut ChaCha8Rng) -> SampleRealization {
    let stream = rng.get_stream();
    let word_pos = rng.get_word_pos();
    let mut j = Vec::new();
    for i in 0..pi.len() {
        let u: f64 = rng.gen();
        if u < pi.pi[i] {
            j.push(i);
        }
    }
    SampleRealization {
        j,
        stream,
        word_pos,
    }
}

/// Average gradient and Hessian estimates evolved by sketch-and-project.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    /// Average gradient estimate.
    pub g_bar: DVector<f64>,
    /// Average Hessian estimate, symmetric.
    pub h_bar: DMatrix<f64>,
}

impl EstimatorState {
    /// Zero-initialized state in dimension `n`.
    pub fn zeros(n: usize) -> Self {
        EstimatorState {
            g_bar: DVector::zeros(n),
            h_bar: DMatrix::zeros(n, n),
        }
    }
}

/// Inverse-probability-weighted estimates for one realized subset.
#[derive(Debug, Clone)]
pub struct AmelioratedPair {
    /// Gradient estimate.
    pub g_tilde: DVector<f64>,
    /// Hessian estimate, symmetric.
    pub h_tilde: DMatrix<f64>,
    /// The weights `1 / pi_i` for `i` in the realized subset.
    pub d: DVector<f64>,
}

/// Which ameliorated-gradient formula to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Keep the out-of-subspace part of the average estimate.
    Full,
    /// Drop it: the estimate lives in the sampled subspace, matching the
    /// subspace trust-region step.
    Practical,
}

/// Rows of `Q^T` selected by `j`, as a `|j| x n` matrix.
fn subspace_rows(q: &DMatrix<f64>, j: &[usize]) -> DMatrix<f64> {
    let n = q.nrows();
    let mut s = DMatrix::zeros(j.len(), n);
    for (r, &i) in j.iter().enumerate() {
        for k in 0..n {
            s[(r, k)] = q[(k, i)];
        }
    }
    s
}

/// Sketch-and-project update of the average gradient: the closest vector
/// to `g_bar` agreeing with `g_hat` on the rows of `S`.
pub fn update_average_gradient(
    g_bar: &DVector<f64>,
    s: &DMatrix<f64>,
    g_hat: &DVector<f64>,
) -> DVector<f64> {
    g_bar + s.transpose() * (s * (g_hat - g_bar))
}

/// Sketch-and-project update of the average Hessian: the closest symmetric
/// matrix to `H_bar` whose compression onto `S` equals `h_hat_sub`.
/// The output is explicitly symmetrized.
pub fn update_average_hessian(
    h_bar: &DMatrix<f64>,
    s: &DMatrix<f64>,
    h_hat_sub: &DMatrix<f64>,
) -> DMatrix<f64> {
    let sh = s * h_bar;
    let compressed = &sh * s.transpose();
    let mut out = h_bar + s.transpose() * (h_hat_sub - compressed) * s;
    symmetrize(&mut out);
    out
}

/// Inverse-probability-weighted gradient estimate over the realized subset.
///
/// With `S` the selected rows of `Q^T` and `D = diag(1/pi_i, i in j)`:
/// full mode returns `g_bar - S^T D S g_bar + S^T D S g_hat`, practical
/// mode returns `S^T D S g_hat` (confined to the sampled subspace).
pub fn ameliorated_gradient(
    g_bar: &DVector<f64>,
    q: &DMatrix<f64>,
    j: &[usize],
    pi: &ProbabilityVector,
    g_hat: &DVector<f64>,
    mode: EstimatorMode,
) -> DVector<f64> {
    let n = q.nrows();
    let diff;
    let (mut out, target): (DVector<f64>, &DVector<f64>) = match mode {
        EstimatorMode::Full => {
            diff = g_hat - g_bar;
            (g_bar.clone(), &diff)
        }
        EstimatorMode::Practical => (DVector::zeros(n), g_hat),
    };
    for &i in j {
        let qi = q.column(i);
        let coeff = qi.dot(target) / pi.pi[i];
        out.axpy(coeff, &qi, 1.0);
    }
    out
}

/// Inverse-probability-weighted Hessian estimate over the realized subset:
/// `H_bar - S^T D S H_bar S^T D S + S^T D h_hat_sub D S`, symmetrized.
/// `h_hat_sub` is the model Hessian compressed onto the selected rows,
/// ordered like `j`.
pub fn ameliorated_hessian(
    h_bar: &DMatrix<f64>,
    q: &DMatrix<f64>,
    j: &[usize],
    pi: &ProbabilityVector,
    h_hat_sub: &DMatrix<f64>,
) -> DMatrix<f64> {
    assert_eq!(h_hat_sub.nrows(), j.len(), "compressed Hessian mismatch");
    let s = subspace_rows(q, j);
    // W = D S: the reweighted rows.
    let mut w = s.clone();
    for (r, &i) in j.iter().enumerate() {
        let scale = 1.0 / pi.pi[i];
        for k in 0..w.ncols() {
            w[(r, k)] *= scale;
        }
    }
    let compressed = &s * h_bar * s.transpose();
    let mut out = h_bar + w.transpose() * (h_hat_sub - compressed) * &w;
    symmetrize(&mut out);
    out
}

/// Variance of the full-mode ameliorated gradient around its expectation:
/// the weighted norm `||g_bar - expectation||^2_{Q D Q^T - I}` with
/// `D = diag(1 / pi_i)` over all coordinates.
pub fn gradient_estimator_variance(
    g_bar: &DVector<f64>,
    q: &DMatrix<f64>,
    pi: &ProbabilityVector,
    expectation: &DVector<f64>,
) -> f64 {
    let diff = g_bar - expectation;
    weighted_deviation(&diff, q, pi)
}

/// Exact law of the full-mode ameliorated gradient by exhaustive subset
/// enumeration: the mean and total variance over all `2^n` subsets, with
/// a per-subset model gradient supplied by `g_hat_map`.
///
/// Refuses `n > 12`.
pub fn enumerate_estimator_law<F>(
    q: &DMatrix<f64>,
    pi: &ProbabilityVector,
    g_bar: &DVector<f64>,
    g_hat_map: F,
) -> Result<(DVector<f64>, f64), SketchError>
where
    F: Fn(&[usize]) -> DVector<f64>,
{
    let n = pi.len();
    if n > 12 {
        return Err(SketchError::EnumerationTooLarge(n));
    }
    if q.nrows() != n || g_bar.len() != n {
        return Err(SketchError::DimensionMismatch(format!(
            "Q is {} x {}, g_bar has {}, pi has {n}",
            q.nrows(),
            q.ncols(),
            g_bar.len()
        )));
    }
    let mut mean = DVector::zeros(n);
    let mut second_moment = 0.0;
    let mut samples = Vec::with_capacity(1usize << n);
    for mask in 0u32..(1u32 << n) {
        let subset: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let mut weight = 1.0;
        for i in 0..n {
            weight *= if subset.contains(&i) {
                pi.pi[i]
            } else {
                1.0 - pi.pi[i]
            };
        }
        let g_hat = g_hat_map(&subset);
        let g_tilde = ameliorated_gradient(g_bar, q, &subset, pi, &g_hat, EstimatorMode::Full);
        mean.axpy(weight, &g_tilde, 1.0);
        second_moment += weight * g_tilde.norm_squared();
        samples.push((weight, g_tilde));
    }
    let variance = second_moment - mean.norm_squared();
    // Guard against cancellation for near-deterministic laws.
    let variance = if variance.abs() < 1e-12 * (1.0 + second_moment) {
        samples
            .iter()
            .map(|(w, g)| w * (g - &mean).norm_squared())
            .sum()
    } else {
        variance
    };
    Ok((mean, variance))
}

/// Forces exact symmetry by averaging opposite entries.
fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::linalg::qr_factorize;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    proptest! {
        /// Calibration of the water-filling output: entries live in
        /// `[PROBABILITY_FLOOR, 1]`, the mass matches the budget up to the
        /// flooring allowance, and scaling `delta` leaves the minimizer
        /// unchanged (the objective is homogeneous in `v`).
        #[test]
        fn probabilities_are_calibrated(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = StdRng::seed_from_u64(seed);
            let p_k = rng.gen_range(1..=n);
            // Exact zeros exercise the floor and the uniform fallbacks.
            let delta = DVector::from_fn(n, |_, _| {
                if rng.gen::<f64>() < 0.25 {
                    0.0
                } else {
                    rng.gen_range(-2.0..2.0f64)
                }
            });
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = qr_factorize(&a).q().clone();

            let pi = optimal_probabilities(&delta, &q, p_k);
            for &x in pi.pi.iter() {
                prop_assert!((PROBABILITY_FLOOR..=1.0).contains(&x), "entry {} out of range", x);
            }
            let mass = pi.pi.sum();
            prop_assert!(mass >= p_k as f64 - 1e-8);
            prop_assert!(mass <= p_k as f64 + n as f64 * PROBABILITY_FLOOR + 1e-8);
            prop_assert!((pi.expected_size - mass).abs() <= 1e-12);

            let scaled = optimal_probabilities(&(&delta * 37.5), &q, p_k);
            for i in 0..n {
                prop_assert!(
                    (pi.pi[i] - scaled.pi[i]).abs() <= 1e-10,
                    "scale changed pi[{}]: {} vs {}",
                    i,
                    pi.pi[i],
                    scaled.pi[i]
                );
            }
        }

        /// Subset realization: indices are sorted, in range, certainties are
        /// always included, and exactly `n` uniforms are consumed so the
        /// recorded word position lets the draw be replayed.
        #[test]
        fn realization_respects_certainties(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = StdRng::seed_from_u64(seed);
            let raw = DVector::from_fn(n, |_, _| {
                if rng.gen::<f64>() < 0.4 {
                    1.5 // clamps to a certainty
                } else {
                    rng.gen_range(0.0..1.0f64)
                }
            });
            let pi = ProbabilityVector::new(raw);

            let mut draw = ChaCha8Rng::seed_from_u64(seed);
            draw.set_stream(3);
            let before = draw.get_word_pos();
            let real = realize_subset(&pi, &mut draw);

            prop_assert_eq!(real.stream, 3);
            prop_assert_eq!(real.word_pos, before);
            prop_assert!(real.j.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(real.j.iter().all(|&i| i < n));
            for i in 0..n {
                if pi.pi[i] >= 1.0 {
                    prop_assert!(real.j.contains(&i), "certainty {} dropped", i);
                }
            }
            // Replaying from the recorded position reproduces the subset.
            let mut replay = ChaCha8Rng::seed_from_u64(seed);
            replay.set_stream(real.stream);
            replay.set_word_pos(real.word_pos);
            let again = realize_subset(&pi, &mut replay);
            prop_assert_eq!(again.j, real.j);
        }
    }
}
