//! End-to-end derivative-free trust-region drivers.
//!
//! Two entry points share one iteration loop. The sketching driver samples
//! a random coordinate subset of an orthonormal direction frame each
//! iteration, evaluates only along the sampled directions that recycled
//! points do not already cover, fits per-component subspace models, and
//! debiases them into full-space estimates. The deterministic baseline is
//! the same loop pinned to the full space with unit probabilities. The two
//! must produce identical trajectories when the sketching variance budget
//! is zero; the code keeps them on literally the same path in that case
//! (full-rank iterations route through the same full-space solve).

use std::fmt::Write as FmtWrite;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    determine_interpolation_set, identify_initial_subspace, GeometryConfig, InterpolationSelection,
    PointBank,
};
use crate::model::{MnhSystem, QuadraticModel, SketchSystem};
use crate::problems::{CountingOracle, ProblemError};
use crate::sketch::{
    ameliorated_gradient, ameliorated_hessian, choose_sketch_size, realize_subset,
    update_average_gradient, update_average_hessian, EstimatorMode, ProbabilityVector,
};
use crate::trust_region::{
    acceptance_ratio, solve_trsp, update_radius_with_reference, TrustRegionConfig,
};

/// Driver-level failures. Model or geometry trouble inside an iteration is
/// handled by falling back or shrinking, not by erroring out.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("budget of {budget} evaluations cannot initialize dimension {n}")]
    BudgetTooSmall { budget: usize, n: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Which driver variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Randomized direction sampling with debiased estimators.
    Sketching,
    /// Full space, unit probabilities, no randomness.
    DeterministicBaseline,
}

/// How per-component models combine into the least-squares model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineRule {
    /// `g = sum f_i g_i`, `H = sum (g_i g_i^T + H_i)`. The default keeps
    /// the component Hessians unweighted; only the ratio of predicted to
    /// actual reduction notices the difference, never the step direction
    /// on exact-fit problems.
    Unscaled,
    /// `g = 2 sum f_i g_i`, `H = 2 sum (g_i g_i^T + f_i H_i)`: the exact
    /// gradient and Gauss-Newton-plus-curvature Hessian of `sum f_i^2`.
    GaussNewton,
}

/// Which scale the gradient must dominate before the radius may grow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthReference {
    /// Compare against `eta2 * delta` (the standard criticality test).
    Radius,
    /// Compare against `eta2 * ||proxy||` where the proxy is the combined
    /// average gradient driving the sampling distribution.
    ErrorProxy,
}

/// How the average gradients are seeded before the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Evaluate `x0 + delta0 e_i` for every coordinate and take forward
    /// differences per component: `n + 1` evaluations.
    SimplexGradient,
    /// Start from zero gradients: one evaluation at `x0`.
    ZeroGradient,
}

/// Everything a run needs besides the problem itself.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tr: TrustRegionConfig,
    pub geo: GeometryConfig,
    /// Variance budget scale for the sketch-size rule.
    pub variance_c: f64,
    /// Minimal expected sample size.
    pub b0: usize,
    pub mode: SolverMode,
    pub estimator_mode: EstimatorMode,
    pub combine: CombineRule,
    pub growth_reference: GrowthReference,
    pub init: InitStrategy,
    pub seed: u64,
    /// Hard cap on residual-vector evaluations.
    pub max_evals: usize,
    /// Stop when the radius falls below this.
    pub delta_min: f64,
    /// Stop when the model gradient falls below this and the radius is
    /// within a decade of its floor.
    pub g_min: f64,
    /// Stop as soon as the best objective reaches this value. Benchmark
    /// campaigns set it to the accuracy target so runs end early.
    pub target_f: Option<f64>,
}

impl SolverConfig {
    /// Standard constants for dimension `n`: `delta0 = 1`, acceptance at
    /// `0.05`, halve or double with cap `1000 delta0`, ball scale
    /// `sqrt(n)`, `theta1 = 1e-5`, `theta2 = 1e-3`, variance budget
    /// `0.01 sqrt(n)`, minimal sample `1`, practical estimators, budget
    /// `100 (n + 1)`.
    pub fn defaults(n: usize) -> Self {
        let delta0 = 1.0;
        SolverConfig {
            tr: TrustRegionConfig::for_initial_radius(delta0),
            geo: GeometryConfig::for_dimension(n),
            variance_c: 0.01 * (n as f64).sqrt(),
            b0: 1,
            mode: SolverMode::Sketching,
            estimator_mode: EstimatorMode::Practical,
            combine: CombineRule::Unscaled,
            growth_reference: GrowthReference::Radius,
            init: InitStrategy::SimplexGradient,
            seed: 0,
            max_evals: 100 * (n + 1),
            delta_min: 1e-7 * delta0,
            g_min: 1e-8,
            target_f: None,
        }
    }

    /// Defaults with the mode flipped to the deterministic baseline.
    pub fn baseline_defaults(n: usize) -> Self {
        let mut cfg = Self::defaults(n);
        cfg.mode = SolverMode::DeterministicBaseline;
        cfg
    }

    /// Panics when constants are inconsistent.
    pub fn validate(&self) {
        self.tr.validate();
        assert!(self.variance_c >= 0.0, "variance budget must be nonnegative");
        assert!(self.b0 >= 1, "minimal sample size must be at least 1");
        assert!(self.delta_min > 0.0 && self.delta_min < self.tr.delta0);
        assert!(self.g_min > 0.0);
    }
}

/// Per-component quadratic models at a common center.
#[derive(Debug, Clone)]
pub struct ComponentModelSet {
    /// Residual values at the center.
    pub values: DVector<f64>,
    /// Per-component gradients.
    pub gradients: Vec<DVector<f64>>,
    /// Per-component symmetric Hessians.
    pub hessians: Vec<DMatrix<f64>>,
}

/// Combines component models into the least-squares model at `center`.
pub fn combine_least_squares_model(
    center: &DVector<f64>,
    models: &ComponentModelSet,
    rule: CombineRule,
) -> QuadraticModel {
    let n = center.len();
    let m = models.values.len();
    assert_eq!(models.gradients.len(), m, "gradient count mismatch");
    assert_eq!(models.hessians.len(), m, "Hessian count mismatch");
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    for c in 0..m {
        let f_c = models.values[c];
        let g_c = &models.gradients[c];
        g.axpy(f_c, g_c, 1.0);
        h.ger(1.0, g_c, g_c, 1.0);
        match rule {
            CombineRule::Unscaled => h += &models.hessians[c],
            CombineRule::GaussNewton => h += &models.hessians[c] * f_c,
        }
    }
    if rule == CombineRule::GaussNewton {
        g *= 2.0;
        h *= 2.0;
    }
    QuadraticModel {
        center: center.clone(),
        constant: models.values.norm_squared(),
        g,
        h,
    }
}

/// One iteration of a run, in recording order.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// Iteration index, from zero.
    pub k: usize,
    /// Objective at the iterate after this iteration.
    pub f: f64,
    /// Radius used by this iteration.
    pub delta: f64,
    /// Reduction ratio; negative infinity marks a skipped or failed trial.
    pub rho: f64,
    /// Expected sample size handed to the Bernoulli draw.
    pub p_k: usize,
    /// Realized sample size.
    pub j_size: usize,
    /// Cumulative evaluations after this iteration.
    pub evals: usize,
    /// Whether the trial step was taken.
    pub accepted: bool,
    /// Model decrease predicted for the trial step.
    pub predicted_reduction: f64,
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationStatus {
    /// Evaluation budget exhausted.
    Budget,
    /// Radius fell below its floor.
    RadiusFloor,
    /// Small model gradient with the radius near its floor.
    Stationary,
    /// Objective reached the requested target.
    Target,
}

impl TerminationStatus {
    fn as_str(&self) -> &'static str {
        match self {
            TerminationStatus::Budget => "budget",
            TerminationStatus::RadiusFloor => "radius-floor",
            TerminationStatus::Stationary => "stationary",
            TerminationStatus::Target => "target",
        }
    }
}

/// Full record of a run.
#[derive(Debug, Clone)]
pub struct RunHistory {
    pub problem: String,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    /// `(evaluation count, best objective so far)` at every strict
    /// improvement, starting with the first evaluation.
    pub improvements: Vec<(usize, f64)>,
    pub status: TerminationStatus,
    /// Objective at the starting point.
    pub f0: f64,
    pub final_x: DVector<f64>,
    pub final_f: f64,
    pub total_evals: usize,
}

impl RunHistory {
    /// Best objective seen within the first `evals` evaluations.
    pub fn best_within(&self, evals: usize) -> f64 {
        let mut best = f64::INFINITY;
        for &(count, f) in &self.improvements {
            if count > evals {
                break;
            }
            best = f;
        }
        best
    }

    /// First evaluation count at which the objective fell to `target` or
    /// below, if it ever did.
    pub fn first_eval_reaching(&self, target: f64) -> Option<usize> {
        self.improvements
            .iter()
            .find(|&&(_, f)| f <= target)
            .map(|&(count, _)| count)
    }

    /// Writes the per-iteration table as CSV with a fixed column order.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "k,f,delta,rho,p_k,J_size,evals,accepted")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{},{},{},{}",
                r.k, r.f, r.delta, r.rho, r.p_k, r.j_size, r.evals, r.accepted
            )?;
        }
        Ok(())
    }

    /// The CSV table as a string.
    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Serializes the run, records included, as JSON.
    pub fn to_json(&self) -> String {
        fn num(v: f64) -> serde_json::Value {
            serde_json::Number::from_f64(v)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null)
        }
        let records: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "k": r.k,
                    "f": num(r.f),
                    "delta": num(r.delta),
                    "rho": num(r.rho),
                    "p_k": r.p_k,
                    "j_size": r.j_size,
                    "evals": r.evals,
                    "accepted": r.accepted,
                    "predicted_reduction": num(r.predicted_reduction),
                })
            })
            .collect();
        let improvements: Vec<serde_json::Value> = self
            .improvements
            .iter()
            .map(|&(count, f)| serde_json::json!([count, num(f)]))
            .collect();
        serde_json::json!({
            "problem": self.problem,
            "n": self.n,
            "m": self.m,
            "seed": self.seed,
            "status": self.status.as_str(),
            "f0": num(self.f0),
            "final_f": num(self.final_f),
            "final_x": self.final_x.iter().copied().collect::<Vec<f64>>(),
            "total_evals": self.total_evals,
            "records": records,
            "improvements": improvements,
        })
        .to_string()
    }
}

/// Average model state for one residual component.
#[derive(Debug, Clone)]
pub struct ComponentState {
    pub g_bar: DVector<f64>,
    pub h_bar: DMatrix<f64>,
}

/// Oracle wrapper that tracks the best objective per evaluation count.
struct Evaluator<'a> {
    oracle: &'a mut CountingOracle,
    best_f: f64,
    improvements: Vec<(usize, f64)>,
}

impl<'a> Evaluator<'a> {
    fn new(oracle: &'a mut CountingOracle) -> Self {
        Evaluator {
            oracle,
            best_f: f64::INFINITY,
            improvements: Vec::new(),
        }
    }

    fn evaluate(&mut self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        let r = self.oracle.evaluate(x)?;
        let f = r.norm_squared();
        if f.is_finite() && f < self.best_f {
            self.best_f = f;
            self.improvements.push((self.oracle.count(), f));
        }
        Ok(r)
    }

    fn count(&self) -> usize {
        self.oracle.count()
    }
}

/// Evaluates the start simplex and seeds per-component average gradients
/// by forward differences; average Hessians start at zero.
///
/// Uses `n + 1` evaluations (`1` for [`InitStrategy::ZeroGradient`]) and
/// fails before touching the oracle when the budget cannot cover them.
pub fn init_average_gradient(
    oracle: &mut CountingOracle,
    x0: &DVector<f64>,
    delta0: f64,
    strategy: InitStrategy,
) -> Result<(Vec<ComponentState>, PointBank), SolverError> {
    let n = x0.len();
    let m = oracle.spec().m;
    let needed = match strategy {
        InitStrategy::SimplexGradient => n + 1,
        InitStrategy::ZeroGradient => 1,
    };
    if let Some(left) = oracle.remaining() {
        if left < needed {
            return Err(SolverError::BudgetTooSmall {
                budget: oracle.count() + left,
                n,
            });
        }
    }

    let mut bank = PointBank::new(n, m);
    let r0 = oracle.evaluate(x0)?;
    bank.push(x0.clone(), r0.clone());
    let mut comps = vec![
        ComponentState {
            g_bar: DVector::zeros(n),
            h_bar: DMatrix::zeros(n, n),
        };
        m
    ];
    if strategy == InitStrategy::SimplexGradient {
        for i in 0..n {
            let mut y = x0.clone();
            y[i] += delta0;
            let r = oracle.evaluate(&y)?;
            for c in 0..m {
                comps[c].g_bar[i] = (r[c] - r0[c]) / delta0;
            }
            bank.push(y, r);
        }
    }
    Ok((comps, bank))
}

/// Rows of `Q^T` selected by sorted indices, as a `|idx| x n` matrix.
fn frame_rows(q: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let n = q.nrows();
    let mut s = DMatrix::zeros(idx.len(), n);
    for (r, &i) in idx.iter().enumerate() {
        for k in 0..n {
            s[(r, k)] = q[(k, i)];
        }
    }
    s
}

/// Runs the randomized basis-sketching trust-region method.
pub fn run_basis_sketching(
    oracle: &mut CountingOracle,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<RunHistory, SolverError> {
    assert_eq!(
        cfg.mode,
        SolverMode::Sketching,
        "config is set up for the baseline"
    );
    drive(oracle, x0, cfg)
}

/// Runs the deterministic full-space control arm.
pub fn run_deterministic_baseline(
    oracle: &mut CountingOracle,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<RunHistory, SolverError> {
    assert_eq!(
        cfg.mode,
        SolverMode::DeterministicBaseline,
        "config is set up for sketching"
    );
    drive(oracle, x0, cfg)
}

/// Convenience entry: runs whichever mode the config selects on a problem's
/// standard start with a fresh budget-capped oracle.
pub fn run_on_problem(
    problem: &crate::problems::ProblemSpec,
    cfg: &SolverConfig,
) -> Result<RunHistory, SolverError> {
    let mut oracle = CountingOracle::with_budget(problem.clone(), cfg.max_evals);
    let x0 = problem.x0.clone();
    drive(&mut oracle, &x0, cfg)
}

/// Combined model produced by one iteration's solves.
struct IterationEstimates {
    /// Combined model gradient.
    g_comb: DVector<f64>,
    /// Combined model Hessian accumulator.
    h_comb: DMatrix<f64>,
}

fn drive(
    oracle: &mut CountingOracle,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<RunHistory, SolverError> {
    cfg.validate();
    let n = x0.len();
    let m = oracle.spec().m;
    let problem_name = oracle.spec().name.to_string();
    let baseline = cfg.mode == SolverMode::DeterministicBaseline;

    let init_cost = match cfg.init {
        InitStrategy::SimplexGradient => n + 1,
        InitStrategy::ZeroGradient => 1,
    };
    if cfg.max_evals < init_cost + 1 {
        return Err(SolverError::BudgetTooSmall {
            budget: cfg.max_evals,
            n,
        });
    }

    let mut ev = Evaluator::new(oracle);
    let (mut comps, mut bank) = {
        // Route the init evaluations through the tracker by inlining its
        // bookkeeping: init uses the raw oracle, so replay improvements.
        let (comps, bank) = init_average_gradient(ev.oracle, x0, cfg.tr.delta0, cfg.init)?;
        for i in 0..bank.len() {
            let f = bank.sum_squares(i);
            if f < ev.best_f {
                ev.best_f = f;
                ev.improvements.push((i + 1, f));
            }
        }
        (comps, bank)
    };

    let mut x = x0.clone();
    let mut rx = bank.residuals(0).clone();
    let mut fx = bank.sum_squares(0);
    let f0 = fx;
    let mut center_idx = 0usize;
    let mut delta = cfg.tr.delta0;
    let mut records: Vec<IterationRecord> = Vec::new();

    let status = loop {
        let k = records.len();

        // Recycle nearby directions into an orthonormal frame.
        let sub = identify_initial_subspace(&bank, &x, delta, &cfg.geo);
        let rank = sub.rank;
        let q = sub.q;

        // Proxy for the model deviation: the combined average gradient.
        let mut proxy = DVector::zeros(n);
        for c in 0..m {
            proxy.axpy(rx[c], &comps[c].g_bar, 1.0);
        }

        let (p_k, pi) = if baseline {
            (n, ProbabilityVector::ones(n))
        } else {
            choose_sketch_size(delta, &q, cfg.variance_c, &proxy, cfg.b0)
        };
        let j: Vec<usize> = if baseline {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64 + 1);
            realize_subset(&pi, &mut rng).j
        };

        // Fresh directions: sampled but not covered by recycled points.
        let fresh: Vec<usize> = j.iter().copied().filter(|&i| i >= rank).collect();
        if ev.count() + fresh.len() + 1 > cfg.max_evals {
            break TerminationStatus::Budget;
        }

        let mut seed_indices = vec![center_idx];
        seed_indices.extend(sub.admitted.iter().copied());
        let mut j_kept: Vec<usize> = j.iter().copied().filter(|&i| i < rank).collect();
        for &i in &fresh {
            let y = &x + q.column(i) * delta;
            let r = ev.evaluate(&y)?;
            if r.iter().all(|v| v.is_finite()) {
                seed_indices.push(bank.push(y, r));
                j_kept.push(i);
            }
        }
        j_kept.sort_unstable();

        let mut union: Vec<usize> = (0..rank).collect();
        union.extend(j_kept.iter().copied().filter(|&i| i >= rank));
        union.sort_unstable();
        let p = union.len();

        // Model solves; any poisedness failure first retries on the seed
        // alone, then skips the iteration with a shrink.
        let estimates = if p == 0 {
            None
        } else if p == n {
            solve_full_space(&bank, &x, delta, &seed_indices, &mut comps, &rx, cfg)
        } else {
            solve_subspace(
                &bank,
                &x,
                delta,
                &q,
                &union,
                &j_kept,
                &pi,
                &seed_indices,
                &mut comps,
                &rx,
                cfg,
            )
        };

        let (rho, accepted, pred, g_norm) = match estimates {
            None => (f64::NEG_INFINITY, false, f64::NAN, None),
            Some(est) => {
                let g_norm = est.g_comb.norm();
                let step = if p == n {
                    solve_trsp(&est.g_comb, &est.h_comb, delta)
                } else {
                    let s = frame_rows(&q, &union);
                    let g_s = &s * &est.g_comb;
                    let h_s = &s * &est.h_comb * s.transpose();
                    let mut sub_step = solve_trsp(&g_s, &h_s, delta);
                    sub_step.d = s.transpose() * sub_step.d;
                    sub_step
                };
                let pred = step.predicted_reduction;
                if pred > 0.0 {
                    let xt = &x + &step.d;
                    let rt = ev.evaluate(&xt)?;
                    let ft = rt.norm_squared();
                    if !ft.is_finite() {
                        // Failed oracle: treat as a rejected step.
                        (f64::NEG_INFINITY, false, pred, Some(g_norm))
                    } else {
                        let idx = bank.push(xt.clone(), rt.clone());
                        let rho = acceptance_ratio(fx, ft, pred);
                        if rho >= cfg.tr.eta1 {
                            // Shift the average models to the new center.
                            for comp in comps.iter_mut() {
                                let shift = &comp.h_bar * &step.d;
                                comp.g_bar += shift;
                            }
                            x = xt;
                            rx = rt;
                            fx = ft;
                            center_idx = idx;
                            (rho, true, pred, Some(g_norm))
                        } else {
                            (rho, false, pred, Some(g_norm))
                        }
                    }
                } else {
                    (f64::NEG_INFINITY, false, pred, Some(g_norm))
                }
            }
        };

        let reference = match cfg.growth_reference {
            GrowthReference::Radius => delta,
            GrowthReference::ErrorProxy => proxy.norm(),
        };
        let delta_next =
            update_radius_with_reference(rho, delta, g_norm.unwrap_or(0.0), reference, &cfg.tr);

        records.push(IterationRecord {
            k,
            f: fx,
            delta,
            rho,
            p_k,
            j_size: j_kept.len(),
            evals: ev.count(),
            accepted,
            predicted_reduction: pred,
        });

        delta = delta_next;
        if let Some(tf) = cfg.target_f {
            if ev.best_f <= tf {
                break TerminationStatus::Target;
            }
        }
        if delta < cfg.delta_min {
            break TerminationStatus::RadiusFloor;
        }
        if let Some(g) = g_norm {
            if g < cfg.g_min && delta < 10.0 * cfg.delta_min {
                break TerminationStatus::Stationary;
            }
        }
        if ev.count() >= cfg.max_evals {
            break TerminationStatus::Budget;
        }
    };

    let total_evals = ev.count();
    let improvements = ev.improvements;
    Ok(RunHistory {
        problem: problem_name,
        n,
        m,
        seed: cfg.seed,
        records,
        improvements,
        status,
        f0,
        final_x: x,
        final_f: fx,
        total_evals,
    })
}

/// Interpolation values of component `c` at the selected bank points.
fn component_rhs(bank: &PointBank, indices: &[usize], c: usize) -> DVector<f64> {
    DVector::from_fn(indices.len(), |r, _| bank.residuals(indices[r])[c])
}

/// Columns are the displacements, giving one `n x t` matrix for batched
/// products against the per-component state.
fn displacement_matrix(points: &[DVector<f64>]) -> DMatrix<f64> {
    let n = points.first().map_or(0, |u| u.len());
    let mut u_mat = DMatrix::zeros(n, points.len());
    for (col, u) in points.iter().enumerate() {
        u_mat.set_column(col, u);
    }
    u_mat
}

/// Values of the prior quadratic `(delta^2 / 2) u^T H_bar u` at every
/// displacement, computed through one matrix product so the per-component
/// cost is a single level-3 pass instead of `t` separate quadratic forms.
fn prior_values(h_bar: &DMatrix<f64>, u_mat: &DMatrix<f64>, scale: f64) -> DVector<f64> {
    let p_mat = h_bar * u_mat;
    DVector::from_fn(u_mat.ncols(), |i, _| {
        0.5 * scale * u_mat.column(i).dot(&p_mat.column(i))
    })
}

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

/// Full-rank iteration: identity coordinates, one factored saddle system
/// for all components, direct average assignment. Used by the baseline and
/// by sketching whenever the sampled union covers the whole space, which
/// keeps the zero-variance trajectories bitwise identical.
fn solve_full_space(
    bank: &PointBank,
    x: &DVector<f64>,
    delta: f64,
    seed_indices: &[usize],
    comps: &mut [ComponentState],
    rx: &DVector<f64>,
    cfg: &SolverConfig,
) -> Option<IterationEstimates> {
    let n = x.len();
    let identity = DMatrix::identity(n, n);
    let empty = DMatrix::zeros(0, n);
    let sel = select_points(bank, x, delta, &identity, &empty, seed_indices, cfg)?;

    let sys = match MnhSystem::new(&sel.displacements) {
        Ok(sys) => sys,
        Err(_) => {
            let seed_only = &sel.displacements[..seed_indices.len()];
            MnhSystem::new(seed_only).ok()?
        }
    };
    let t = sys.len();
    let indices = &sel.indices[..t];
    let u_mat = displacement_matrix(&sel.displacements[..t]);
    let scale = delta * delta;

    let mut est = IterationEstimates {
        g_comb: DVector::zeros(n),
        h_comb: DMatrix::zeros(n, n),
    };
    for (c, comp) in comps.iter_mut().enumerate() {
        let mut f_tilde = component_rhs(bank, indices, c);
        f_tilde -= prior_values(&comp.h_bar, &u_mat, scale);
        let mul = sys.solve_residualized(&f_tilde).ok()?;
        let g_hat = mul.alpha.rows(1, n) / delta;

        // New curvature: prior plus the multiplier-weighted rank updates,
        // as one product. H += B U^T with B = U diag(lambda / (2 delta^2)).
        let mut b = u_mat.clone();
        for i in 0..t {
            let w = 0.5 * mul.lambda[i] / scale;
            b.column_mut(i).apply(|v| *v *= w);
        }
        let mut h_hat = &comp.h_bar + &b * u_mat.transpose();
        symmetrize(&mut h_hat);

        comp.g_bar = g_hat.clone();
        comp.h_bar = h_hat;
        accumulate_combined(&mut est, rx[c], g_hat, &comp.h_bar, cfg.combine);
    }
    finish_combined(&mut est, cfg.combine);
    Some(est)
}

/// Subspace iteration: sketched model per component, debiased estimators,
/// sketch-and-project average updates.
#[allow(clippy::too_many_arguments)]
fn solve_subspace(
    bank: &PointBank,
    x: &DVector<f64>,
    delta: f64,
    q: &DMatrix<f64>,
    union: &[usize],
    j: &[usize],
    pi: &ProbabilityVector,
    seed_indices: &[usize],
    comps: &mut [ComponentState],
    rx: &DVector<f64>,
    cfg: &SolverConfig,
) -> Option<IterationEstimates> {
    let n = x.len();
    let p = union.len();
    let s = frame_rows(q, union);
    let complement: Vec<usize> = (0..n).filter(|i| !union.contains(i)).collect();
    let s_perp = frame_rows(q, &complement);

    let sel = select_points(bank, x, delta, &s, &s_perp, seed_indices, cfg)?;
    let (sys, count) = match SketchSystem::new(&s, &s_perp, &sel.displacements) {
        Ok(sys) => (sys, sel.displacements.len()),
        Err(_) => {
            let seed_only = &sel.displacements[..seed_indices.len()];
            let sys = SketchSystem::new(&s, &s_perp, seed_only).ok()?;
            (sys, seed_indices.len())
        }
    };
    let indices = &sel.indices[..count];
    let u_mat = displacement_matrix(&sel.displacements[..count]);
    let scale = delta * delta;

    // Shared across components: the displacements compressed onto the
    // sampled rows, for the Hessian estimator updates.
    let s_j = frame_rows(q, j);
    let v = &s_j * &u_mat;

    let mut est = IterationEstimates {
        g_comb: DVector::zeros(n),
        h_comb: DMatrix::zeros(n, n),
    };
    for (c, comp) in comps.iter_mut().enumerate() {
        let mut f_tilde = component_rhs(bank, indices, c);
        f_tilde -= prior_values(&comp.h_bar, &u_mat, scale);
        let mul = sys.solve_residualized(&f_tilde);

        let mut g_hat = s.transpose() * mul.alpha.rows(1, p);
        if !complement.is_empty() {
            g_hat += s_perp.transpose() * &mul.gamma;
        }
        g_hat /= delta;

        // Sampled compression of the model Hessian, built from the
        // multipliers without forming the full matrix.
        let mut h_hat_sub = &s_j * &comp.h_bar * s_j.transpose();
        for col in 0..count {
            let w = 0.5 * mul.lambda[col] / scale;
            if w != 0.0 {
                let vc = v.column(col).into_owned();
                h_hat_sub.ger(w, &vc, &vc, 1.0);
            }
        }

        // Debiased estimates use the pre-update averages.
        let g_tilde = ameliorated_gradient(&comp.g_bar, q, j, pi, &g_hat, cfg.estimator_mode);
        let h_tilde = ameliorated_hessian(&comp.h_bar, q, j, pi, &h_hat_sub);

        comp.g_bar = update_average_gradient(&comp.g_bar, &s_j, &g_hat);
        comp.h_bar = update_average_hessian(&comp.h_bar, &s_j, &h_hat_sub);
        debug_assert!(
            (&s_j * (&comp.g_bar - &g_hat)).amax() <= 1e-10 * (1.0 + g_hat.amax()),
            "average gradient lost agreement with the model on the sample"
        );

        accumulate_combined(&mut est, rx[c], g_tilde, &h_tilde, cfg.combine);
    }
    finish_combined(&mut est, cfg.combine);
    Some(est)
}

/// Shared candidate selection with the seed-only fallback on failure.
fn select_points(
    bank: &PointBank,
    x: &DVector<f64>,
    delta: f64,
    s: &DMatrix<f64>,
    s_perp: &DMatrix<f64>,
    seed_indices: &[usize],
    cfg: &SolverConfig,
) -> Option<InterpolationSelection> {
    match determine_interpolation_set(bank, x, delta, s, s_perp, seed_indices, &cfg.geo) {
        Ok(sel) => Some(sel),
        Err(_) => {
            // Degenerate seed: fall back to its raw displacements and let
            // the downstream factorization have the final word.
            let displacements = seed_indices
                .iter()
                .map(|&i| (bank.point(i) - x) / delta)
                .collect();
            Some(InterpolationSelection {
                indices: seed_indices.to_vec(),
                displacements,
                sigma_mins: Vec::new(),
            })
        }
    }
}

fn accumulate_combined(
    est: &mut IterationEstimates,
    f_c: f64,
    g_tilde: DVector<f64>,
    h_tilde: &DMatrix<f64>,
    rule: CombineRule,
) {
    est.g_comb.axpy(f_c, &g_tilde, 1.0);
    est.h_comb.ger(1.0, &g_tilde, &g_tilde, 1.0);
    match rule {
        CombineRule::Unscaled => est.h_comb += h_tilde,
        CombineRule::GaussNewton => est.h_comb += h_tilde * f_c,
    }
}

fn finish_combined(est: &mut IterationEstimates, rule: CombineRule) {
    if rule == CombineRule::GaussNewton {
        est.g_comb *= 2.0;
        est.h_comb *= 2.0;
    }
}

/// Renders a short human summary of a run.
pub fn summarize(history: &RunHistory) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} (n = {}): f0 = {:.6e}, final f = {:.6e} after {} evals, {} iterations, stopped on {}",
        history.problem,
        history.n,
        history.f0,
        history.final_f,
        history.total_evals,
        history.records.len(),
        history.status.as_str()
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::get_problem;

    #[test]
    fn init_is_exact_on_linear_components() {
        let p = get_problem("sphere-shifted", 4).unwrap();
        let mut oracle = CountingOracle::new(p.clone());
        let (comps, bank) =
            init_average_gradient(&mut oracle, &p.x0, 0.5, InitStrategy::SimplexGradient).unwrap();
        assert_eq!(oracle.count(), 5);
        assert_eq!(bank.len(), 5);
        let jac = p.jacobian(&p.x0);
        for c in 0..4 {
            for i in 0..4 {
                assert!((comps[c].g_bar[i] - jac[(c, i)]).abs() < 1e-12);
            }
            assert_eq!(comps[c].h_bar, DMatrix::zeros(4, 4));
        }
    }

    #[test]
    fn init_bias_on_quadratic_components_is_the_exact_half_step() {
        // Forward differences on a quadratic residual pick up exactly half
        // the own-coordinate curvature: no higher-order terms exist.
        let p = get_problem("broyden-tridiagonal", 5).unwrap();
        let delta0 = 1e-3;
        let mut oracle = CountingOracle::new(p.clone());
        let (comps, _) =
            init_average_gradient(&mut oracle, &p.x0, delta0, InitStrategy::SimplexGradient)
                .unwrap();
        let jac = p.jacobian(&p.x0);
        for c in 0..5 {
            for i in 0..5 {
                // d2 r_c / dx_i^2 = -4 exactly when i == c, else 0.
                let curvature = if i == c { -4.0 } else { 0.0 };
                let expected = jac[(c, i)] + 0.5 * delta0 * curvature;
                assert!(
                    (comps[c].g_bar[i] - expected).abs() < 1e-9,
                    "component {c} coord {i}: {} vs {expected}",
                    comps[c].g_bar[i]
                );
            }
        }
        // And the coarse bound: within L sqrt(n) delta0 of the Jacobian.
        let l_g = 4.0;
        for c in 0..5 {
            let err = (comps[c].g_bar.clone() - jac.row(c).transpose()).norm();
            assert!(err <= l_g * 5f64.sqrt() * delta0);
        }
    }

    #[test]
    fn init_budget_is_checked_before_any_evaluation() {
        let p = get_problem("sphere-shifted", 6).unwrap();
        let mut oracle = CountingOracle::with_budget(p.clone(), 3);
        let err = init_average_gradient(&mut oracle, &p.x0, 1.0, InitStrategy::SimplexGradient);
        assert!(matches!(err, Err(SolverError::BudgetTooSmall { .. })));
        assert_eq!(oracle.count(), 0);
    }

    #[test]
    fn combine_rules_match_hand_examples() {
        let center = DVector::zeros(2);
        let models = ComponentModelSet {
            values: DVector::from_row_slice(&[2.0]),
            gradients: vec![DVector::from_row_slice(&[1.0, 0.0])],
            hessians: vec![DMatrix::zeros(2, 2)],
        };
        let combined = combine_least_squares_model(&center, &models, CombineRule::Unscaled);
        assert_eq!(combined.g, DVector::from_row_slice(&[2.0, 0.0]));
        let mut expected_h = DMatrix::zeros(2, 2);
        expected_h[(0, 0)] = 1.0;
        assert_eq!(combined.h, expected_h);

        // Exact fit: gradient term vanishes, curvature stays.
        let models = ComponentModelSet {
            values: DVector::from_row_slice(&[0.0, 0.0]),
            gradients: vec![
                DVector::from_row_slice(&[1.0, 2.0]),
                DVector::from_row_slice(&[0.0, 1.0]),
            ],
            hessians: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 3.0],
        };
        let combined = combine_least_squares_model(&center, &models, CombineRule::Unscaled);
        assert_eq!(combined.g, DVector::zeros(2));
        let gg = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])
            + DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(combined.h, gg + DMatrix::identity(2, 2) * 4.0);
    }

    #[test]
    fn gauss_newton_combine_matches_finite_differences_of_the_total() {
        // Exact component models of a smooth problem: the combined gradient
        // under the scaled rule is the gradient of sum r_i^2.
        let p = get_problem("broyden-tridiagonal", 4).unwrap();
        let x = DVector::from_row_slice(&[0.3, -0.2, 0.4, -0.5]);
        let jac = p.jacobian(&x);
        let r = p.residuals(&x);
        let models = ComponentModelSet {
            values: r.clone(),
            gradients: (0..4).map(|c| jac.row(c).transpose()).collect(),
            hessians: (0..4)
                .map(|c| {
                    let mut h = DMatrix::zeros(4, 4);
                    h[(c, c)] = -4.0;
                    h
                })
                .collect(),
        };
        let combined = combine_least_squares_model(&x, &models, CombineRule::GaussNewton);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.value(&xp) - p.value(&xm)) / (2.0 * h);
            assert!(
                (combined.g[i] - fd).abs() < 1e-5,
                "coord {i}: {} vs {fd}",
                combined.g[i]
            );
        }
    }

    #[test]
    fn smoke_sketching_solves_the_shifted_sphere() {
        let p = get_problem("sphere-shifted", 5).unwrap();
        for seed in [0u64, 1, 2] {
            let mut cfg = SolverConfig::defaults(5);
            cfg.seed = seed;
            cfg.max_evals = 60 * 6;
            let hist = run_on_problem(&p, &cfg).unwrap();
            let best = hist.best_within(60 * 6);
            assert!(
                best <= 1e-8,
                "seed {seed}: best {best} after {} evals",
                hist.total_evals
            );
        }
    }

    #[test]
    fn baseline_reaches_machine_optimum_on_linear_least_squares() {
        let p = get_problem("linear-full-rank", 5).unwrap();
        let mut cfg = SolverConfig::baseline_defaults(5);
        cfg.max_evals = 30 * 6;
        let hist = run_on_problem(&p, &cfg).unwrap();
        assert!(
            (hist.best_within(cfg.max_evals) - p.f_star).abs() <= 1e-8 * (1.0 + p.f_star),
            "best {} vs f* {}",
            hist.best_within(cfg.max_evals),
            p.f_star
        );
    }

    #[test]
    fn baseline_acceptance_ratio_approaches_one_on_quadratics() {
        // With the scaled combine rule the model converges to the exact
        // quadratic, so late accepted steps predict their reduction.
        let p = get_problem("linear-full-rank", 4).unwrap();
        let mut cfg = SolverConfig::baseline_defaults(4);
        cfg.combine = CombineRule::GaussNewton;
        cfg.max_evals = 55 * 5;
        let hist = run_on_problem(&p, &cfg).unwrap();
        let late: Vec<f64> = hist
            .records
            .iter()
            .filter(|r| r.accepted && r.predicted_reduction > 1e-9)
            .map(|r| r.rho)
            .collect();
        assert!(late.len() >= 3, "expected several accepted steps");
        for &rho in late.iter().rev().take(3) {
            assert!((0.9..=1.1).contains(&rho), "late rho {rho}");
        }
    }

    #[test]
    fn histories_are_deterministic() {
        let p = get_problem("extended-rosenbrock", 4).unwrap();
        let mut cfg = SolverConfig::defaults(4);
        cfg.seed = 7;
        cfg.max_evals = 40 * 5;
        let a = run_on_problem(&p, &cfg).unwrap();
        let b = run_on_problem(&p, &cfg).unwrap();
        assert_eq!(a.csv_string(), b.csv_string());
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn zero_variance_sketching_collapses_to_the_baseline() {
        for name in ["sphere-shifted", "broyden-tridiagonal"] {
            let p = get_problem(name, 3).unwrap();
            let mut sketch_cfg = SolverConfig::defaults(3);
            sketch_cfg.variance_c = 0.0;
            sketch_cfg.max_evals = 30 * 4;
            let base_cfg = SolverConfig {
                mode: SolverMode::DeterministicBaseline,
                ..sketch_cfg.clone()
            };
            let a = run_on_problem(&p, &sketch_cfg).unwrap();
            let b = run_on_problem(&p, &base_cfg).unwrap();
            assert_eq!(a.csv_string(), b.csv_string(), "{name} diverged");
        }
    }

    #[test]
    fn history_invariants_hold() {
        let p = get_problem("trigonometric", 5).unwrap();
        let mut cfg = SolverConfig::defaults(5);
        cfg.seed = 3;
        cfg.max_evals = 50 * 6;
        let hist = run_on_problem(&p, &cfg).unwrap();
        assert!(!hist.records.is_empty());
        let mut last_evals = 0;
        let mut last_accepted_f = f64::INFINITY;
        for r in &hist.records {
            assert!(r.evals >= last_evals, "evals must not decrease");
            last_evals = r.evals;
            if r.accepted {
                assert!(r.f <= last_accepted_f + 1e-15, "accepted f must not rise");
                last_accepted_f = r.f;
            }
            assert!(r.j_size <= r.p_k.max(r.j_size));
            assert!(r.delta > 0.0);
        }
        assert_eq!(hist.total_evals, hist.records.last().unwrap().evals);
        assert!(hist.total_evals <= cfg.max_evals);
        // Improvements are strictly decreasing in f and increasing in count.
        for w in hist.improvements.windows(2) {
            assert!(w[1].0 > w[0].0);
            assert!(w[1].1 < w[0].1);
        }
    }

    #[test]
    fn csv_has_the_documented_header() {
        let p = get_problem("sphere-shifted", 2).unwrap();
        let mut cfg = SolverConfig::defaults(2);
        cfg.max_evals = 30;
        let hist = run_on_problem(&p, &cfg).unwrap();
        let csv = hist.csv_string();
        assert!(csv.starts_with("k,f,delta,rho,p_k,J_size,evals,accepted\n"));
        let json = hist.to_json();
        assert!(json.contains("\"problem\":\"sphere-shifted\""));
    }
}
