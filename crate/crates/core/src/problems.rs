//! Built-in nonlinear least-squares benchmark families.
//!
//! Six scalable classical families cover the low-dimensional (n = 2..12)
//! and high-dimensional (n around 100) regimes: three with zero residual
//! at the optimum, one linear with a nonzero closed-form optimum, one
//! trigonometric system, and one shifted sphere sanity problem. Each
//! exposes residuals only through [`CountingOracle`]; the analytic
//! Jacobians exist for tests and are never handed to a solver.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Problem lookup and evaluation failures.
#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("dimension {n} is invalid for `{name}`: {requirement}")]
    InvalidDimension {
        name: &'static str,
        n: usize,
        requirement: &'static str,
    },
    #[error("evaluation budget of {budget} exhausted")]
    BudgetExhausted { budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    ExtendedRosenbrock,
    ExtendedPowellSingular,
    BroydenTridiagonal,
    LinearFullRank,
    Trigonometric,
    SphereShifted,
}

/// A least-squares instance: minimize `f(x) = sum_i r_i(x)^2` from `x0`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    /// Registry name.
    pub name: &'static str,
    /// Dimension.
    pub n: usize,
    /// Residual count.
    pub m: usize,
    /// Standard start.
    pub x0: DVector<f64>,
    /// Known or closed-form optimal value of `f`.
    pub f_star: f64,
    family: Family,
}

impl ProblemSpec {
    /// Residual vector at `x`. Deterministic and pure.
    pub fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n, "point dimension mismatch");
        let n = self.n;
        match self.family {
            Family::ExtendedRosenbrock => {
                let mut r = DVector::zeros(n);
                for i in 0..n / 2 {
                    let (a, b) = (x[2 * i], x[2 * i + 1]);
                    r[2 * i] = 10.0 * (b - a * a);
                    r[2 * i + 1] = 1.0 - a;
                }
                r
            }
            Family::ExtendedPowellSingular => {
                let mut r = DVector::zeros(n);
                for i in 0..n / 4 {
                    let (a, b, c, d) = (x[4 * i], x[4 * i + 1], x[4 * i + 2], x[4 * i + 3]);
                    r[4 * i] = a + 10.0 * b;
                    r[4 * i + 1] = 5f64.sqrt() * (c - d);
                    r[4 * i + 2] = (b - 2.0 * c) * (b - 2.0 * c);
                    r[4 * i + 3] = 10f64.sqrt() * (a - d) * (a - d);
                }
                r
            }
            Family::BroydenTridiagonal => DVector::from_fn(n, |i, _| {
                let left = if i > 0 { x[i - 1] } else { 0.0 };
                let right = if i + 1 < n { x[i + 1] } else { 0.0 };
                (3.0 - 2.0 * x[i]) * x[i] - left - 2.0 * right + 1.0
            }),
            Family::LinearFullRank => {
                let s = 2.0 * x.sum() / self.m as f64;
                DVector::from_fn(self.m, |i, _| {
                    if i < n {
                        x[i] - s - 1.0
                    } else {
                        -s - 1.0
                    }
                })
            }
            Family::Trigonometric => {
                let cos_sum: f64 = x.iter().map(|v| v.cos()).sum();
                DVector::from_fn(n, |i, _| {
                    n as f64 - cos_sum + (i + 1) as f64 * (1.0 - x[i].cos()) - x[i].sin()
                })
            }
            Family::SphereShifted => DVector::from_fn(n, |i, _| x[i] - shift(i)),
        }
    }

    /// Sum of squared residuals.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.residuals(x).norm_squared()
    }

    /// Analytic Jacobian of the residual map, for tests only: solvers go
    /// through [`CountingOracle`] and never see derivatives.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), self.n, "point dimension mismatch");
        let n = self.n;
        let mut j = DMatrix::zeros(self.m, n);
        match self.family {
            Family::ExtendedRosenbrock => {
                for i in 0..n / 2 {
                    j[(2 * i, 2 * i)] = -20.0 * x[2 * i];
                    j[(2 * i, 2 * i + 1)] = 10.0;
                    j[(2 * i + 1, 2 * i)] = -1.0;
                }
            }
            Family::ExtendedPowellSingular => {
                for i in 0..n / 4 {
                    let (a, b, c, d) = (x[4 * i], x[4 * i + 1], x[4 * i + 2], x[4 * i + 3]);
                    j[(4 * i, 4 * i)] = 1.0;
                    j[(4 * i, 4 * i + 1)] = 10.0;
                    j[(4 * i + 1, 4 * i + 2)] = 5f64.sqrt();
                    j[(4 * i + 1, 4 * i + 3)] = -5f64.sqrt();
                    j[(4 * i + 2, 4 * i + 1)] = 2.0 * (b - 2.0 * c);
                    j[(4 * i + 2, 4 * i + 2)] = -4.0 * (b - 2.0 * c);
                    j[(4 * i + 3, 4 * i)] = 2.0 * 10f64.sqrt() * (a - d);
                    j[(4 * i + 3, 4 * i + 3)] = -2.0 * 10f64.sqrt() * (a - d);
                }
            }
            Family::BroydenTridiagonal => {
                for i in 0..n {
                    j[(i, i)] = 3.0 - 4.0 * x[i];
                    if i > 0 {
                        j[(i, i - 1)] = -1.0;
                    }
                    if i + 1 < n {
                        j[(i, i + 1)] = -2.0;
                    }
                }
            }
            Family::LinearFullRank => {
                let w = -2.0 / self.m as f64;
                for i in 0..self.m {
                    for l in 0..n {
                        j[(i, l)] = w + if i == l { 1.0 } else { 0.0 };
                    }
                }
            }
            Family::Trigonometric => {
                for i in 0..n {
                    for l in 0..n {
                        j[(i, l)] = x[l].sin();
                    }
                    j[(i, i)] += (i + 1) as f64 * x[i].sin() - x[i].cos();
                }
            }
            Family::SphereShifted => {
                j.fill_with_identity();
            }
        }
        j
    }
}

/// Shift used by `sphere-shifted`.
fn shift(i: usize) -> f64 {
    ((i + 1) as f64).sin()
}

/// Names and dimension rules of every registered family.
pub fn registry() -> Vec<(&'static str, &'static str)> {
    vec![
        ("extended-rosenbrock", "n even, n >= 2"),
        ("extended-powell-singular", "n divisible by 4"),
        ("broyden-tridiagonal", "n >= 2"),
        ("linear-full-rank", "n >= 1 (m = 2n)"),
        ("trigonometric", "n >= 1"),
        ("sphere-shifted", "n >= 1"),
    ]
}

/// Builds a registered instance at dimension `n`.
pub fn get_problem(name: &str, n: usize) -> Result<ProblemSpec, ProblemError> {
    let (family, spec_name, m, requirement, ok): (Family, &'static str, usize, &'static str, bool) =
        match name {
            "extended-rosenbrock" => (
                Family::ExtendedRosenbrock,
                "extended-rosenbrock",
                n,
                "n must be even and at least 2",
                n >= 2 && n % 2 == 0,
            ),
            "extended-powell-singular" => (
                Family::ExtendedPowellSingular,
                "extended-powell-singular",
                n,
                "n must be divisible by 4",
                n >= 4 && n % 4 == 0,
            ),
            "broyden-tridiagonal" => (
                Family::BroydenTridiagonal,
                "broyden-tridiagonal",
                n,
                "n must be at least 2",
                n >= 2,
            ),
            "linear-full-rank" => (
                Family::LinearFullRank,
                "linear-full-rank",
                2 * n,
                "n must be at least 1",
                n >= 1,
            ),
            "trigonometric" => (
                Family::Trigonometric,
                "trigonometric",
                n,
                "n must be at least 1",
                n >= 1,
            ),
            "sphere-shifted" => (
                Family::SphereShifted,
                "sphere-shifted",
                n,
                "n must be at least 1",
                n >= 1,
            ),
            _ => return Err(ProblemError::UnknownProblem(name.to_string())),
        };
    if !ok {
        return Err(ProblemError::InvalidDimension {
            name: spec_name,
            n,
            requirement,
        });
    }

    let x0 = match family {
        Family::ExtendedRosenbrock => {
            DVector::from_fn(n, |i, _| if i % 2 == 0 { -1.2 } else { 1.0 })
        }
        Family::ExtendedPowellSingular => DVector::from_fn(n, |i, _| match i % 4 {
            0 => 3.0,
            1 => -1.0,
            2 => 0.0,
            _ => 1.0,
        }),
        Family::BroydenTridiagonal => DVector::from_element(n, -1.0),
        Family::LinearFullRank => DVector::from_element(n, 1.0),
        Family::Trigonometric => DVector::from_element(n, 1.0 / n as f64),
        Family::SphereShifted => DVector::zeros(n),
    };
    // With m = 2n the linear system is overdetermined; its least-squares
    // optimum is x = -1 with n leftover unit residuals.
    let f_star = match family {
        Family::LinearFullRank => (m - n) as f64,
        _ => 0.0,
    };

    Ok(ProblemSpec {
        name: spec_name,
        n,
        m,
        x0,
        f_star,
        family,
    })
}

/// Residual oracle that counts evaluations and enforces an optional cap.
///
/// This is the only surface solvers get: residual vectors per point, one
/// counted evaluation each, no derivatives.
#[derive(Debug, Clone)]
pub struct CountingOracle {
    inner: ProblemSpec,
    count: usize,
    budget: Option<usize>,
}

impl CountingOracle {
    /// Wraps a problem with no evaluation cap.
    pub fn new(inner: ProblemSpec) -> Self {
        CountingOracle {
            inner,
            count: 0,
            budget: None,
        }
    }

    /// Wraps a problem with a hard evaluation cap.
    pub fn with_budget(inner: ProblemSpec, budget: usize) -> Self {
        CountingOracle {
            inner,
            count: 0,
            budget: Some(budget),
        }
    }

    /// The wrapped problem definition.
    pub fn spec(&self) -> &ProblemSpec {
        &self.inner
    }

    /// Evaluations performed so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Evaluations still allowed, if capped.
    pub fn remaining(&self) -> Option<usize> {
        self.budget.map(|b| b.saturating_sub(self.count))
    }

    /// One counted residual evaluation.
    pub fn evaluate(&mut self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        if let Some(budget) = self.budget {
            if self.count >= budget {
                return Err(ProblemError::BudgetExhausted { budget });
            }
        }
        self.count += 1;
        Ok(self.inner.residuals(x))
    }
}
