//! Conversions between the variance-constrained, Lagrangian and separable
//! objectives, and the chance-objective surrogate.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Objective, ProblemSpec};
use crate::num;

pub const FIXED_POINT_TOL: f64 = 1e-8;
pub const FIXED_POINT_MAX_ITER: usize = 200;
pub const DUAL_MAX_ITER: usize = 500;
/// Relative slack allowed on `Var[x_t] <= alpha_t`.
pub const VARIANCE_SLACK: f64 = 1e-2;
pub const CHANCE_MAX_ROUNDS: usize = 50;
pub const CHANCE_TOL: f64 = 1e-6;

const BISECTION_SWEEPS: usize = 40;
const BISECTION_STEPS: usize = 120;

/// What calibration needs from a solver: the optimum of a separable
/// problem and the per-period moments of its optimal policy.
pub trait SeparableSolver {
    fn solve_moments(&self, problem: &ProblemSpec) -> Result<SolvedMoments>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedMoments {
    pub objective: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationStep {
    pub iteration: usize,
    #[serde(with = "num::dec_vec")]
    pub y: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub var: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub residual: Vec<f64>,
}

/// Trace as CSV: `iteration, y_1..y_T, var_1..var_T, residual_1..residual_T`.
pub fn trace_csv(trace: &[CalibrationStep]) -> String {
    let t = trace.first().map_or(0, |s| s.y.len());
    let mut header = vec!["iteration".to_string()];
    for prefix in ["y", "var", "residual"] {
        header.extend((1..=t).map(|i| format!("{prefix}_{i}")));
    }
    let mut out = header.join(",");
    out.push('\n');
    for s in trace {
        let mut row = vec![s.iteration.to_string()];
        row.extend(s.y.iter().chain(&s.var).chain(&s.residual).map(|v| num::fmt17(*v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pi3Result {
    #[serde(with = "num::dec_vec")]
    pub a: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub b: Vec<f64>,
    pub iterations: usize,
    #[serde(with = "num::dec")]
    pub residual: f64,
    /// Moments of the separable optimum at the returned `(a, b)`.
    #[serde(with = "num::dec_vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub var: Vec<f64>,
    pub trace: Vec<CalibrationStep>,
}

fn check_len(name: &str, v: &[f64], horizon: usize) -> Result<()> {
    if v.len() != horizon {
        return Err(Error::InvalidInput(format!(
            "{name} has length {}, horizon is {horizon}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} must be finite")));
    }
    Ok(())
}

/// Separable coefficients whose optimum also solves the Lagrangian problem
/// with weights `w` and variance penalties `y`: `b = y` and `a = w + 2 y E[x]`
/// iterated to a fixed point. `damping` in `(0, 1]` blends each update.
pub fn pi2_to_pi3(
    problem: &ProblemSpec,
    w: &[f64],
    y: &[f64],
    solver: &dyn SeparableSolver,
    damping: Option<f64>,
) -> Result<Pi3Result> {
    let horizon = problem.horizon;
    check_len("w", w, horizon)?;
    check_len("y", y, horizon)?;
    if y.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("variance penalties y must be >= 0".into()));
    }
    let theta = damping.unwrap_or(1.0);
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidInput(format!("damping {theta} is outside (0, 1]")));
    }
    let b = y.to_vec();
    let mut a = DVector::from_column_slice(w);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    for iteration in 1..=FIXED_POINT_MAX_ITER {
        let sol = solver.solve_moments(&problem.with_separable(a.as_slice().to_vec(), b.clone()))?;
        let target = DVector::from_fn(horizon, |t, _| w[t] + 2.0 * y[t] * sol.mean[t]);
        let res: Vec<f64> = (0..horizon)
            .map(|t| (target[t] - a[t]).abs() / (1.0 + a[t].abs()))
            .collect();
        let previous = residual;
        residual = res.iter().copied().fold(0.0, f64::max);
        trace.push(CalibrationStep {
            iteration,
            y: y.to_vec(),
            var: sol.var.clone(),
            residual: res,
        });
        if residual <= FIXED_POINT_TOL {
            return Ok(Pi3Result {
                a: a.as_slice().to_vec(),
                b,
                iterations: iteration,
                residual,
                mean: sol.mean,
                var: sol.var,
                trace,
            });
        }
        a = match damping {
            Some(theta) => &a + (&target - &a) * theta,
            None => {
                if residual >= previous {
                    history.clear();
                }
                history.push_back((a.clone(), target));
                if history.len() > horizon + 2 {
                    history.pop_front();
                }
                anderson_step(&history)
            }
        };
    }
    Err(Error::NoConvergence {
        what: "pi2_to_pi3",
        iterations: FIXED_POINT_MAX_ITER,
        residual,
    })
}

/// Anderson mixing over the stored `(iterate, image)` pairs: the next
/// iterate combines the images with weights that minimise the combined
/// residual. With one pair this is the plain fixed-point step.
fn anderson_step(history: &VecDeque<(DVector<f64>, DVector<f64>)>) -> DVector<f64> {
    let (a_k, g_k) = history.back().expect("history is never empty here");
    let f_k = g_k - a_k;
    let m = history.len() - 1;
    if m == 0 {
        return g_k.clone();
    }
    let dim = a_k.len();
    let mut df = DMatrix::zeros(dim, m);
    let mut dg = DMatrix::zeros(dim, m);
    for (i, pair) in history.iter().zip(history.iter().skip(1)).enumerate() {
        let ((a0, g0), (a1, g1)) = pair;
        df.set_column(i, &((g1 - a1) - (g0 - a0)));
        dg.set_column(i, &(g1 - g0));
    }
    let gamma = match df.svd(true, true).solve(&f_k, 1e-12) {
        Ok(gamma) => gamma,
        Err(_) => return g_k.clone(),
    };
    let next = g_k - dg * gamma;
    if next.iter().all(|v| v.is_finite()) {
        next
    } else {
        g_k.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pi2Result {
    /// Variance multipliers.
    #[serde(with = "num::dec_vec")]
    pub y: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub a: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub b: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub var: Vec<f64>,
    /// `"subgradient"` or `"bisection"`, whichever produced `y`.
    pub method: &'static str,
    pub iterations: usize,
    pub trace: Vec<CalibrationStep>,
}

fn dual_ok(y: &[f64], var: &[f64], alpha: &[f64]) -> bool {
    let ymax = y.iter().copied().fold(0.0, f64::max);
    (0..y.len()).all(|t| {
        var[t] <= alpha[t] * (1.0 + VARIANCE_SLACK)
            && y[t] * (alpha[t] - var[t]) <= VARIANCE_SLACK * alpha[t] * ymax
    })
}

fn variance_residual(var: &[f64], alpha: &[f64]) -> Vec<f64> {
    var.iter().zip(alpha).map(|(v, a)| v - a).collect()
}

/// Variance multipliers `y >= 0` for `max sum w_t E[x_t] s.t. Var[x_t] <= alpha_t`.
///
/// Projected subgradient ascent on the dual with steps `eta_0 / sqrt(k)`,
/// `eta_0 = 1 / max(alpha)`. If that has not settled after its iteration
/// budget, per-period bisection on `log y_t` takes over.
pub fn pi1_to_pi2(problem: &ProblemSpec, solver: &dyn SeparableSolver) -> Result<Pi2Result> {
    let Objective::VarianceConstrained { w, alpha } = &problem.objective else {
        return Err(Error::InvalidInput(format!(
            "pi1_to_pi2 needs a variance-constrained objective, got {}",
            problem.objective.form_name()
        )));
    };
    let horizon = problem.horizon;
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidInput("alpha must be > 0".into()));
    }
    let mut trace = Vec::new();
    // `None` when some stage problem is unbounded at these multipliers
    // (a zero penalty on a leveraged final stage): infinite variance.
    let evaluate = |y: &[f64], trace: &mut Vec<CalibrationStep>| -> Result<Option<Pi3Result>> {
        let r = match pi2_to_pi3(problem, w, y, solver, None) {
            Ok(r) => r,
            Err(Error::LinearStage | Error::UnboundedAbove | Error::NonpositiveCurvature { .. }) => {
        trace.push(CalibrationStep {
                    iteration: trace.len() + 1,
                    y: y.to_vec(),
                    var: vec![f64::INFINITY; horizon],
                    residual: vec![f64::INFINITY; horizon],
                });
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        trace.push(CalibrationStep {
            iteration: trace.len() + 1,
            y: y.to_vec(),
            var: r.var.clone(),
            residual: variance_residual(&r.var, alpha),
        });
        Ok(Some(r))
    };
    let finish = |y: Vec<f64>, r: Pi3Result, method, trace: Vec<CalibrationStep>| Pi2Result {
        y,
        a: r.a,
        b: r.b,
        mean: r.mean,
        var: r.var,
        method,
        iterations: trace.len(),
        trace,
    };

    let eta0 = 1.0 / alpha.iter().copied().fold(0.0, f64::max);
    let mut y = vec![0.0; horizon];
    for k in 1..=DUAL_MAX_ITER {
        let Some(r) = evaluate(&y, &mut trace)? else {
            break;
        };
        if dual_ok(&y, &r.var, alpha) {
            return Ok(finish(y, r, "subgradient", trace));
        }
        let eta = eta0 / (k as f64).sqrt();
        for t in 0..horizon {
            y[t] = (y[t] + eta * (r.var[t] - alpha[t])).max(0.0);
        }
    }

    // Gauss-Seidel sweeps from the last period back, each period bisected
    // on log y_t with the others held fixed.
    let too_high = |r: &Option<Pi3Result>, t: usize, slack: f64| {
        r.as_ref().is_none_or(|r| r.var[t] > alpha[t] * (1.0 + slack))
    };
    let mut y = vec![0.0; horizon];
    let mut last = evaluate(&y, &mut trace)?;
    for _ in 0..BISECTION_SWEEPS {
        if let Some(r) = &last {
            if dual_ok(&y, &r.var, alpha) {
                return Ok(finish(y, last.unwrap(), "bisection", trace));
            }
        }
        for t in (0..horizon).rev() {
            let mut probe = y.clone();
            probe[t] = 0.0;
            let r0 = evaluate(&probe, &mut trace)?;
            if !too_high(&r0, t, 0.0) {
                y = probe;
                last = r0;
                continue;
            }
            let (mut lo, mut hi) = (-40.0f64, 40.0f64);
            probe[t] = hi.exp();
            let mut best = evaluate(&probe, &mut trace)?;
            if too_high(&best, t, VARIANCE_SLACK) {
                return Err(Error::NoConvergence {
                    what: "pi1_to_pi2",
                    iterations: trace.len(),
                    residual: best.map_or(f64::INFINITY, |r| r.var[t] - alpha[t]),
                });
            }
            let mut best_y = probe[t];
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                probe[t] = mid.exp();
                let r = evaluate(&probe, &mut trace)?;
                if too_high(&r, t, 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                    best_y = probe[t];
                    let near = r.as_ref().is_some_and(|r| r.var[t] >= alpha[t] * (1.0 - 0.5 * VARIANCE_SLACK));
                    best = r;
                    if near {
                        break;
                    }
                }
                if hi - lo < 1e-12 {
                    break;
                }
            }
            y[t] = best_y;
            last = best;
        }
    }
    match last {
        Some(r) if dual_ok(&y, &r.var, alpha) => Ok(finish(y, r, "bisection", trace)),
        last => Err(Error::NoConvergence {
            what: "pi1_to_pi2",
            iterations: trace.len(),
            residual: last.map_or(f64::INFINITY, |r| {
                variance_residual(&r.var, alpha).into_iter().fold(0.0, f64::max)
            }),
        }),
    }
}

/// Weights and targets of `max sum w_t P[x_t > d_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceSpec {
    #[serde(with = "num::dec_vec")]
    pub w: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub d: Vec<f64>,
}

impl ChanceSpec {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        check_len("chance weights", &self.w, horizon)?;
        check_len("chance targets", &self.d, horizon)?;
        if self.w.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidInput("chance weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChanceResult {
    #[serde(with = "num::dec_vec")]
    pub w: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub y: Vec<f64>,
    pub rounds: usize,
    /// Periods (1-based) whose target sat within the tolerance of the mean in some round.
    pub skipped: Vec<usize>,
    /// Periods (1-based) with `d_t <= E[x_t]` at the end, where the
    /// one-sided Chebyshev bound does not apply.
    pub invalid_direction: Vec<usize>,
    #[serde(with = "num::dec_vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub var: Vec<f64>,
}

/// Mean-variance weights approximating the chance objective by iterative
/// reweighting `y_t = w_t / (d_t - E[x_t])^2`, starting from the mean maximizer.
pub fn chance_to_meanvar(
    problem: &ProblemSpec,
    spec: &ChanceSpec,
    solver: &dyn SeparableSolver,
) -> Result<ChanceResult> {
    let horizon = problem.horizon;
    spec.validate(horizon)?;
    let start = solver.solve_moments(&problem.with_separable(spec.w.clone(), vec![0.0; horizon]))?;
    let mut mean = start.mean;
    let mut var = start.var;
    let mut y = vec![0.0; horizon];
    let mut skipped = Vec::new();
    let mut rounds = 0;
    for _ in 0..CHANCE_MAX_ROUNDS {
        rounds += 1;
        for t in 0..horizon {
            let gap = spec.d[t] - mean[t];
            if gap.abs() < CHANCE_TOL {
                y[t] = 0.0;
                if !skipped.contains(&(t + 1)) {
                    skipped.push(t + 1);
                }
            } else {
                y[t] = spec.w[t] / (gap * gap);
            }
        }
        let r = pi2_to_pi3(problem, &spec.w, &y, solver, None)?;
        let change = r
            .mean
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        mean = r.mean;
        var = r.var;
        if change <= CHANCE_TOL {
            break;
        }
    }
    if let Some(t) = (0..horizon).find(|&t| (spec.d[t] - mean[t]).abs() < CHANCE_TOL) {
        return Err(Error::TargetAtMean { period: t + 1 });
    }
    let invalid_direction = (0..horizon).filter(|&t| spec.d[t] <= mean[t]).map(|t| t + 1).collect();
    Ok(ChanceResult {
        w: spec.w.clone(),
        y,
        rounds,
        skipped,
        invalid_direction,
        mean,
        var,
    })
}
