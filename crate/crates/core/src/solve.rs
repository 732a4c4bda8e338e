//! Solver dispatch and the solve report.

use serde::Serialize;

use crate::calibrate::{self, CalibrationStep, SeparableSolver, SolvedMoments};
use crate::dp1d::{self, Solution1D};
use crate::dpnd::{self, Mode, NdOptions, NdSolution};
use crate::error::{Error, Result};
use crate::model::{Objective, ProblemSpec};
use crate::num;
use crate::oracle;
use crate::policy::{AffineRule, AllocationPolicy};
use crate::pwq::PiecewiseQuadratic;
use crate::simulate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// Exact one-dimensional solver when it applies, closed-form recursion otherwise.
    #[default]
    Auto,
    Recursion,
    ScenarioExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SolveOptions {
    pub mode: SolveMode,
    /// Use the literal coefficient formulas and uniform multiplier shift.
    pub literal: bool,
    pub nonneg: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Solution {
    OneD(Solution1D),
    Nd(NdSolution),
}

impl Solution {
    pub fn method(&self) -> &'static str {
        match self {
            Solution::OneD(_) => "dp1d",
            Solution::Nd(s) => match s.options.mode {
                Mode::Recursion if s.options.literal => "recursion-literal",
                Mode::Recursion => "recursion",
                Mode::ScenarioExact => "scenario-exact",
            },
        }
    }

    pub fn values(&self) -> &[PiecewiseQuadratic] {
        match self {
            Solution::OneD(s) => &s.values,
            Solution::Nd(s) => &s.values,
        }
    }

    /// Optimal separable objective from `x0`, as claimed by the value functions.
    pub fn objective(&self, x0: f64) -> f64 {
        self.values()[0].eval(x0)
    }

    fn inner(&self) -> &dyn AllocationPolicy {
        match self {
            Solution::OneD(s) => s,
            Solution::Nd(s) => s,
        }
    }
}

impl AllocationPolicy for Solution {
    fn horizon(&self) -> usize {
        self.inner().horizon()
    }

    fn n(&self) -> usize {
        self.inner().n()
    }

    fn allocate(&self, t: usize, x: f64) -> Result<Vec<f64>> {
        self.inner().allocate(t, x)
    }

    fn affine_rules(&self) -> Option<Vec<AffineRule>> {
        self.inner().affine_rules()
    }
}

fn one_d_applies(problem: &ProblemSpec, options: &SolveOptions) -> bool {
    problem.n() == 1
        && options.mode == SolveMode::Auto
        && !options.literal
        && problem.borrow_cost.is_none()
        && problem.model.has_all_atoms()
        && (0..problem.horizon).all(|t| {
            problem
                .model
                .atoms(t)
                .map(|a| {
                    let r = a[0].reference();
                    a.iter().all(|x| x.reference() == r)
                })
                .unwrap_or(false)
        })
}

fn nd_options(problem: &ProblemSpec, options: &SolveOptions) -> NdOptions {
    let mode = match options.mode {
        SolveMode::ScenarioExact => Mode::ScenarioExact,
        SolveMode::Recursion => Mode::Recursion,
        SolveMode::Auto if options.nonneg && problem.model.has_all_atoms() => Mode::ScenarioExact,
        SolveMode::Auto => Mode::Recursion,
    };
    NdOptions {
        mode,
        literal: options.literal,
        nonneg: options.nonneg,
    }
}

/// Solves a problem whose objective is already separable.
pub fn solve_separable(problem: &ProblemSpec, options: &SolveOptions) -> Result<Solution> {
    if one_d_applies(problem, options) {
        return Ok(Solution::OneD(dp1d::backward_induct_1d(problem, options.nonneg)?));
    }
    Ok(Solution::Nd(dpnd::backward_induct_nd(problem, nd_options(problem, options))?))
}

/// Like [`solve_separable`], but tolerates `b_T = 0` where the solver can
/// (calibration produces it when the last variance weight is zero).
fn solve_separable_relaxed(problem: &ProblemSpec, options: &SolveOptions) -> Result<Solution> {
    if one_d_applies(problem, options) {
        return Ok(Solution::OneD(dp1d::backward_induct_1d_unchecked(problem, options.nonneg)?));
    }
    solve_separable(problem, options)
}

/// Per-period mean and variance of `x_t` under a policy: exact on small
/// trees or for affine policies, Monte Carlo (seed 42) otherwise.
pub fn policy_moments(problem: &ProblemSpec, policy: &dyn AllocationPolicy) -> Result<(Vec<f64>, Vec<f64>, &'static str)> {
    if problem.model.has_all_atoms() {
        let leaves: f64 = (0..problem.horizon)
            .map(|t| problem.model.atoms(t).map_or(f64::INFINITY, |a| a.len() as f64))
            .product();
        if leaves <= oracle::MAX_LEAVES as f64 {
            let ev = oracle::oracle_evaluate(problem, policy)?;
            return Ok((ev.mean, ev.var, "tree"));
        }
    }
    if let Some(rules) = policy.affine_rules() {
        if let Ok(m) = simulate::propagate_moments(problem, &rules) {
            return Ok((m.mean, m.var, "affine"));
        }
    }
    let s = simulate::simulate_policy(problem, policy, 100_000, 42)?;
    Ok((s.means(), s.vars(), "monte-carlo"))
}

/// Backward induction plus moment evaluation, as used by calibration.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultSolver {
    pub options: SolveOptions,
}

impl SeparableSolver for DefaultSolver {
    fn solve_moments(&self, problem: &ProblemSpec) -> Result<SolvedMoments> {
        let sol = solve_separable_relaxed(problem, &self.options)?;
        let (mean, var, _) = policy_moments(problem, &sol)?;
        Ok(SolvedMoments {
            objective: sol.objective(problem.x0),
            mean,
            var,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    pub method: &'static str,
    #[serde(with = "num::dec_vec")]
    pub y: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<CalibrationStep>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Moments {
    pub source: &'static str,
    #[serde(with = "num::dec_vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub method: &'static str,
    pub options: SolveOptions,
    pub objective_form: &'static str,
    /// The problem's own objective evaluated at the policy's moments.
    #[serde(with = "num::dec")]
    pub objective: f64,
    /// `sum E[a_t x_t - b_t x_t^2]` claimed by the value functions.
    #[serde(with = "num::dec")]
    pub separable_objective: f64,
    #[serde(with = "num::dec_vec")]
    pub a: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub b: Vec<f64>,
    pub moments: Option<Moments>,
    pub calibration: Option<CalibrationSummary>,
    pub solution: Solution,
    pub problem: serde_json::Value,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Solves any objective form: Lagrangian problems go through the
/// separable fixed point, variance-constrained ones through the dual search.
pub fn solve(problem: &ProblemSpec, options: &SolveOptions) -> Result<SolveReport> {
    let solver = DefaultSolver { options: *options };
    let (a, b, calibration) = match &problem.objective {
        Objective::Separable { a, b } => (a.clone(), b.clone(), None),
        Objective::Lagrangian { w, y } => {
            let r = calibrate::pi2_to_pi3(problem, w, y, &solver, None)?;
            let summary = CalibrationSummary {
                method: "fixed-point",
                y: y.clone(),
                iterations: r.iterations,
                trace: r.trace,
            };
            (r.a, r.b, Some(summary))
        }
        Objective::VarianceConstrained { .. } => {
            let r = calibrate::pi1_to_pi2(problem, &solver)?;
            let summary = CalibrationSummary {
                method: r.method,
                y: r.y.clone(),
                iterations: r.iterations,
                trace: r.trace,
            };
            (r.a, r.b, Some(summary))
        }
    };
    let separable = problem.with_separable(a.clone(), b.clone());
    let solution = if calibration.is_some() {
        solve_separable_relaxed(&separable, options)?
    } else {
        solve_separable(&separable, options)?
    };
    let moments = match policy_moments(problem, &solution) {
        Ok((mean, var, source)) => Some(Moments { source, mean, var }),
        Err(Error::MissingAtoms { .. }) | Err(Error::RegimeCrossing { .. }) => None,
        Err(e) => return Err(e),
    };
    let separable_objective = solution.objective(problem.x0);
    let objective = match (&problem.objective, &moments) {
        (Objective::Separable { .. }, _) => separable_objective,
        (obj, Some(m)) => obj.evaluate(&m.mean, &m.var),
        (_, None) => f64::NAN,
    };
    Ok(SolveReport {
        method: solution.method(),
        options: *options,
        objective_form: problem.objective.form_name(),
        objective,
        separable_objective,
        a,
        b,
        moments,
        calibration,
        solution,
        problem: problem.to_json_value(),
    })
}
