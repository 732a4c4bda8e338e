//! Return distributions, problem definitions, moment computation and the
//! positive-definiteness checks every solver relies on.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{self, compensated_sum};

/// Atom probabilities within one period must sum to one within this tolerance.
pub const PROB_TOL: f64 = 1e-12;
/// Eigenvalue threshold for E[PP'], relative to its trace.
pub const PD_REL_TOL: f64 = 1e-10;
/// Stored moments must agree with atom-derived moments within this tolerance.
pub const MOMENT_MATCH_TOL: f64 = 1e-9;

/// One point of a period's joint return distribution.
///
/// `returns` is ordered `(e, e_1, ..., e_n)`: the reference entity first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAtom {
    #[serde(rename = "p", with = "num::dec")]
    pub prob: f64,
    #[serde(rename = "e", with = "num::dec_vec")]
    pub returns: Vec<f64>,
}

impl ScenarioAtom {
    pub fn new(prob: f64, returns: Vec<f64>) -> Self {
        ScenarioAtom { prob, returns }
    }

    pub fn reference(&self) -> f64 {
        self.returns[0]
    }

    /// Excess returns `P_i = e_i - e` of the risky entities.
    pub fn excess(&self) -> impl Iterator<Item = f64> + '_ {
        let e = self.returns[0];
        self.returns[1..].iter().map(move |r| r - e)
    }
}

/// First and second moments of one period, in the excess-return blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMoments {
    /// E[e]
    #[serde(with = "num::dec")]
    pub mean_ref: f64,
    /// E[e^2]
    #[serde(with = "num::dec")]
    pub second_ref: f64,
    /// E[P]
    #[serde(with = "num::dec_vec")]
    pub mean_excess: Vec<f64>,
    /// E[e P]
    #[serde(with = "num::dec_vec")]
    pub cross: Vec<f64>,
    /// E[P P']
    #[serde(with = "num::dec_mat")]
    pub second_excess: Vec<Vec<f64>>,
}

impl PeriodMoments {
    pub fn n(&self) -> usize {
        self.mean_excess.len()
    }

    fn check_shape(&self, n: usize) -> Result<()> {
        let ok = self.mean_excess.len() == n
            && self.cross.len() == n
            && self.second_excess.len() == n
            && self.second_excess.iter().all(|r| r.len() == n);
        if !ok {
            return Err(Error::Schema(format!("moment blocks must have dimension n = {n}")));
        }
        let all = [self.mean_ref, self.second_ref]
            .into_iter()
            .chain(self.mean_excess.iter().copied())
            .chain(self.cross.iter().copied())
            .chain(self.second_excess.iter().flatten().copied());
        for v in all {
            if !v.is_finite() {
                return Err(Error::Schema("moments must be finite".into()));
            }
        }
        Ok(())
    }

    fn max_abs_diff(&self, other: &PeriodMoments) -> f64 {
        let mut d = (self.mean_ref - other.mean_ref)
            .abs()
            .max((self.second_ref - other.second_ref).abs());
        for (a, b) in self.mean_excess.iter().zip(&other.mean_excess) {
            d = d.max((a - b).abs());
        }
        for (a, b) in self.cross.iter().zip(&other.cross) {
            d = d.max((a - b).abs());
        }
        for (ra, rb) in self.second_excess.iter().zip(&other.second_excess) {
            for (a, b) in ra.iter().zip(rb) {
                d = d.max((a - b).abs());
            }
        }
        d
    }

    /// Dense blocks with a Cholesky factor of E[PP'], ready for the stage solvers.
    pub fn blocks(&self, period: usize) -> Result<MomentBlocks> {
        MomentBlocks::new(self, period)
    }
}

/// Exact probability-weighted moments of a period's atoms.
pub fn moments_from_scenarios(atoms: &[ScenarioAtom], n: usize) -> Result<PeriodMoments> {
    check_atoms(atoms, n, 0)?;
    let mean_ref = compensated_sum(atoms.iter().map(|a| a.prob * a.reference()));
    let second_ref = compensated_sum(atoms.iter().map(|a| a.prob * a.reference().powi(2)));
    let excess: Vec<Vec<f64>> = atoms.iter().map(|a| a.excess().collect()).collect();
    let mean_excess = (0..n)
        .map(|i| compensated_sum(atoms.iter().zip(&excess).map(|(a, p)| a.prob * p[i])))
        .collect();
    let cross = (0..n)
        .map(|i| {
            compensated_sum(
                atoms
                    .iter()
                    .zip(&excess)
                    .map(|(a, p)| a.prob * a.reference() * p[i]),
            )
        })
        .collect();
    let mut second_excess = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = compensated_sum(atoms.iter().zip(&excess).map(|(a, p)| a.prob * p[i] * p[j]));
            second_excess[i][j] = v;
            second_excess[j][i] = v;
        }
    }
    Ok(PeriodMoments {
        mean_ref,
        second_ref,
        mean_excess,
        cross,
        second_excess,
    })
}

fn check_atoms(atoms: &[ScenarioAtom], n: usize, period: usize) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::EmptyAtomList { period });
    }
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    for a in atoms {
        if !(a.prob.is_finite() && a.prob > 0.0 && a.prob <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "atom probability {} outside (0, 1] (period {period})",
                a.prob
            )));
        }
        if a.returns.len() != n + 1 {
            return Err(Error::InvalidInput(format!(
                "atom has {} returns, expected n + 1 = {} (period {period})",
                a.returns.len(),
                n + 1
            )));
        }
        if a.returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite return (period {period})")));
        }
    }
    let sum = compensated_sum(atoms.iter().map(|a| a.prob));
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::ProbabilityNotNormalized { period, sum });
    }
    Ok(())
}

/// Outcome of one Assumption-1 check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The quantity that decided the check (asymmetry, smallest eigenvalue, Schur complement).
    #[serde(with = "num::dec")]
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub const CHECK_SYMMETRY: &str = "symmetry";
pub const CHECK_CONDITION1: &str = "eqn:condition1";
pub const CHECK_CONDITION2: &str = "eqn:condition2";

/// Symmetry of E[PP'], positive definiteness of E[PP'] and positivity of
/// the Schur complement E[e^2] - E[eP'] E[PP']^-1 E[eP]. Never fails; a
/// failing check records the offending quantity.
pub fn validate_assumption1(m: &PeriodMoments) -> ValidationReport {
    let n = m.n();
    let mut checks = Vec::with_capacity(3);

    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((m.second_excess[i][j] - m.second_excess[j][i]).abs());
        }
    }
    checks.push(Check {
        name: CHECK_SYMMETRY,
        passed: asym <= 1e-10,
        value: asym,
        detail: format!("max |E[PP']_ij - E[PP']_ji| = {asym:e}"),
    });

    let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (m.second_excess[i][j] + m.second_excess[j][i]));
    let trace = mat.trace();
    let min_eig = if n == 0 {
        0.0
    } else {
        SymmetricEigen::new(mat.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    };
    let pd = trace > 0.0 && min_eig > PD_REL_TOL * trace;
    checks.push(Check {
        name: CHECK_CONDITION1,
        passed: pd,
        value: min_eig,
        detail: format!("smallest eigenvalue of E[PP'] = {min_eig:e}, trace = {trace:e}"),
    });

    if pd {
        let schur = match Cholesky::new(mat) {
            Some(ch) => {
                let c = DVector::from_column_slice(&m.cross);
                m.second_ref - c.dot(&ch.solve(&c))
            }
            None => f64::NAN,
        };
        let thresh = PD_REL_TOL * m.second_ref.abs().max(1.0);
        checks.push(Check {
            name: CHECK_CONDITION2,
            passed: schur > thresh,
            value: schur,
            detail: format!("E[e^2] - E[eP'] E^-1[PP'] E[eP] = {schur:e}"),
        });
    } else {
        checks.push(Check {
            name: CHECK_CONDITION2,
            passed: false,
            value: f64::NAN,
            detail: "not evaluated: E[PP'] is not positive definite".into(),
        });
    }
    ValidationReport { checks }
}

/// Dense moment blocks of one period plus the scalar quadratic forms that
/// appear throughout the closed-form stage solution.
#[derive(Debug, Clone)]
pub struct MomentBlocks {
    pub n: usize,
    /// E[e]
    pub me: f64,
    /// E[e^2]
    pub me2: f64,
    /// E[P]
    pub mp: DVector<f64>,
    /// E[eP]
    pub mep: DVector<f64>,
    /// E[PP']
    pub m: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// E[PP']^-1 E[P]
    pub minv_mp: DVector<f64>,
    /// E[PP']^-1 E[eP]
    pub minv_mep: DVector<f64>,
    /// E[PP']^-1 1
    pub minv_one: DVector<f64>,
    /// E[P'] E^-1 E[P]
    pub spp: f64,
    /// E[P'] E^-1 E[eP]
    pub spe: f64,
    /// E[eP'] E^-1 E[eP]
    pub see: f64,
    /// 1' E^-1 E[P]
    pub s1p: f64,
    /// 1' E^-1 E[eP]
    pub s1e: f64,
    /// 1' E^-1 1
    pub s11: f64,
}

impl MomentBlocks {
    pub fn new(pm: &PeriodMoments, period: usize) -> Result<Self> {
        let n = pm.n();
        let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (pm.second_excess[i][j] + pm.second_excess[j][i]));
        let trace = m.trace();
        let min_eig = SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(trace > 0.0 && min_eig > PD_REL_TOL * trace) {
            return Err(Error::SingularMoments { period });
        }
        let chol = Cholesky::new(m.clone()).ok_or(Error::SingularMoments { period })?;
        let mp = DVector::from_column_slice(&pm.mean_excess);
        let mep = DVector::from_column_slice(&pm.cross);
        let one = DVector::from_element(n, 1.0);
        let minv_mp = chol.solve(&mp);
        let minv_mep = chol.solve(&mep);
        let minv_one = chol.solve(&one);
        Ok(MomentBlocks {
            n,
            me: pm.mean_ref,
            me2: pm.second_ref,
            spp: mp.dot(&minv_mp),
            spe: mp.dot(&minv_mep),
            see: mep.dot(&minv_mep),
            s1p: minv_mp.sum(),
            s1e: minv_mep.sum(),
            s11: minv_one.sum(),
            mp,
            mep,
            m,
            chol,
            minv_mp,
            minv_mep,
            minv_one,
        })
    }

    /// E[x_t] and E[x_t^2] for state `x` and allocation `u`.
    pub fn next_moments(&self, x: f64, u: &DVector<f64>) -> (f64, f64) {
        let mean = self.me * x + self.mp.dot(u);
        let second = self.me2 * x * x + 2.0 * x * self.mep.dot(u) + u.dot(&(&self.m * u));
        (mean, second)
    }
}

/// One period of the return model. At least one of `atoms` and
/// `given_moments` is present; `moments` is always populated.
#[derive(Debug, Clone, PartialEq)]
pub struct Period {
    pub atoms: Option<Vec<ScenarioAtom>>,
    pub moments: PeriodMoments,
    pub given_moments: bool,
}

impl Period {
    pub fn from_atoms(atoms: Vec<ScenarioAtom>, n: usize) -> Result<Self> {
        let moments = moments_from_scenarios(&atoms, n)?;
        Ok(Period {
            atoms: Some(atoms),
            moments,
            given_moments: false,
        })
    }

    pub fn from_moments(moments: PeriodMoments) -> Self {
        Period {
            atoms: None,
            moments,
            given_moments: true,
        }
    }
}

/// Per-period joint return descriptions for `n` risky entities plus the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnModel {
    pub n: usize,
    pub periods: Vec<Period>,
}

impl ReturnModel {
    pub fn atoms(&self, period: usize) -> Result<&[ScenarioAtom]> {
        self.periods[period]
            .atoms
            .as_deref()
            .ok_or(Error::MissingAtoms { period })
    }

    pub fn has_all_atoms(&self) -> bool {
        self.periods.iter().all(|p| p.atoms.is_some())
    }

    pub fn moments(&self, period: usize) -> &PeriodMoments {
        &self.periods[period].moments
    }
}

/// The three objective formulations: variance-constrained, Lagrangian and separable.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// max sum w_t E[x_t] s.t. Var[x_t] <= alpha_t
    VarianceConstrained { w: Vec<f64>, alpha: Vec<f64> },
    /// max sum w_t E[x_t] - y_t Var[x_t]
    Lagrangian { w: Vec<f64>, y: Vec<f64> },
    /// max sum E[a_t x_t - b_t x_t^2]
    Separable { a: Vec<f64>, b: Vec<f64> },
}

impl Objective {
    pub fn form_name(&self) -> &'static str {
        match self {
            Objective::VarianceConstrained { .. } => "variance_constrained",
            Objective::Lagrangian { .. } => "lagrangian",
            Objective::Separable { .. } => "separable",
        }
    }

    pub fn separable(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Objective::Separable { a, b } => Some((a, b)),
            _ => None,
        }
    }

    /// Objective value given exact or estimated per-period means and variances.
    pub fn evaluate(&self, mean: &[f64], var: &[f64]) -> f64 {
        match self {
            Objective::VarianceConstrained { w, .. } => {
                compensated_sum(w.iter().zip(mean).map(|(w, m)| w * m))
            }
            Objective::Lagrangian { w, y } => compensated_sum(
                (0..w.len()).map(|t| w[t] * mean[t] - y[t] * var[t]),
            ),
            Objective::Separable { a, b } => compensated_sum(
                (0..a.len()).map(|t| a[t] * mean[t] - b[t] * (var[t] + mean[t] * mean[t])),
            ),
        }
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        let check = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != horizon {
                return Err(Error::Schema(format!(
                    "objective.{name} has length {}, horizon is {horizon}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("objective.{name} must be finite")));
            }
            Ok(())
        };
        match self {
            Objective::VarianceConstrained { w, alpha } => {
                check("w", w)?;
                check("alpha", alpha)?;
                if alpha.iter().any(|a| *a <= 0.0) {
                    return Err(Error::Schema("objective.alpha must be > 0".into()));
                }
            }
            Objective::Lagrangian { w, y } => {
                check("w", w)?;
                check("y", y)?;
                if y.iter().any(|v| *v < 0.0) {
                    return Err(Error::Schema("objective.y must be >= 0".into()));
                }
            }
            Objective::Separable { a, b } => {
                check("a", a)?;
                check("b", b)?;
                if b.iter().any(|v| *v < 0.0) {
                    return Err(Error::Schema("objective.b must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// A complete allocation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub horizon: usize,
    pub x0: f64,
    pub model: ReturnModel,
    pub objective: Objective,
    /// Per-unit cost of allocating beyond the available resource, per period.
    pub borrow_cost: Option<Vec<f64>>,
}

impl ProblemSpec {
    pub fn new(
        x0: f64,
        model: ReturnModel,
        objective: Objective,
        borrow_cost: Option<Vec<f64>>,
    ) -> Result<Self> {
        let p = ProblemSpec {
            horizon: model.periods.len(),
            x0,
            model,
            objective,
            borrow_cost,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.model.n
    }

    /// Same instance with a separable objective swapped in.
    pub fn with_separable(&self, a: Vec<f64>, b: Vec<f64>) -> ProblemSpec {
        ProblemSpec {
            objective: Objective::Separable { a, b },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Schema("horizon must be >= 1".into()));
        }
        if self.model.periods.len() != self.horizon {
            return Err(Error::Schema(format!(
                "{} periods given, horizon is {}",
                self.model.periods.len(),
                self.horizon
            )));
        }
        if self.model.n == 0 {
            return Err(Error::Schema("n must be >= 1".into()));
        }
        if !self.x0.is_finite() {
            return Err(Error::Schema("x0 must be finite".into()));
        }
        self.objective.validate(self.horizon)?;
        if let Some(c) = &self.borrow_cost {
            if c.len() != self.horizon || c.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Schema(
                    "borrow_cost must have one finite nonnegative entry per period".into(),
                ));
            }
        }
        for (t, p) in self.model.periods.iter().enumerate() {
            p.moments.check_shape(self.model.n)?;
            if let Some(atoms) = &p.atoms {
                check_atoms(atoms, self.model.n, t)?;
                if p.given_moments {
                    let derived = moments_from_scenarios(atoms, self.model.n)?;
                    let d = derived.max_abs_diff(&p.moments);
                    if d > MOMENT_MATCH_TOL {
                        return Err(Error::Schema(format!(
                            "period {t}: stored moments differ from atom moments by {d:e}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Assumption-1 report for every period.
    pub fn validation_reports(&self) -> Vec<ValidationReport> {
        self.model
            .periods
            .iter()
            .map(|p| validate_assumption1(&p.moments))
            .collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawProblem =
            serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        raw.into_problem()
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(RawProblem::from(self)).expect("problem serializes")
    }
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawObjective {
    pub form: String,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    pub w: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    pub y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    pub a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    pub b: Option<Vec<f64>>,
}

mod opt_vec {
    use crate::num::Dec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        x.as_ref()
            .map(|v| v.iter().map(|x| Dec(*x)).collect::<Vec<_>>())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        Option::<Vec<Dec>>::deserialize(d).map(|o| o.map(|v| v.into_iter().map(|x| x.0).collect()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPeriod {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<ScenarioAtom>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<PeriodMoments>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProblem {
    pub horizon: usize,
    #[serde(with = "num::dec")]
    pub x0: f64,
    pub n: usize,
    pub objective: RawObjective,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    pub borrow_cost: Option<Vec<f64>>,
    pub periods: Vec<RawPeriod>,
}

impl RawObjective {
    fn into_objective(self) -> Result<Objective> {
        let form = self.form.to_ascii_lowercase().replace(['-', '_'], "");
        let stray = |name: &str, present: bool| -> Result<()> {
            if present {
                Err(Error::Schema(format!(
                    "objective.{name} is not a field of form {:?}",
                    self.form
                )))
            } else {
                Ok(())
            }
        };
        let need = |name: &str, v: Option<Vec<f64>>| -> Result<Vec<f64>> {
            v.ok_or_else(|| Error::Schema(format!("objective.{name} is required")))
        };
        match form.as_str() {
            "varianceconstrained" => {
                stray("y", self.y.is_some())?;
                stray("a", self.a.is_some())?;
                stray("b", self.b.is_some())?;
                Ok(Objective::VarianceConstrained {
                    w: need("w", self.w)?,
                    alpha: need("alpha", self.alpha)?,
                })
            }
            "lagrangian" => {
                stray("alpha", self.alpha.is_some())?;
                stray("a", self.a.is_some())?;
                stray("b", self.b.is_some())?;
                Ok(Objective::Lagrangian {
                    w: need("w", self.w)?,
                    y: need("y", self.y)?,
                })
            }
            "separable" => {
                stray("alpha", self.alpha.is_some())?;
                stray("y", self.y.is_some())?;
                Ok(Objective::Separable {
                    a: need("a", self.a)?,
                    b: need("b", self.b)?,
                })
            }
            _ => Err(Error::Schema(format!("unknown objective form {:?}", self.form))),
        }
    }
}

impl RawProblem {
    pub fn into_problem(self) -> Result<ProblemSpec> {
        if self.periods.len() != self.horizon {
            return Err(Error::Schema(format!(
                "{} periods given, horizon is {}",
                self.periods.len(),
                self.horizon
            )));
        }
        let n = self.n;
        if n == 0 {
            return Err(Error::Schema("n must be >= 1".into()));
        }
        let mut periods = Vec::with_capacity(self.periods.len());
        for (t, p) in self.periods.into_iter().enumerate() {
            let period = match (p.atoms, p.moments) {
                (None, None) => {
                    return Err(Error::Schema(format!("period {t} has neither atoms nor moments")))
                }
                (Some(atoms), None) => {
                    check_atoms(&atoms, n, t)?;
                    Period::from_atoms(atoms, n)?
                }
                (None, Some(m)) => {
                    m.check_shape(n)?;
                    Period::from_moments(m)
                }
                (Some(atoms), Some(m)) => Period {
                    atoms: Some(atoms),
                    moments: m,
                    given_moments: true,
                },
            };
            periods.push(period);
        }
        ProblemSpec::new(
            self.x0,
            ReturnModel { n, periods },
            self.objective.into_objective()?,
            self.borrow_cost,
        )
    }
}

impl From<&ProblemSpec> for RawProblem {
    fn from(p: &ProblemSpec) -> Self {
        let mut obj = RawObjective {
            form: p.objective.form_name().to_string(),
            w: None,
            alpha: None,
            y: None,
            a: None,
            b: None,
        };
        match &p.objective {
            Objective::VarianceConstrained { w, alpha } => {
                obj.w = Some(w.clone());
                obj.alpha = Some(alpha.clone());
            }
            Objective::Lagrangian { w, y } => {
                obj.w = Some(w.clone());
                obj.y = Some(y.clone());
            }
            Objective::Separable { a, b } => {
                obj.a = Some(a.clone());
                obj.b = Some(b.clone());
            }
        }
        RawProblem {
            horizon: p.horizon,
            x0: p.x0,
            n: p.model.n,
            objective: obj,
            borrow_cost: p.borrow_cost.clone(),
            periods: p
                .model
                .periods
                .iter()
                .map(|per| RawPeriod {
                    atoms: per.atoms.clone(),
                    moments: if per.given_moments || per.atoms.is_none() {
                        Some(per.moments.clone())
                    } else {
                        None
                    },
                })
                .collect(),
        }
    }
}
