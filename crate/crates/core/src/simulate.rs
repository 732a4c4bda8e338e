//! Policy evaluation by Monte Carlo over the atoms and by exact moment
//! propagation for affine policies.

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Objective, ProblemSpec, ScenarioAtom};
use crate::num::{self, fmt17, pairwise_sum};
use crate::policy::{AffineRule, AllocationPolicy};

const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodStats {
    /// 1-based period index.
    pub period: usize,
    #[serde(with = "num::dec")]
    pub mean: f64,
    #[serde(with = "num::dec")]
    pub var: f64,
    #[serde(with = "num::dec")]
    pub se_mean: f64,
    #[serde(with = "num::dec")]
    pub se_var: f64,
    #[serde(with = "num::dec_vec")]
    pub ci_mean: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub ci_var: Vec<f64>,
    /// Average `[1'u_t - x_{t-1}]^+`.
    #[serde(with = "num::dec")]
    pub overdraft: f64,
}

/// Estimate of the problem's objective with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub form: &'static str,
    #[serde(with = "num::dec")]
    pub value: f64,
    #[serde(with = "num::dec")]
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub paths: usize,
    pub seed: u64,
    pub periods: Vec<PeriodStats>,
    /// Estimates of the problem's objective.
    pub objectives: Vec<ObjectiveEstimate>,
}

impl SimSummary {
    pub fn means(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.mean).collect()
    }

    pub fn vars(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.var).collect()
    }

    /// `period,mean,var,se_mean,se_var` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("period,mean,var,se_mean,se_var\n");
        for p in &self.periods {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.period,
                fmt17(p.mean),
                fmt17(p.var),
                fmt17(p.se_mean),
                fmt17(p.se_var)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

fn draw(atoms: &[ScenarioAtom], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, a) in atoms.iter().enumerate() {
        acc += a.prob;
        if u < acc {
            return j;
        }
    }
    atoms.len() - 1
}

/// One path: states `x_1..x_T` and overdrafts.
fn run_path(
    problem: &ProblemSpec,
    atoms: &[&[ScenarioAtom]],
    policy: &dyn AllocationPolicy,
    seed: u64,
    path: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    let horizon = problem.horizon;
    let mut xs = Vec::with_capacity(horizon);
    let mut od = Vec::with_capacity(horizon);
    let mut history = Vec::with_capacity(horizon);
    let mut x = problem.x0;
    for (t, at) in atoms.iter().enumerate() {
        let u = policy.allocate_at(t, &history, x)?;
        od.push((u.iter().sum::<f64>() - x).max(0.0));
        let j = draw(at, rng.random::<f64>());
        let atom = &at[j];
        x = atom.reference() * x + atom.excess().zip(&u).map(|(p, ui)| p * ui).sum::<f64>();
        xs.push(x);
        history.push(j);
    }
    Ok((xs, od))
}

/// Per-path contribution to the objective, linearized around the sample
/// means for variance terms so its sample standard error is the delta-method
/// error of the objective estimate.
fn influence(objective: &Objective, costs: Option<&[f64]>, xs: &[f64], od: &[f64], mean: &[f64]) -> f64 {
    let charge: f64 = costs.map_or(0.0, |c| c.iter().zip(od).map(|(c, o)| c * o).sum());
    let body: f64 = match objective {
        Objective::VarianceConstrained { w, .. } => w.iter().zip(xs).map(|(w, x)| w * x).sum(),
        Objective::Lagrangian { w, y } => (0..xs.len())
            .map(|t| w[t] * xs[t] - y[t] * (xs[t] - mean[t]).powi(2))
            .sum(),
        Objective::Separable { a, b } => (0..xs.len()).map(|t| a[t] * xs[t] - b[t] * xs[t] * xs[t]).sum(),
    };
    body - charge
}

/// Standard error of the sample mean.
fn sample_se(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    (pairwise_sum(&dev) / (n - 1.0) / n).sqrt()
}

/// Monte Carlo evaluation of `policy`. Path `i` draws from its own ChaCha
/// stream, so the summary depends only on `(problem, policy, paths, seed)`.
pub fn simulate_policy(
    problem: &ProblemSpec,
    policy: &dyn AllocationPolicy,
    paths: usize,
    seed: u64,
) -> Result<SimSummary> {
    if paths == 0 {
        return Err(Error::InvalidInput("at least one path is required".into()));
    }
    let horizon = problem.horizon;
    let atoms = (0..horizon)
        .map(|t| problem.model.atoms(t))
        .collect::<Result<Vec<_>>>()?;
    let runs = (0..paths as u64)
        .into_par_iter()
        .map(|i| run_path(problem, &atoms, policy, seed, i))
        .collect::<Result<Vec<_>>>()?;

    let n = paths as f64;
    let mut periods = Vec::with_capacity(horizon);
    let mut means = Vec::with_capacity(horizon);
    let mut vars = Vec::with_capacity(horizon);
    let mut overdrafts = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let xs: Vec<f64> = runs.iter().map(|r| r.0[t]).collect();
        let mean = pairwise_sum(&xs) / n;
        let d2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
        let d4: Vec<f64> = d2.iter().map(|d| d * d).collect();
        let m2 = pairwise_sum(&d2) / n;
        let var = if paths > 1 { m2 * n / (n - 1.0) } else { 0.0 };
        let m4 = pairwise_sum(&d4) / n;
        let se_mean = (var / n).sqrt();
        let se_var = if paths > 3 {
            ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
        } else {
            0.0
        };
        let ods: Vec<f64> = runs.iter().map(|r| r.1[t]).collect();
        let overdraft = pairwise_sum(&ods) / n;
        periods.push(PeriodStats {
            period: t + 1,
            mean,
            var,
            se_mean,
            se_var,
            ci_mean: vec![mean - Z95 * se_mean, mean + Z95 * se_mean],
            ci_var: vec![(var - Z95 * se_var).max(0.0), var + Z95 * se_var],
            overdraft,
        });
        means.push(mean);
        vars.push(var);
        overdrafts.push(overdraft);
    }

    let costs = problem.borrow_cost.as_deref();
    let charges: f64 = costs.map_or(0.0, |c| c.iter().zip(&overdrafts).map(|(c, o)| c * o).sum());
    let per_path: Vec<f64> = runs
        .iter()
        .map(|(xs, od)| influence(&problem.objective, costs, xs, od, &means))
        .collect();
    let objectives = vec![ObjectiveEstimate {
        form: problem.objective.form_name(),
        value: problem.objective.evaluate(&means, &vars) - charges,
        se: sample_se(&per_path),
    }];
    Ok(SimSummary {
        paths,
        seed,
        periods,
        objectives,
    })
}

/// Exact first and second moments under an affine policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentPath {
    #[serde(with = "num::dec_vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub second: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub var: Vec<f64>,
}

/// Pushes `(E[x], E[x^2])` through `x_t = e x + P'(g + h x)`. Each stage must
/// use a single affine piece on the reachable states; periods given only by
/// moments need a one-piece rule.
pub fn propagate_moments(problem: &ProblemSpec, rules: &[AffineRule]) -> Result<MomentPath> {
    let horizon = problem.horizon;
    if rules.len() != horizon {
        return Err(Error::InvalidInput(format!(
            "{} stage rules for a horizon of {horizon}",
            rules.len()
        )));
    }
    let mut m = problem.x0;
    let mut s = problem.x0 * problem.x0;
    let mut reach = Some((problem.x0, problem.x0));
    let mut out = MomentPath {
        mean: Vec::with_capacity(horizon),
        second: Vec::with_capacity(horizon),
        var: Vec::with_capacity(horizon),
    };
    for (t, rule) in rules.iter().enumerate() {
        let k = match reach {
            Some((lo, hi)) => {
                let k = rule.piece_index(lo);
                if rule.piece_index(hi) != k
                    && rule.breakpoints.iter().any(|b| *b > lo && *b < hi)
                {
                    return Err(Error::RegimeCrossing { period: t + 1 });
                }
                k
            }
            None if rule.pieces.len() == 1 => 0,
            None => return Err(Error::RegimeCrossing { period: t + 1 }),
        };
        let piece = &rule.pieces[k];
        let g = DVector::from_column_slice(&piece.intercept);
        let h = DVector::from_column_slice(&piece.slope);
        let bl = problem.model.moments(t).blocks(t + 1)?;
        let e_eta = bl.me + bl.mp.dot(&h);
        let e_zeta = bl.mp.dot(&g);
        let e_eta2 = bl.me2 + 2.0 * bl.mep.dot(&h) + h.dot(&(&bl.m * &h));
        let e_eta_zeta = bl.mep.dot(&g) + h.dot(&(&bl.m * &g));
        let e_zeta2 = g.dot(&(&bl.m * &g));
        let (m1, s1) = (e_eta * m + e_zeta, e_eta2 * s + 2.0 * e_eta_zeta * m + e_zeta2);
        m = m1;
        s = s1;
        out.mean.push(m);
        out.second.push(s);
        out.var.push((s - m * m).max(0.0));

        reach = match (reach, problem.model.periods[t].atoms.as_ref()) {
            (Some((lo, hi)), Some(atoms)) => {
                let mut nlo = f64::INFINITY;
                let mut nhi = f64::NEG_INFINITY;
                for a in atoms {
                    let p: Vec<f64> = a.excess().collect();
                    let eta = a.reference() + p.iter().zip(&piece.slope).map(|(p, h)| p * h).sum::<f64>();
                    let zeta: f64 = p.iter().zip(&piece.intercept).map(|(p, g)| p * g).sum();
                    for x in [lo, hi] {
                        nlo = nlo.min(eta * x + zeta);
                        nhi = nhi.max(eta * x + zeta);
                    }
                }
                Some((nlo, nhi))
            }
            _ => None,
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Period, ReturnModel};
    use crate::policy::{AffinePiece, ZeroPolicy};

    fn problem(atoms: Vec<ScenarioAtom>, horizon: usize) -> ProblemSpec {
        let periods = (0..horizon).map(|_| Period::from_atoms(atoms.clone(), 1).unwrap()).collect();
        ProblemSpec::new(
            2.0,
            ReturnModel { n: 1, periods },
            Objective::Separable {
                a: vec![1.0; horizon],
                b: vec![0.01; horizon],
            },
            None,
        )
        .unwrap()
    }

    fn two_atoms() -> Vec<ScenarioAtom> {
        vec![
            ScenarioAtom::new(0.5, vec![1.05, 1.6]),
            ScenarioAtom::new(0.5, vec![1.05, 0.8]),
        ]
    }

    #[test]
    fn zero_policy_is_deterministic_growth() {
        let p = problem(two_atoms(), 3);
        let s = simulate_policy(&p, &ZeroPolicy { n: 1, horizon: 3 }, 100, 1).unwrap();
        for (t, st) in s.periods.iter().enumerate() {
            assert!((st.mean - 2.0 * 1.05f64.powi(t as i32 + 1)).abs() < 1e-12);
            assert!(st.var < 1e-20);
        }
        let m = propagate_moments(&p, &ZeroPolicy { n: 1, horizon: 3 }.affine_rules().unwrap()).unwrap();
        assert!((m.second[2] - 4.0 * 1.05f64.powi(6)).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_bits() {
        let p = problem(two_atoms(), 2);
        let pol = crate::policy::AffinePolicy::new(vec![
            AffineRule::single(AffinePiece::new(vec![0.5], vec![0.1]));
            2
        ]);
        let a = simulate_policy(&p, &pol, 1000, 9).unwrap();
        let b = simulate_policy(&p, &pol, 1000, 9).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
        let c = simulate_policy(&p, &pol, 1000, 10).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn affine_propagation_matches_hand_algebra() {
        // x1 = 1.05 x0 + (P)(g + h x0), P = 0.55 or -0.25 with equal odds
        let p = problem(two_atoms(), 1);
        let rule = AffineRule::single(AffinePiece::new(vec![0.3], vec![0.2]));
        let m = propagate_moments(&p, &[rule]).unwrap();
        let u = 0.3 + 0.2 * 2.0;
        let hi = 1.05 * 2.0 + 0.55 * u;
        let lo = 1.05 * 2.0 - 0.25 * u;
        assert!((m.mean[0] - 0.5 * (hi + lo)).abs() < 1e-12);
        assert!((m.second[0] - 0.5 * (hi * hi + lo * lo)).abs() < 1e-12);
    }

    #[test]
    fn straddling_a_breakpoint_is_rejected() {
        let p = problem(two_atoms(), 2);
        let flat = AffineRule::single(AffinePiece::new(vec![1.0], vec![0.0]));
        let kinked = AffineRule::new(
            vec![2.3],
            vec![AffinePiece::new(vec![0.0], vec![1.0]), AffinePiece::new(vec![2.3], vec![0.0])],
        )
        .unwrap();
        assert!(matches!(
            propagate_moments(&p, &[flat, kinked]),
            Err(Error::RegimeCrossing { period: 2 })
        ));
    }
}
