//! Brute-force ground truth on small scenario trees.
//!
//! `oracle_solve` enumerates every grid allocation at every node of the
//! atom tree and keeps the best one, so its objective is a lower bound on the
//! true optimum that tightens as the grid is refined. `oracle_evaluate`
//! computes the exact moments of any policy by walking the whole tree.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProblemSpec, ScenarioAtom};
use crate::num;
use crate::policy::AllocationPolicy;

pub const MAX_HORIZON: usize = 3;
pub const MAX_ENTITIES: usize = 2;
pub const MAX_ATOMS: usize = 3;
pub const MAX_GRID: usize = 2001;
/// Upper bound on stage evaluations performed by one `oracle_solve`.
pub const MAX_WORK: f64 = 1e9;
pub const MAX_LEAVES: usize = 1_000_000;

/// Allocation per node of the scenario tree, keyed by the atom history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreePolicy {
    pub n: usize,
    pub horizon: usize,
    #[serde(serialize_with = "serialize_nodes")]
    pub nodes: BTreeMap<Vec<usize>, Vec<f64>>,
}

fn serialize_nodes<S: serde::Serializer>(
    nodes: &BTreeMap<Vec<usize>, Vec<f64>>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    #[derive(Serialize)]
    struct Node<'a> {
        history: &'a [usize],
        #[serde(with = "num::dec_vec")]
        allocation: &'a [f64],
    }
    let mut seq = s.serialize_seq(Some(nodes.len()))?;
    for (h, u) in nodes {
        seq.serialize_element(&Node { history: h, allocation: u })?;
    }
    seq.end()
}

impl AllocationPolicy for TreePolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n(&self) -> usize {
        self.n
    }

    fn allocate(&self, t: usize, _x: f64) -> Result<Vec<f64>> {
        Err(Error::InvalidInput(format!(
            "a tree policy needs the scenario history (stage {t})"
        )))
    }

    fn allocate_at(&self, _t: usize, history: &[usize], _x: f64) -> Result<Vec<f64>> {
        self.nodes
            .get(history)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no tree node for history {history:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSolution {
    pub policy: TreePolicy,
    #[serde(with = "num::dec")]
    pub objective: f64,
    pub grid: usize,
}

/// Range of each allocation on the grid at resource `x`.
fn grid_range(x: f64, nonneg: bool, overdraft: bool) -> (f64, f64) {
    let r = if overdraft { 2.0 * x.abs() } else { x.abs() };
    (if nonneg { 0.0 } else { -r }, r)
}

/// Point `k` of `grid` evenly spaced points on `[lo, hi]`, hitting both ends exactly.
fn grid_point(lo: f64, hi: f64, k: usize, grid: usize) -> f64 {
    let steps = grid - 1;
    if k == steps {
        hi
    } else if 2 * k == steps {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * (k as f64 / steps as f64)
    }
}

/// Budget test with room for rounding in sums of grid points.
fn over_budget(total: f64, x: f64) -> bool {
    total > x + 1e-12 * (1.0 + x.abs())
}

struct Search<'a> {
    atoms: Vec<&'a [ScenarioAtom]>,
    a: &'a [f64],
    b: &'a [f64],
    cost: Option<&'a [f64]>,
    grid: usize,
    n: usize,
    nonneg: bool,
}

impl Search<'_> {
    fn horizon(&self) -> usize {
        self.atoms.len()
    }

    fn combos(&self) -> usize {
        self.grid.pow(self.n as u32)
    }

    /// Grid point `idx` (lexicographic, first entity slowest) at resource `x`.
    fn point(&self, idx: usize, x: f64) -> Vec<f64> {
        let (lo, hi) = grid_range(x, self.nonneg, self.cost.is_some());
        let mut u = vec![0.0; self.n];
        let mut rem = idx;
        for i in (0..self.n).rev() {
            u[i] = grid_point(lo, hi, rem % self.grid, self.grid);
            rem /= self.grid;
        }
        u
    }

    /// Expected stage reward plus continuation, or `None` if infeasible.
    fn score(&self, t: usize, x: f64, u: &[f64]) -> Option<f64> {
        let total: f64 = u.iter().sum();
        let mut penalty = 0.0;
        match self.cost {
            Some(c) => penalty = c[t] * (total - x).max(0.0),
            None if over_budget(total, x) => return None,
            None => {}
        }
        let mut s = -penalty;
        for atom in self.atoms[t] {
            let z = atom.reference() * x + atom.excess().zip(u).map(|(p, ui)| p * ui).sum::<f64>();
            s += atom.prob * (self.a[t] * z - self.b[t] * z * z + self.value(t + 1, z));
        }
        Some(s)
    }

    fn value(&self, t: usize, x: f64) -> f64 {
        if t == self.horizon() {
            0.0
        } else {
            self.argmax(t, x).0
        }
    }

    fn argmax(&self, t: usize, x: f64) -> (f64, usize) {
        let better = |a: (f64, usize), b: (f64, usize)| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                b
            } else {
                a
            }
        };
        let worst = (f64::NEG_INFINITY, usize::MAX);
        let eval = |idx: usize| {
            self.score(t, x, &self.point(idx, x))
                .map_or(worst, |s| (s, idx))
        };
        if t == 0 {
            (0..self.combos()).into_par_iter().map(eval).reduce(|| worst, better)
        } else {
            (0..self.combos()).map(eval).fold(worst, better)
        }
    }

    fn build(&self, t: usize, x: f64, history: &mut Vec<usize>, nodes: &mut BTreeMap<Vec<usize>, Vec<f64>>) -> f64 {
        let (v, idx) = self.argmax(t, x);
        let u = self.point(idx, x);
        for (j, atom) in self.atoms[t].iter().enumerate() {
            if t + 1 < self.horizon() {
                let z = atom.reference() * x + atom.excess().zip(&u).map(|(p, ui)| p * ui).sum::<f64>();
                history.push(j);
                self.build(t + 1, z, history, nodes);
                history.pop();
            }
        }
        nodes.insert(history.clone(), u);
        v
    }
}

/// Best grid policy over the full scenario tree. `grid` is the number of
/// points per entity on `[-|x|, |x|]` (`[0, |x|]` with `nonneg`; the range
/// doubles when overdraft is allowed).
pub fn oracle_solve(problem: &ProblemSpec, grid: usize, nonneg: bool) -> Result<OracleSolution> {
    let (a, b) = problem.objective.separable().ok_or_else(|| {
        Error::InvalidInput("the tree oracle maximizes a separable objective".into())
    })?;
    let n = problem.n();
    let horizon = problem.horizon;
    if horizon > MAX_HORIZON || n > MAX_ENTITIES {
        return Err(Error::InstanceTooLarge(format!(
            "oracle supports T <= {MAX_HORIZON} and n <= {MAX_ENTITIES}, got T = {horizon}, n = {n}"
        )));
    }
    if !(2..=MAX_GRID).contains(&grid) {
        return Err(Error::InstanceTooLarge(format!(
            "grid must have 2..={MAX_GRID} points per entity, got {grid}"
        )));
    }
    let mut atoms = Vec::with_capacity(horizon);
    let mut work = 1.0;
    let mut total = 0.0;
    for t in 0..horizon {
        let at = problem.model.atoms(t)?;
        if at.len() > MAX_ATOMS {
            return Err(Error::InstanceTooLarge(format!(
                "period {} has {} atoms, the oracle handles at most {MAX_ATOMS}",
                t + 1,
                at.len()
            )));
        }
        work *= (grid as f64).powi(n as i32) * at.len() as f64;
        total += work;
        atoms.push(at);
    }
    if total > MAX_WORK {
        return Err(Error::InstanceTooLarge(format!(
            "about {total:.3e} stage evaluations exceed the limit {MAX_WORK:e}"
        )));
    }
    let search = Search {
        atoms,
        a,
        b,
        cost: problem.borrow_cost.as_deref(),
        grid,
        n,
        nonneg,
    };
    let mut nodes = BTreeMap::new();
    let objective = search.build(0, problem.x0, &mut Vec::new(), &mut nodes);
    Ok(OracleSolution {
        policy: TreePolicy { n, horizon, nodes },
        objective,
        grid,
    })
}

/// Another policy snapped onto the oracle grid: each coordinate is rounded
/// down to a grid point (clamped to the grid range), then lowered further
/// until the budget holds. Its tree value is attainable by the oracle, so it
/// bounds the oracle from below.
pub struct GridRounded<'a> {
    pub inner: &'a dyn AllocationPolicy,
    pub grid: usize,
    pub nonneg: bool,
    pub overdraft: bool,
}

impl GridRounded<'_> {
    fn snap(&self, u: Vec<f64>, x: f64) -> Vec<f64> {
        let (lo, hi) = grid_range(x, self.nonneg, self.overdraft);
        let steps = self.grid - 1;
        if hi == lo {
            return vec![lo; u.len()];
        }
        let step = (hi - lo) / steps as f64;
        let mut k: Vec<usize> = u
            .iter()
            .map(|ui| {
                let mut k = ((ui - lo) / step).floor().clamp(0.0, steps as f64) as usize;
                // Division can land one index short of a point equal to `ui`.
                if k < steps && grid_point(lo, hi, k + 1, self.grid) <= *ui {
                    k += 1;
                }
                k
            })
            .collect();
        let at = |k: &[usize]| k.iter().map(|&ki| grid_point(lo, hi, ki, self.grid)).collect::<Vec<f64>>();
        while !self.overdraft && over_budget(at(&k).iter().sum::<f64>(), x) {
            let i = (0..k.len()).max_by_key(|i| k[*i]).unwrap();
            if k[i] == 0 {
                break;
            }
            k[i] -= 1;
        }
        at(&k)
    }
}

impl AllocationPolicy for GridRounded<'_> {
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn n(&self) -> usize {
        self.inner.n()
    }

    fn allocate(&self, t: usize, x: f64) -> Result<Vec<f64>> {
        Ok(self.snap(self.inner.allocate(t, x)?, x))
    }

    fn allocate_at(&self, t: usize, history: &[usize], x: f64) -> Result<Vec<f64>> {
        Ok(self.snap(self.inner.allocate_at(t, history, x)?, x))
    }
}

/// Tree value of `policy` snapped onto the oracle grid.
pub fn rounded_value(problem: &ProblemSpec, policy: &dyn AllocationPolicy, grid: usize, nonneg: bool) -> Result<f64> {
    let rounded = GridRounded {
        inner: policy,
        grid,
        nonneg,
        overdraft: problem.borrow_cost.is_some(),
    };
    Ok(oracle_evaluate(problem, &rounded)?.objective)
}

/// Exact per-period moments of a policy over the scenario tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeEvaluation {
    #[serde(with = "num::dec_vec")]
    pub mean: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub second: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub var: Vec<f64>,
    /// Expected `[1'u_t - x_{t-1}]^+`.
    #[serde(with = "num::dec_vec")]
    pub overdraft: Vec<f64>,
    /// The problem's objective, less expected overdraft charges.
    #[serde(with = "num::dec")]
    pub objective: f64,
}

struct Walk<'a> {
    atoms: Vec<&'a [ScenarioAtom]>,
    policy: &'a dyn AllocationPolicy,
    mean: Vec<f64>,
    second: Vec<f64>,
    overdraft: Vec<f64>,
}

impl Walk<'_> {
    fn visit(&mut self, t: usize, x: f64, prob: f64, history: &mut Vec<usize>) -> Result<()> {
        if t == self.atoms.len() {
            return Ok(());
        }
        let u = self.policy.allocate_at(t, history, x)?;
        self.overdraft[t] += prob * (u.iter().sum::<f64>() - x).max(0.0);
        for (j, atom) in self.atoms[t].iter().enumerate() {
            let z = atom.reference() * x + atom.excess().zip(&u).map(|(p, ui)| p * ui).sum::<f64>();
            let pj = prob * atom.prob;
            self.mean[t] += pj * z;
            self.second[t] += pj * z * z;
            history.push(j);
            self.visit(t + 1, z, pj, history)?;
            history.pop();
        }
        Ok(())
    }
}

pub fn oracle_evaluate(problem: &ProblemSpec, policy: &dyn AllocationPolicy) -> Result<TreeEvaluation> {
    let horizon = problem.horizon;
    if policy.horizon() != horizon || policy.n() != problem.n() {
        return Err(Error::InvalidInput(format!(
            "policy shape (T = {}, n = {}) does not match the problem (T = {horizon}, n = {})",
            policy.horizon(),
            policy.n(),
            problem.n()
        )));
    }
    let mut atoms = Vec::with_capacity(horizon);
    let mut leaves = 1usize;
    for t in 0..horizon {
        let at = problem.model.atoms(t)?;
        leaves = leaves.saturating_mul(at.len());
        atoms.push(at);
    }
    if leaves > MAX_LEAVES {
        return Err(Error::InstanceTooLarge(format!(
            "{leaves} scenario paths exceed the limit {MAX_LEAVES}"
        )));
    }
    let mut walk = Walk {
        atoms,
        policy,
        mean: vec![0.0; horizon],
        second: vec![0.0; horizon],
        overdraft: vec![0.0; horizon],
    };
    walk.visit(0, problem.x0, 1.0, &mut Vec::new())?;
    let var: Vec<f64> = walk
        .mean
        .iter()
        .zip(&walk.second)
        .map(|(m, s)| (s - m * m).max(0.0))
        .collect();
    let charges: f64 = match &problem.borrow_cost {
        Some(c) => c.iter().zip(&walk.overdraft).map(|(c, o)| c * o).sum(),
        None => 0.0,
    };
    let objective = problem.objective.evaluate(&walk.mean, &var) - charges;
    Ok(TreeEvaluation {
        mean: walk.mean,
        second: walk.second,
        var,
        overdraft: walk.overdraft,
        objective,
    })
}
