//! Dense primal active-set solver for small convex quadratic programs
//!
//! ```text
//! minimize    0.5 u'Hu - g'u
//! subject to  E u  = f
//!             A u <= b
//! ```
//!
//! The problems solved here have a handful of variables (one per entity),
//! so every iteration simply refactors the full KKT matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-10;

/// A linear row `coef' u (=|<=) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coef: DVector<f64>,
    pub rhs: f64,
}

impl Row {
    pub fn new(coef: DVector<f64>, rhs: f64) -> Self {
        Row { coef, rhs }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Multipliers of the equality rows, in input order.
    pub eq_multipliers: Vec<f64>,
    /// Multipliers of the inequality rows (zero when inactive), in input order.
    pub ineq_multipliers: Vec<f64>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_active(&self, i: usize) -> bool {
        self.ineq_multipliers[i] != 0.0
    }
}

/// Solves the KKT system, falling back to a least-squares solution when the
/// matrix is singular (redundant constraints or a flat direction in `H`).
fn solve_kkt(k: DMatrix<f64>, rhs: DVector<f64>) -> DVector<f64> {
    let scale = k.amax().max(1.0);
    if let Some(sol) = k.clone().lu().solve(&rhs) {
        let resid = (&k * &sol - &rhs).amax();
        if sol.iter().all(|v| v.is_finite()) && resid <= 1e-9 * scale * (1.0 + rhs.amax()) {
            return sol;
        }
    }
    let svd = k.svd(true, true);
    svd.solve(&rhs, 1e-13 * scale)
        .expect("SVD with both factors always solves")
}

/// Minimizes `0.5 u'Hu - g'u` from the feasible starting point `start`.
pub fn solve(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq: &[Row],
    ineq: &[Row],
    start: DVector<f64>,
) -> Result<QpSolution> {
    let n = g.len();
    let mut u = start;
    for r in eq {
        let v = r.coef.dot(&u) - r.rhs;
        if v.abs() > FEAS_TOL * (1.0 + r.rhs.abs()) * 1e3 {
            return Err(Error::InvalidInput(format!(
                "QP start violates an equality row by {v:e}"
            )));
        }
    }
    for r in ineq {
        let v = r.coef.dot(&u) - r.rhs;
        if v > FEAS_TOL * (1.0 + r.rhs.abs()) * 1e3 {
            return Err(Error::InvalidInput(format!(
                "QP start violates an inequality row by {v:e}"
            )));
        }
    }

    let mut working: Vec<usize> = (0..ineq.len())
        .filter(|&i| (ineq[i].coef.dot(&u) - ineq[i].rhs).abs() <= FEAS_TOL * (1.0 + ineq[i].rhs.abs()))
        .collect();
    // Never start with more active rows than the space can hold.
    working.truncate(n.saturating_sub(eq.len()));

    let max_iter = 50 * (n + ineq.len() + 1);
    for iter in 0..max_iter {
        let m = eq.len() + working.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(h);
        let rows: Vec<&DVector<f64>> = eq
            .iter()
            .map(|r| &r.coef)
            .chain(working.iter().map(|&i| &ineq[i].coef))
            .collect();
        for (j, c) in rows.iter().enumerate() {
            for i in 0..n {
                k[(i, n + j)] = c[i];
                k[(n + j, i)] = c[i];
            }
        }
        let grad = h * &u - g;
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&grad));
        let sol = solve_kkt(k, rhs);
        let p = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n, m).into_owned();

        let pscale = 1.0 + u.amax();
        if p.amax() <= 1e-12 * pscale {
            // Stationary on the working set: check inequality multipliers.
            let mut worst: Option<(usize, f64)> = None;
            for w in 0..working.len() {
                let l = lambda[eq.len() + w];
                if l < -1e-12 * (1.0 + grad.amax()) && worst.is_none_or(|(_, v)| l < v) {
                    worst = Some((w, l));
                }
            }
            match worst {
                Some((w, _)) => {
                    working.remove(w);
                }
                None => {
                    let mut ineq_mult = vec![0.0; ineq.len()];
                    for (w, &i) in working.iter().enumerate() {
                        ineq_mult[i] = lambda[eq.len() + w].max(0.0);
                    }
                    return Ok(QpSolution {
                        u,
                        eq_multipliers: lambda.rows(0, eq.len()).iter().copied().collect(),
                        ineq_multipliers: ineq_mult,
                        iterations: iter + 1,
                    });
                }
            }
            continue;
        }

        let mut step = 1.0;
        let mut blocking = None;
        for (i, r) in ineq.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let ap = r.coef.dot(&p);
            if ap > 1e-14 * (1.0 + r.coef.amax() * p.amax()) {
                let room = (r.rhs - r.coef.dot(&u)).max(0.0);
                let s = room / ap;
                if s < step {
                    step = s;
                    blocking = Some(i);
                }
            }
        }
        u += step * &p;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(Error::NoConvergence {
        what: "active-set QP",
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// Feasible point of `{1'u <= x}` (and `u >= 0` when `nonneg`), or `None`.
pub fn budget_start(n: usize, x: f64, nonneg: bool) -> Option<DVector<f64>> {
    if x >= 0.0 {
        Some(DVector::zeros(n))
    } else if nonneg {
        None
    } else {
        Some(DVector::from_element(n, x / n as f64))
    }
}

/// Inequality rows for `1'u <= x` followed by `-u_i <= 0` when `nonneg`.
pub fn budget_rows(n: usize, x: f64, nonneg: bool) -> Vec<Row> {
    let mut rows = vec![Row::new(DVector::from_element(n, 1.0), x)];
    if nonneg {
        for i in 0..n {
            let mut c = DVector::zeros(n);
            c[i] = -1.0;
            rows.push(Row::new(c, 0.0));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_vec(vec![2.0, 4.0]);
        let s = solve(&h, &g, &[], &[], DVector::zeros(2)).unwrap();
        assert!((s.u[0] - 1.0).abs() < 1e-12 && (s.u[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_binds_with_positive_multiplier() {
        // min (u1-1)^2 + (u2-1)^2 s.t. u1 + u2 <= 1  ->  u = (0.5, 0.5), lambda = 1
        let h = DMatrix::from_diagonal_element(2, 2, 2.0);
        let g = DVector::from_vec(vec![2.0, 2.0]);
        let rows = budget_rows(2, 1.0, false);
        let s = solve(&h, &g, &[], &rows, DVector::zeros(2)).unwrap();
        assert!((s.u[0] - 0.5).abs() < 1e-12 && (s.u[1] - 0.5).abs() < 1e-12);
        assert!((s.ineq_multipliers[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_constraints_release_and_bind() {
        // min (u1-2)^2 + (u2+1)^2 s.t. u1 + u2 <= 1, u >= 0  ->  (1, 0)
        let h = DMatrix::from_diagonal_element(2, 2, 2.0);
        let g = DVector::from_vec(vec![4.0, -2.0]);
        let rows = budget_rows(2, 1.0, true);
        let s = solve(&h, &g, &[], &rows, DVector::zeros(2)).unwrap();
        assert!((s.u[0] - 1.0).abs() < 1e-12 && s.u[1].abs() < 1e-12, "{:?}", s.u);
    }

    #[test]
    fn equality_row_is_respected() {
        let h = DMatrix::from_diagonal_element(2, 2, 2.0);
        let g = DVector::zeros(2);
        let eq = [Row::new(DVector::from_vec(vec![1.0, -1.0]), 2.0)];
        let s = solve(&h, &g, &eq, &[], DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert!((s.u[0] - 1.0).abs() < 1e-12 && (s.u[1] + 1.0).abs() < 1e-12);
        // grad + E' mu = 0  ->  (2, -2) + mu (1, -1) = 0
        assert!((s.eq_multipliers[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn redundant_constraints_do_not_break_the_solve() {
        let h = DMatrix::from_diagonal_element(2, 2, 2.0);
        let g = DVector::from_vec(vec![2.0, 2.0]);
        let rows = vec![
            Row::new(DVector::from_vec(vec![1.0, 1.0]), 1.0),
            Row::new(DVector::from_vec(vec![2.0, 2.0]), 2.0),
        ];
        let s = solve(&h, &g, &[], &rows, DVector::zeros(2)).unwrap();
        assert!((s.u.sum() - 1.0).abs() < 1e-10);
    }
}
