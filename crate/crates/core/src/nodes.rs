//! Stage maximization against the exact scenario distribution.
//!
//! For a continuation `G` (piecewise quadratic, concave) and resource `x`,
//! a node solve finds
//!
//! ```text
//! max_u  sum_j p_j G(e_j x + P_j'u)   s.t.  1'u <= x  (and u >= 0)
//! ```
//!
//! Each iteration fixes the quadratic piece used for every atom, solves the
//! resulting QP (atoms sitting exactly on a kink of `G` are pinned there by an
//! equality row), and then maximizes the true objective exactly along the
//! step. A pin is released towards the side indicated by its multiplier.
//! The stage value function is interpolated from node solves by a concave
//! piecewise-quadratic Hermite fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProblemSpec, ScenarioAtom};
use crate::pwq::{PiecewiseQuadratic, Quadratic};
use crate::qp::{self, Row};

const MAX_ITER: usize = 300;
const PIN_TOL: f64 = 1e-10;
const INITIAL_NODES: usize = 256;
const MAX_NODES: usize = 2048;
const FIT_TOL: f64 = 1e-9;
const CONCAVITY_TOL: f64 = 1e-6;
const CHUNK: usize = 16;

/// One atom in excess-return form.
#[derive(Debug, Clone, PartialEq)]
pub struct NdAtom {
    pub prob: f64,
    pub reference: f64,
    pub excess: DVector<f64>,
}

impl NdAtom {
    pub fn from_atoms(atoms: &[ScenarioAtom]) -> Vec<NdAtom> {
        atoms
            .iter()
            .map(|a| NdAtom {
                prob: a.prob,
                reference: a.reference(),
                excess: DVector::from_iterator(a.returns.len() - 1, a.excess()),
            })
            .collect()
    }
}

/// Result of one node solve.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSolution {
    pub u: DVector<f64>,
    pub value: f64,
    /// Derivative of the optimal value with respect to `x`.
    pub derivative: f64,
    pub iterations: usize,
}

/// A stage whose allocation re-solves the node problem at every query.
#[derive(Debug, Clone, Serialize)]
pub struct GreedyStage {
    pub n: usize,
    pub nonneg: bool,
    pub continuation_pieces: usize,
    #[serde(skip)]
    g: PiecewiseQuadratic,
    #[serde(skip)]
    atoms: Vec<NdAtom>,
}

/// Smallest interval containing every reachable state under moderate
/// leverage, used as the interpolation domain.
pub fn state_range(problem: &ProblemSpec, nonneg: bool) -> Result<(f64, f64)> {
    let x0 = problem.x0;
    if nonneg && x0 < 0.0 {
        return Err(Error::InvalidInput(
            "nonnegative allocations need a nonnegative initial resource".into(),
        ));
    }
    let mut rmin = f64::INFINITY;
    let mut rmax = f64::NEG_INFINITY;
    for t in 0..problem.horizon {
        for a in problem.model.atoms(t)? {
            for r in &a.returns {
                rmin = rmin.min(*r);
                rmax = rmax.max(*r);
            }
        }
    }
    let h = problem.horizon as i32;
    let cands = [0.0, x0, x0 * rmin.powi(h), x0 * rmax.powi(h)];
    let mut lo = cands.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = cands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.1 * (hi - lo).max(1.0);
    hi += pad;
    lo = if nonneg { 0.0 } else { lo - pad };
    Ok((lo, hi))
}

fn chebyshev_nodes(lo: f64, hi: f64, count: usize, extra: f64) -> Vec<f64> {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut xs: Vec<f64> = (0..count)
        .map(|i| {
            let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * count) as f64;
            mid - half * theta.cos()
        })
        .collect();
    xs.extend([lo, hi, extra]);
    sorted_unique(xs)
}

fn sorted_unique(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * (1.0 + a.abs()));
    xs
}

/// Adds `v` to the orthonormal `basis` if it is independent of it.
fn extend_basis(basis: &mut Vec<DVector<f64>>, v: &DVector<f64>) -> bool {
    let norm = v.norm();
    if norm == 0.0 {
        return false;
    }
    let mut r = v.clone();
    for q in basis.iter() {
        r -= q * q.dot(&r);
    }
    let rn = r.norm();
    if rn <= 1e-9 * norm {
        return false;
    }
    basis.push(r / rn);
    true
}

/// Moves a neighbouring solution into the feasible set at `x`.
fn repair(mut u: DVector<f64>, x: f64, nonneg: bool) -> Option<DVector<f64>> {
    let n = u.len();
    let s = u.sum();
    if s <= x {
        return Some(u);
    }
    if nonneg {
        if x < 0.0 {
            return None;
        }
        if s > 0.0 {
            u *= x / s;
        }
        return Some(u);
    }
    u.add_scalar_mut((x - s) / n as f64);
    Some(u)
}

impl GreedyStage {
    pub fn new(g: PiecewiseQuadratic, atoms: Vec<NdAtom>, n: usize, nonneg: bool) -> Self {
        GreedyStage {
            n,
            nonneg,
            continuation_pieces: g.piece_count(),
            g,
            atoms,
        }
    }

    pub fn continuation(&self) -> &PiecewiseQuadratic {
        &self.g
    }

    pub fn allocate(&self, x: f64) -> Result<DVector<f64>> {
        Ok(self.solve_at(x, None)?.u)
    }

    fn objective(&self, z: &[f64]) -> f64 {
        self.atoms.iter().zip(z).map(|(a, z)| a.prob * self.g.eval(*z)).sum()
    }

    fn states(&self, x: f64, u: &DVector<f64>) -> Vec<f64> {
        self.atoms.iter().map(|a| a.reference * x + a.excess.dot(u)).collect()
    }

    /// Exact maximum of `tau -> sum_j p_j G(z_j + tau s_j)` over `[0, 1]`.
    fn line_maximize(&self, z: &[f64], s: &[f64]) -> (f64, f64) {
        let bps = self.g.breakpoints();
        let mut taus = vec![0.0, 1.0];
        for (zj, sj) in z.iter().zip(s) {
            if *sj == 0.0 {
                continue;
            }
            let (a, b) = if *sj > 0.0 { (*zj, zj + sj) } else { (zj + sj, *zj) };
            let i0 = bps.partition_point(|p| *p <= a);
            let i1 = bps.partition_point(|p| *p < b);
            taus.extend(bps[i0..i1.max(i0)].iter().map(|p| (p - zj) / sj));
        }
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        taus.dedup();
        let mut best = (0.0, self.objective(z));
        for w in taus.windows(2) {
            let (ta, tb) = (w[0].clamp(0.0, 1.0), w[1].clamp(0.0, 1.0));
            if tb <= ta {
                continue;
            }
            let tm = 0.5 * (ta + tb);
            let mut q = Quadratic::ZERO;
            for ((a, zj), sj) in self.atoms.iter().zip(z).zip(s) {
                let k = self.g.piece_index(zj + tm * sj);
                q = q.add(&self.g.pieces()[k].compose_affine(*zj, *sj).scale(a.prob));
            }
            let t = if q.q2 < 0.0 {
                (-q.q1 / (2.0 * q.q2)).clamp(ta, tb)
            } else if q.eval(tb) > q.eval(ta) {
                tb
            } else {
                ta
            };
            // Evaluate on the true function so rounding at kinks cannot inflate the value.
            let zt: Vec<f64> = z.iter().zip(s).map(|(zj, sj)| zj + t * sj).collect();
            let v = self.objective(&zt);
            if v > best.1 {
                best = (t, v);
            }
        }
        best
    }

    /// Solves the node problem at `x`, warm-started from `warm` when given.
    pub fn solve_at(&self, x: f64, warm: Option<&DVector<f64>>) -> Result<NodeSolution> {
        let n = self.n;
        let cold = qp::budget_start(n, x, self.nonneg).ok_or_else(|| {
            Error::InvalidInput(format!("negative resource {x} leaves no nonnegative allocation"))
        })?;
        let mut u = warm
            .and_then(|w| repair(w.clone(), x, self.nonneg))
            .unwrap_or(cold);
        let ineq = qp::budget_rows(n, x, self.nonneg);
        let bps = self.g.breakpoints();
        let pieces = self.g.pieces();
        let jn = self.atoms.len();
        let mut forced: Vec<Option<usize>> = vec![None; jn];
        let mut z = self.states(x, &u);
        let mut f = self.objective(&z);

        for iter in 0..MAX_ITER {
            // Piece per atom, pinning atoms that sit on a kink.
            let mut piece = vec![0usize; jn];
            let mut pins: Vec<(usize, usize)> = Vec::new();
            let mut basis = Vec::new();
            for j in 0..jn {
                if let Some(k) = forced[j] {
                    piece[j] = k;
                    continue;
                }
                piece[j] = self.g.piece_index(z[j]);
                let m = bps.partition_point(|b| *b < z[j]);
                let near = [m.checked_sub(1), (m < bps.len()).then_some(m)]
                    .into_iter()
                    .flatten()
                    .min_by(|a, b| (bps[*a] - z[j]).abs().partial_cmp(&(bps[*b] - z[j]).abs()).unwrap());
                if let Some(m) = near {
                    if (z[j] - bps[m]).abs() <= PIN_TOL * (1.0 + bps[m].abs())
                        && pins.len() < n
                        && extend_basis(&mut basis, &self.atoms[j].excess)
                    {
                        pins.push((j, m));
                        piece[j] = m;
                    }
                }
            }

            let mut h = DMatrix::zeros(n, n);
            let mut gv = DVector::zeros(n);
            for (j, a) in self.atoms.iter().enumerate() {
                let q = pieces[piece[j]];
                let c = a.reference * x;
                h -= &a.excess * a.excess.transpose() * (2.0 * a.prob * q.q2);
                gv += &a.excess * (a.prob * (2.0 * q.q2 * c + q.q1));
            }
            let rho = 1e-9 * (1.0 + h.diagonal().amax());
            for i in 0..n {
                h[(i, i)] += rho;
            }
            gv += &u * rho;
            let eq: Vec<Row> = pins
                .iter()
                .map(|&(j, m)| {
                    let a = &self.atoms[j];
                    Row::new(a.excess.clone(), bps[m] - a.reference * x)
                })
                .collect();
            let sol = qp::solve(&h, &gv, &eq, &ineq, u.clone())?;
            let d = &sol.u - &u;

            if d.amax() > 1e-13 * (1.0 + u.amax()) {
                let s: Vec<f64> = self.atoms.iter().map(|a| a.excess.dot(&d)).collect();
                let (tau, v) = self.line_maximize(&z, &s);
                if tau > 0.0 && v > f + 1e-15 * (1.0 + f.abs()) {
                    u += d * tau;
                    z = self.states(x, &u);
                    f = self.objective(&z);
                    forced.iter_mut().for_each(|k| *k = None);
                    continue;
                }
            }

            // No ascent left for this piece assignment: check the pins.
            let mut worst: Option<(usize, usize, f64)> = None;
            for (i, &(j, m)) in pins.iter().enumerate() {
                let mu = sol.eq_multipliers[i];
                let b = bps[m];
                let jump = self.atoms[j].prob * (pieces[m].deriv(b) - pieces[m + 1].deriv(b));
                let tol = 1e-10 * (1.0 + jump.abs() + mu.abs());
                if mu < -tol && worst.is_none_or(|w| -mu > w.2) {
                    worst = Some((j, m, -mu));
                } else if mu > jump + tol && worst.is_none_or(|w| mu - jump > w.2) {
                    worst = Some((j, m + 1, mu - jump));
                }
            }
            if let Some((j, k, _)) = worst {
                if forced[j].is_none() {
                    forced[j] = Some(k);
                    continue;
                }
            }

            let mut derivative = sol.ineq_multipliers[0];
            for (j, a) in self.atoms.iter().enumerate() {
                derivative += a.prob * a.reference * pieces[piece[j]].deriv(z[j]);
            }
            for (i, &(j, _)) in pins.iter().enumerate() {
                derivative -= sol.eq_multipliers[i] * self.atoms[j].reference;
            }
            return Ok(NodeSolution {
                u,
                value: f,
                derivative,
                iterations: iter + 1,
            });
        }
        Err(Error::NoConvergence {
            what: "scenario node solve",
            iterations: MAX_ITER,
            residual: f64::NAN,
        })
    }

    fn solve_nodes(&self, xs: &[f64]) -> Result<Vec<NodeSolution>> {
        let chunks: Vec<Result<Vec<NodeSolution>>> = xs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut out: Vec<NodeSolution> = Vec::with_capacity(chunk.len());
                for &x in chunk {
                    let s = self.solve_at(x, out.last().map(|p| &p.u))?;
                    out.push(s);
                }
                Ok(out)
            })
            .collect();
        let mut all = Vec::with_capacity(xs.len());
        for c in chunks {
            all.extend(c?);
        }
        Ok(all)
    }

    /// Interpolated optimal value on `[lo, hi]` (extended linearly-quadratically
    /// beyond) and the number of nodes used.
    pub fn value_function(&self, lo: f64, hi: f64, x0: f64, stage: usize) -> Result<(PiecewiseQuadratic, usize)> {
        let mut xs = chebyshev_nodes(lo, hi, INITIAL_NODES, x0);
        let mut sols = self.solve_nodes(&xs)?;
        loop {
            let fs: Vec<f64> = sols.iter().map(|s| s.value).collect();
            let ds: Vec<f64> = sols.iter().map(|s| s.derivative).collect();
            let violation = secant_violation(&xs, &fs);
            let fit = concave_fit(&xs, &fs, &ds)?;
            if xs.len() >= MAX_NODES {
                if violation > CONCAVITY_TOL {
                    return Err(Error::GridTooCoarse { stage, violation });
                }
                return Ok((fit, xs.len()));
            }
            let mids: Vec<f64> = xs.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            let mid_sols = self.solve_nodes(&mids)?;
            let err = mids
                .iter()
                .zip(&mid_sols)
                .map(|(m, s)| (fit.eval(*m) - s.value).abs() / (1.0 + s.value.abs()))
                .fold(0.0, f64::max);
            let mut merged: Vec<(f64, NodeSolution)> =
                xs.into_iter().zip(sols).chain(mids.into_iter().zip(mid_sols)).collect();
            merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            (xs, sols) = merged.into_iter().unzip();
            if err <= FIT_TOL && violation <= FIT_TOL {
                let fs: Vec<f64> = sols.iter().map(|s| s.value).collect();
                let ds: Vec<f64> = sols.iter().map(|s| s.derivative).collect();
                return Ok((concave_fit(&xs, &fs, &ds)?, xs.len()));
            }
        }
    }
}

/// Largest relative increase between consecutive secant slopes.
pub fn secant_violation(xs: &[f64], fs: &[f64]) -> f64 {
    let sec: Vec<f64> = (0..xs.len() - 1)
        .map(|i| (fs[i + 1] - fs[i]) / (xs[i + 1] - xs[i]))
        .collect();
    sec.windows(2)
        .map(|w| (w[1] - w[0]) / (1.0 + w[0].abs().max(w[1].abs())))
        .fold(0.0, f64::max)
}

/// Piecewise-quadratic interpolant through `(xs, fs)` with node slopes `ds`,
/// concave whenever the data are. Each interval carries
/// `f_i + m (x - x_i) + c (x - x_i)(x - x_{i+1})` with the secant `m` and the
/// largest `c <= 0` compatible with both end slopes.
pub fn concave_fit(xs: &[f64], fs: &[f64], ds: &[f64]) -> Result<PiecewiseQuadratic> {
    let k = xs.len();
    if k < 2 {
        return Err(Error::InvalidInput("a fit needs at least two nodes".into()));
    }
    let sec: Vec<f64> = (0..k - 1).map(|i| (fs[i + 1] - fs[i]) / (xs[i + 1] - xs[i])).collect();
    let slope: Vec<f64> = (0..k)
        .map(|i| {
            let right = sec.get(i).copied();
            let left = i.checked_sub(1).map(|j| sec[j]);
            match (left, right) {
                (Some(l), Some(r)) => ds[i].clamp(l.min(r), l.max(r)),
                (None, Some(r)) => ds[i].max(r),
                (Some(l), None) => ds[i].min(l),
                (None, None) => unreachable!(),
            }
        })
        .collect();
    let pieces = (0..k - 1)
        .map(|i| {
            let (x1, x2) = (xs[i], xs[i + 1]);
            let h = x2 - x1;
            let m = sec[i];
            let c = ((slope[i + 1] - m) / h).max((m - slope[i]) / h).min(0.0);
            Quadratic::new(c, m - c * (x1 + x2), fs[i] - m * x1 + c * x1 * x2)
        })
        .collect();
    PiecewiseQuadratic::new(xs[1..k - 1].to_vec(), pieces)
}
