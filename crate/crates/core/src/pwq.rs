//! Exact algebra for scalar piecewise-quadratic functions.
//!
//! Value functions are stored as a sorted list of breakpoints with one
//! quadratic per interval; the two outer intervals are unbounded. The
//! operations here are the ones backward induction needs: evaluate, take the
//! expectation of `f(c + s*y)` over finitely many affine arguments, and
//! maximize over a half-line or interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Dec;

/// Breakpoints closer than this (absolute plus relative) are merged.
pub const BREAKPOINT_TOL: f64 = 1e-9;

/// `q2 * x^2 + q1 * x + q0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quadratic {
    pub q2: f64,
    pub q1: f64,
    pub q0: f64,
}

impl Quadratic {
    pub const ZERO: Quadratic = Quadratic { q2: 0.0, q1: 0.0, q0: 0.0 };

    pub fn new(q2: f64, q1: f64, q0: f64) -> Self {
        Quadratic { q2, q1, q0 }
    }

    pub fn constant(c: f64) -> Self {
        Quadratic::new(0.0, 0.0, c)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.q2 * x + self.q1) * x + self.q0
    }

    pub fn deriv(&self, x: f64) -> f64 {
        2.0 * self.q2 * x + self.q1
    }

    pub fn add(&self, o: &Quadratic) -> Quadratic {
        Quadratic::new(self.q2 + o.q2, self.q1 + o.q1, self.q0 + o.q0)
    }

    pub fn scale(&self, w: f64) -> Quadratic {
        Quadratic::new(w * self.q2, w * self.q1, w * self.q0)
    }

    /// `y -> self(c + s*y)`.
    pub fn compose_affine(&self, c: f64, s: f64) -> Quadratic {
        Quadratic::new(
            self.q2 * s * s,
            (2.0 * self.q2 * c + self.q1) * s,
            self.eval(c),
        )
    }

    /// Maximizer over the real line, if the quadratic is strictly concave.
    pub fn stationary_point(&self) -> Option<f64> {
        (self.q2 < 0.0).then(|| -self.q1 / (2.0 * self.q2))
    }

    fn nearly_equal(&self, o: &Quadratic, at: f64, tol: f64) -> bool {
        let h = 1.0 + at.abs();
        let d = Quadratic::new(self.q2 - o.q2, self.q1 - o.q1, self.q0 - o.q0);
        let scale = 1.0 + self.eval(at).abs() + self.deriv(at).abs() * h + self.q2.abs() * h * h;
        [at - h, at, at + h]
            .iter()
            .all(|&x| d.eval(x).abs() <= tol * scale)
    }
}

/// One term `weight * f(intercept + slope * y)` of an expectation over atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTerm {
    pub weight: f64,
    pub intercept: f64,
    pub slope: f64,
}

/// Where a maximum was attained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgmaxLocation {
    /// Stationary point strictly inside piece `k`.
    Interior(usize),
    /// At breakpoint `k` (between pieces `k` and `k + 1`).
    Breakpoint(usize),
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Maximum {
    pub argmax: f64,
    pub value: f64,
    pub location: ArgmaxLocation,
}

/// Diagnostics of the concavity invariant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcavityReport {
    /// Largest positive leading coefficient (0 if none).
    pub max_convex_curvature: f64,
    /// Largest relative jump at a breakpoint.
    pub max_discontinuity: f64,
    /// Largest increase of the derivative across a breakpoint.
    pub max_slope_increase: f64,
}

impl ConcavityReport {
    pub fn is_concave(&self, tol: f64) -> bool {
        self.max_convex_curvature <= tol
            && self.max_discontinuity <= tol
            && self.max_slope_increase <= tol
    }

    pub fn worst(&self) -> f64 {
        self.max_convex_curvature
            .max(self.max_discontinuity)
            .max(self.max_slope_increase)
    }
}

/// Scalar piecewise-quadratic function on the real line.
///
/// `pieces[k]` is active on `(breakpoints[k-1], breakpoints[k]]` with the
/// implicit ends `-inf` and `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseQuadratic {
    breakpoints: Vec<f64>,
    pieces: Vec<Quadratic>,
}

impl PiecewiseQuadratic {
    pub fn new(breakpoints: Vec<f64>, pieces: Vec<Quadratic>) -> Result<Self> {
        if pieces.len() != breakpoints.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} pieces need {} breakpoints, got {}",
                pieces.len(),
                pieces.len().saturating_sub(1),
                breakpoints.len()
            )));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "breakpoints must be finite and strictly increasing".into(),
            ));
        }
        if pieces
            .iter()
            .any(|q| !(q.q2.is_finite() && q.q1.is_finite() && q.q0.is_finite()))
        {
            return Err(Error::InvalidInput("piece coefficients must be finite".into()));
        }
        Ok(PiecewiseQuadratic { breakpoints, pieces })
    }

    pub fn from_quadratic(q: Quadratic) -> Self {
        PiecewiseQuadratic {
            breakpoints: Vec::new(),
            pieces: vec![q],
        }
    }

    pub fn zero() -> Self {
        Self::from_quadratic(Quadratic::ZERO)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn pieces(&self) -> &[Quadratic] {
        &self.pieces
    }

    pub fn piece_count(&self) -> usize {
        self.pieces.len()
    }

    /// Index of the piece active at `x` (the left piece at a breakpoint).
    pub fn piece_index(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|b| *b < x)
    }

    /// Index of the piece active just to the right of `x`.
    pub fn piece_index_right(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|b| *b <= x)
    }

    /// Closed interval of piece `k`, with infinite ends.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        let lo = if k == 0 { f64::NEG_INFINITY } else { self.breakpoints[k - 1] };
        let hi = self.breakpoints.get(k).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.pieces[self.piece_index(x)].eval(x)
    }

    pub fn left_derivative(&self, x: f64) -> f64 {
        self.pieces[self.piece_index(x)].deriv(x)
    }

    pub fn right_derivative(&self, x: f64) -> f64 {
        self.pieces[self.piece_index_right(x)].deriv(x)
    }

    pub fn add_quadratic(&self, q: &Quadratic) -> Self {
        PiecewiseQuadratic {
            breakpoints: self.breakpoints.clone(),
            pieces: self.pieces.iter().map(|p| p.add(q)).collect(),
        }
    }

    pub fn concavity_report(&self) -> ConcavityReport {
        let mut r = ConcavityReport {
            max_convex_curvature: 0.0,
            max_discontinuity: 0.0,
            max_slope_increase: 0.0,
        };
        for p in &self.pieces {
            r.max_convex_curvature = r.max_convex_curvature.max(p.q2);
        }
        for (k, &b) in self.breakpoints.iter().enumerate() {
            let (l, rt) = (&self.pieces[k], &self.pieces[k + 1]);
            let scale = 1.0 + l.eval(b).abs();
            r.max_discontinuity = r.max_discontinuity.max((l.eval(b) - rt.eval(b)).abs() / scale);
            let dscale = 1.0 + l.deriv(b).abs();
            r.max_slope_increase = r.max_slope_increase.max((rt.deriv(b) - l.deriv(b)) / dscale);
        }
        r
    }

    /// Concavity with continuity within `1e-9` relative.
    pub fn is_concave(&self) -> bool {
        self.concavity_report().is_concave(1e-9)
    }

    /// Merges adjacent pieces whose quadratics agree within `tol`.
    pub fn simplified(&self, tol: f64) -> Self {
        let mut bps = Vec::with_capacity(self.breakpoints.len());
        let mut pieces = vec![self.pieces[0]];
        for (k, &b) in self.breakpoints.iter().enumerate() {
            let next = self.pieces[k + 1];
            let last = *pieces.last().unwrap();
            if last.nearly_equal(&next, b, tol) {
                continue;
            }
            bps.push(b);
            pieces.push(next);
        }
        PiecewiseQuadratic {
            breakpoints: bps,
            pieces,
        }
    }

    /// `y -> sum_j weight_j * f(intercept_j + slope_j * y)` as a piecewise
    /// quadratic in `y`. Terms with zero slope contribute a constant.
    pub fn compose_sum(&self, terms: &[AffineTerm]) -> Self {
        let mut constant = 0.0;
        let mut ybps: Vec<f64> = Vec::new();
        for t in terms {
            if t.slope == 0.0 {
                constant += t.weight * self.eval(t.intercept);
            } else {
                ybps.extend(self.breakpoints.iter().map(|b| (b - t.intercept) / t.slope));
            }
        }
        ybps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut merged: Vec<f64> = Vec::with_capacity(ybps.len());
        for y in ybps {
            match merged.last() {
                Some(&last) if y - last <= BREAKPOINT_TOL * (1.0 + y.abs()) => {}
                _ => merged.push(y),
            }
        }
        let samples: Vec<f64> = if merged.is_empty() {
            vec![0.0]
        } else {
            let mut s = Vec::with_capacity(merged.len() + 1);
            s.push(merged[0] - 1.0_f64.max(merged[0].abs()));
            for w in merged.windows(2) {
                s.push(0.5 * (w[0] + w[1]));
            }
            let last = *merged.last().unwrap();
            s.push(last + 1.0_f64.max(last.abs()));
            s
        };
        let pieces = samples
            .iter()
            .map(|&y| {
                let mut q = Quadratic::constant(constant);
                for t in terms.iter().filter(|t| t.slope != 0.0) {
                    let k = self.piece_index(t.intercept + t.slope * y);
                    q = q.add(&self.pieces[k].compose_affine(t.intercept, t.slope).scale(t.weight));
                }
                q
            })
            .collect();
        PiecewiseQuadratic {
            breakpoints: merged,
            pieces,
        }
        .simplified(1e-12)
    }

    /// `y -> E[f(r0 (x - y) + s y)]` for the atoms `(s_j, p_j)`.
    pub fn expect_affine(&self, atoms: &[(f64, f64)], x: f64, r0: f64) -> Self {
        let terms: Vec<AffineTerm> = atoms
            .iter()
            .map(|&(s, p)| AffineTerm {
                weight: p,
                intercept: r0 * x,
                slope: s - r0,
            })
            .collect();
        self.compose_sum(&terms)
    }

    /// Maximum over `[lower, upper]`; either bound may be absent.
    pub fn maximize(&self, lower: Option<f64>, upper: Option<f64>) -> Result<Maximum> {
        let lo_b = lower.unwrap_or(f64::NEG_INFINITY);
        let hi_b = upper.unwrap_or(f64::INFINITY);
        if lo_b > hi_b {
            return Err(Error::InvalidInput(format!(
                "empty feasible interval [{lo_b}, {hi_b}]"
            )));
        }
        let mut best: Option<Maximum> = None;
        for (k, q) in self.pieces.iter().enumerate() {
            let (plo, phi) = self.interval(k);
            let lo = plo.max(lo_b);
            let hi = phi.min(hi_b);
            if lo > hi {
                continue;
            }
            let cand = if q.q2 < 0.0 {
                (-q.q1 / (2.0 * q.q2)).clamp(lo, hi)
            } else {
                // Linear or convex on this interval: an endpoint wins.
                let lv = if lo.is_finite() { Some(q.eval(lo)) } else { None };
                let hv = if hi.is_finite() { Some(q.eval(hi)) } else { None };
                let up_unbounded = !hi.is_finite() && (q.q2 > 0.0 || q.q1 > 0.0);
                let down_unbounded = !lo.is_finite() && (q.q2 > 0.0 || q.q1 < 0.0);
                if up_unbounded || down_unbounded {
                    return Err(Error::UnboundedAbove);
                }
                match (lv, hv) {
                    (Some(a), Some(b)) => {
                        if b > a {
                            hi
                        } else {
                            lo
                        }
                    }
                    (Some(_), None) => lo,
                    (None, Some(_)) => hi,
                    (None, None) => 0.0,
                }
            };
            let value = q.eval(cand);
            if best.is_none_or(|b| value > b.value) {
                let location = if upper.is_some() && cand == hi_b {
                    ArgmaxLocation::Upper
                } else if lower.is_some() && cand == lo_b {
                    ArgmaxLocation::Lower
                } else if cand == phi {
                    ArgmaxLocation::Breakpoint(k)
                } else if cand == plo {
                    ArgmaxLocation::Breakpoint(k - 1)
                } else {
                    ArgmaxLocation::Interior(k)
                };
                best = Some(Maximum {
                    argmax: cand,
                    value,
                    location,
                });
            }
        }
        best.ok_or_else(|| Error::InvalidInput("no piece intersects the feasible interval".into()))
    }

    /// `(argmax, max)` over `(-inf, cap]`, or over `[0, cap]` when `nonneg`.
    pub fn maximize_up_to(&self, cap: f64, nonneg: bool) -> Result<(f64, f64)> {
        let m = self.maximize(nonneg.then_some(0.0), Some(cap))?;
        Ok((m.argmax, m.value))
    }
}

#[derive(Serialize, Deserialize)]
struct PwqJson {
    breakpoints: Vec<Dec>,
    pieces: Vec<[Dec; 3]>,
}

impl Serialize for PiecewiseQuadratic {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PwqJson {
            breakpoints: self.breakpoints.iter().map(|b| Dec(*b)).collect(),
            pieces: self
                .pieces
                .iter()
                .map(|q| [Dec(q.q2), Dec(q.q1), Dec(q.q0)])
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PiecewiseQuadratic {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = PwqJson::deserialize(d)?;
        PiecewiseQuadratic::new(
            j.breakpoints.into_iter().map(|b| b.0).collect(),
            j.pieces
                .into_iter()
                .map(|[a, b, c]| Quadratic::new(a.0, b.0, c.0))
                .collect(),
        )
        .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinked() -> PiecewiseQuadratic {
        // x for x <= 1, -x^2 + 2x beyond: continuous and C1 at 1.
        PiecewiseQuadratic::new(
            vec![1.0],
            vec![Quadratic::new(0.0, 1.0, 0.0), Quadratic::new(-1.0, 2.0, 0.0)],
        )
        .unwrap()
    }

    #[test]
    fn eval_single_piece_and_selection() {
        let f = PiecewiseQuadratic::from_quadratic(Quadratic::new(-1.0, 0.0, 0.0));
        assert_eq!(f.eval(3.0), -9.0);
        let g = kinked();
        assert_eq!(g.eval(2.0), 0.0);
        assert_eq!(g.eval(1.0), 1.0);
        assert_eq!(g.eval(-3.0), -3.0);
        assert!(g.is_concave());
    }

    #[test]
    fn constructor_rejects_bad_breakpoints() {
        let q = Quadratic::ZERO;
        assert!(PiecewiseQuadratic::new(vec![1.0, 1.0], vec![q, q, q]).is_err());
        assert!(PiecewiseQuadratic::new(vec![1.0], vec![q]).is_err());
        assert!(PiecewiseQuadratic::new(vec![f64::NAN], vec![q, q]).is_err());
    }

    #[test]
    fn expect_affine_degenerate_slope_is_constant() {
        let f = kinked();
        let g = f.expect_affine(&[(1.05, 1.0)], 3.0, 1.05);
        assert_eq!(g.piece_count(), 1);
        for y in [-5.0, 0.0, 2.0, 40.0] {
            assert_eq!(g.eval(y), f.eval(1.05 * 3.0));
        }
    }

    #[test]
    fn expect_affine_single_quadratic_expands() {
        let f = PiecewiseQuadratic::from_quadratic(Quadratic::new(-1.0, 0.0, 0.0));
        let (r0, x, s) = (1.05, 2.0, 1.3);
        let g = f.expect_affine(&[(s, 1.0)], x, r0);
        assert!(g.breakpoints().is_empty());
        for y in [-1.0, 0.5, 3.0] {
            let direct = -(r0 * x + (s - r0) * y).powi(2);
            assert!((g.eval(y) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn expect_affine_matches_grid_summation() {
        let f = kinked();
        let atoms = [(1.4, 0.5), (0.8, 0.5)];
        let (x, r0) = (1.5, 1.0);
        let g = f.expect_affine(&atoms, x, r0);
        assert!(g.breakpoints().len() <= 2);
        for i in 0..1000 {
            let y = -10.0 + 20.0 * i as f64 / 999.0;
            let direct: f64 = atoms.iter().map(|&(s, p)| p * f.eval(r0 * (x - y) + s * y)).sum();
            assert!((g.eval(y) - direct).abs() < 1e-9, "y = {y}");
        }
        assert!(g.is_concave());
    }

    #[test]
    fn maximize_interior_and_corner() {
        let g = PiecewiseQuadratic::from_quadratic(Quadratic::new(-1.0, 4.0, -4.0));
        assert_eq!(g.maximize_up_to(5.0, false).unwrap(), (2.0, 0.0));
        assert_eq!(g.maximize_up_to(1.0, false).unwrap(), (1.0, -1.0));
        let m = g.maximize(Some(3.0), Some(5.0)).unwrap();
        assert_eq!((m.argmax, m.location), (3.0, ArgmaxLocation::Lower));
    }

    #[test]
    fn maximize_unbounded_linear() {
        let g = PiecewiseQuadratic::from_quadratic(Quadratic::new(0.0, -1.0, 0.0));
        assert_eq!(g.maximize_up_to(5.0, false), Err(Error::UnboundedAbove));
        assert_eq!(g.maximize_up_to(5.0, true).unwrap(), (0.0, 0.0));
        let up = PiecewiseQuadratic::from_quadratic(Quadratic::new(0.0, 1.0, 0.0));
        assert_eq!(up.maximize(None, None), Err(Error::UnboundedAbove));
    }

    #[test]
    fn maximize_expectation_matches_grid_scan() {
        let f = kinked();
        let atoms = [(1.4, 0.5), (0.8, 0.5)];
        let (x, r0) = (1.5, 1.0);
        // stage reward keeps the problem strictly concave in y
        let g = f
            .expect_affine(&atoms, x, r0)
            .add_quadratic(&Quadratic::new(-0.05, 0.0, 0.0));
        let (ystar, vstar) = g.maximize_up_to(x, false).unwrap();
        let (lo, hi, n) = (-20.0, x, 10_000);
        let step = (hi - lo) / (n - 1) as f64;
        let (mut by, mut bv) = (lo, f64::NEG_INFINITY);
        for i in 0..n {
            let y = lo + step * i as f64;
            let v = g.eval(y);
            if v > bv {
                by = y;
                bv = v;
            }
        }
        assert!((ystar - by).abs() <= step, "{ystar} vs {by}");
        assert!(vstar >= bv - 1e-12);
    }

    #[test]
    fn simplify_merges_identical_neighbours() {
        let q = Quadratic::new(-1.0, 0.5, 2.0);
        let f = PiecewiseQuadratic::new(vec![-1.0, 0.0, 3.0], vec![q, q, Quadratic::new(-2.0, 3.5, -2.5), q]).unwrap();
        let s = f.simplified(1e-12);
        assert_eq!(s.breakpoints(), &[0.0, 3.0]);
        assert_eq!(s.piece_count(), 3);
    }

    #[test]
    fn json_shape() {
        let v = serde_json::to_value(kinked()).unwrap();
        assert_eq!(v["breakpoints"][0], "1.0000000000000000e0");
        assert_eq!(v["pieces"][1][0], "-1.0000000000000000e0");
        let back: PiecewiseQuadratic = serde_json::from_value(v).unwrap();
        assert_eq!(back, kinked());
    }

    fn concave_pwq() -> impl Strategy<Value = PiecewiseQuadratic> {
        // Build a concave C0 function by integrating a non-increasing slope.
        (
            prop::collection::vec(0.1f64..3.0, 0..4),
            prop::collection::vec(0.0f64..2.0, 5),
            prop::collection::vec(0.0f64..1.0, 5),
            -2.0f64..2.0,
        )
            .prop_map(|(gaps, drops, curv, slope0)| {
                let mut bps = Vec::new();
                let mut acc = -2.0;
                for g in &gaps {
                    acc += g;
                    bps.push(acc);
                }
                let mut pieces = Vec::new();
                let mut q = Quadratic::new(-curv[0], slope0, 1.0);
                pieces.push(q);
                for (k, &b) in bps.iter().enumerate() {
                    let v = q.eval(b);
                    let d = q.deriv(b) - drops[k];
                    let c = -curv[k + 1];
                    let q1 = d - 2.0 * c * b;
                    let q0 = v - c * b * b - q1 * b;
                    q = Quadratic::new(c, q1, q0);
                    pieces.push(q);
                }
                PiecewiseQuadratic::new(bps, pieces).unwrap()
            })
    }

    proptest! {
        #[test]
        fn expectation_preserves_concavity(
            f in concave_pwq(),
            atoms in prop::collection::vec((0.5f64..1.6, 0.1f64..1.0), 1..4),
            x in 0.0f64..5.0,
        ) {
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            let atoms: Vec<(f64, f64)> = atoms.iter().map(|&(s, p)| (s, p / total)).collect();
            let g = f.expect_affine(&atoms, x, 1.02);
            let r = g.concavity_report();
            prop_assert!(r.is_concave(1e-8), "{:?}", r);
            for i in 0..50 {
                let y = -4.0 + 0.2 * i as f64;
                let direct: f64 = atoms.iter().map(|&(s, p)| p * f.eval(1.02 * (x - y) + s * y)).sum();
                prop_assert!((g.eval(y) - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
            }
        }

        #[test]
        fn value_of_capped_max_is_concave(f in concave_pwq()) {
            // h(x) = max_{y <= x} E f(x + (s - 1) y) - 0.2 y^2
            let g = f;
            let atoms = [(1.3, 0.5), (0.9, 0.5)];
            let stage = Quadratic::new(-0.2, 0.0, 0.0);
            let h = |x: f64| -> f64 {
                g.expect_affine(&atoms, x, 1.0).add_quadratic(&stage).maximize_up_to(x, false).unwrap().1
            };
            let xs: Vec<f64> = (0..30).map(|i| -1.0 + 0.1 * i as f64).collect();
            let vs: Vec<f64> = xs.iter().map(|&x| h(x)).collect();
            for w in vs.windows(3) {
                prop_assert!(w[0] + w[2] - 2.0 * w[1] <= 1e-9 * (1.0 + w[1].abs()));
            }
        }
    }
}
