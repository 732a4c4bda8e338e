//! Exact backward induction for one risky entity.
//!
//! Each stage maximizes `Phi(x, y) = sum_j p_j G(e_j x + d_j y)` over
//! `y <= x` (and `y >= 0` with `nonneg`), where `G(z) = a z - b z^2 +
//! J_{t+1}(z)` is concave piecewise quadratic and `d_j` is the excess return
//! of atom `j`. For a fixed set of active pieces the optimal `y` is affine in
//! `x`, so the stage is solved by sweeping `x` across the finitely many
//! configurations, each valid on an interval cut out by affine inequalities.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProblemSpec, ScenarioAtom};
use crate::num::{self, compensated_sum};
use crate::policy::{AffinePiece, AffineRule, AllocationPolicy};
use crate::pwq::{AffineTerm, ArgmaxLocation, PiecewiseQuadratic, Quadratic};

/// Mean squared excess return below which the risky entity is treated as a
/// copy of the reference.
pub const DEGENERATE_TOL: f64 = 1e-12;

const MAX_SEGMENTS: usize = 100_000;

/// Closed-form data of a final stage with a riskless reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1DParams {
    pub a: f64,
    pub b: f64,
    pub r0: f64,
    /// E[e_1]
    pub p1: f64,
    /// E[e_1^2]
    pub p2: f64,
    /// `(return, probability)` of the risky entity; may be empty.
    pub atoms: Vec<(f64, f64)>,
}

impl Stage1DParams {
    pub fn new(a: f64, b: f64, r0: f64, p1: f64, p2: f64) -> Self {
        Stage1DParams {
            a,
            b,
            r0,
            p1,
            p2,
            atoms: Vec::new(),
        }
    }

    /// Reads `r0`, `p1`, `p2` from two-entity atoms whose reference return is constant.
    pub fn from_atoms(atoms: &[ScenarioAtom], a: f64, b: f64) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyAtomList { period: 0 });
        }
        if atoms.iter().any(|s| s.returns.len() != 2) {
            return Err(Error::InvalidInput("expected atoms with one risky entity".into()));
        }
        let r0 = atoms[0].reference();
        if atoms.iter().any(|s| s.reference() != r0) {
            return Err(Error::InvalidInput("reference return is not riskless".into()));
        }
        Ok(Stage1DParams {
            a,
            b,
            r0,
            p1: compensated_sum(atoms.iter().map(|s| s.prob * s.returns[1])),
            p2: compensated_sum(atoms.iter().map(|s| s.prob * s.returns[1] * s.returns[1])),
            atoms: atoms.iter().map(|s| (s.returns[1], s.prob)).collect(),
        })
    }

    /// `E[(e_1 - r0)^2] = p2 + r0^2 - 2 r0 p1`.
    pub fn denominator(&self) -> f64 {
        self.p2 + self.r0 * self.r0 - 2.0 * self.r0 * self.p1
    }

    /// Resource level below which the whole resource goes to the risky entity.
    pub fn threshold(&self) -> f64 {
        self.a * (self.p1 - self.r0) / (2.0 * self.b * (self.p2 - self.r0 * self.p1))
    }
}

/// Final-stage allocation `y = min(y*, x)` and its value `a mu - b nu`.
pub fn stage_t_allocation_1d(p: &Stage1DParams, x: f64) -> Result<(f64, f64)> {
    if p.b == 0.0 {
        return Err(Error::LinearStage);
    }
    let den = p.denominator();
    if den <= DEGENERATE_TOL {
        return Err(Error::DegenerateDenominator { period: 0, value: den });
    }
    let (r0, p1, p2) = (p.r0, p.p1, p.p2);
    let stationary = (p.a * (p1 - r0) + 2.0 * p.b * x * (r0 * r0 - r0 * p1)) / (2.0 * p.b * den);
    let y = stationary.min(x);
    let mu = y * p1 + r0 * (x - y);
    let nu = y * y * p2 + r0 * r0 * (x - y) * (x - y) + 2.0 * r0 * p1 * y * (x - y);
    Ok((y, p.a * mu - p.b * nu))
}

/// Optimal stage rule: all-in below `x_star`, affine pieces above.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Threshold1D {
    #[serde(with = "num::dec_opt")]
    pub x_star: Option<f64>,
    pub rule: AffineRule,
}

impl Threshold1D {
    pub fn allocate(&self, x: f64) -> f64 {
        self.rule.eval(x)[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution1D {
    pub policy: Vec<Threshold1D>,
    /// `values[t]` is the optimal value from stage `t` onward as a function of `x_t`.
    pub values: Vec<PiecewiseQuadratic>,
    pub nonneg: bool,
}

impl Solution1D {
    pub fn objective(&self, x0: f64) -> f64 {
        self.values[0].eval(x0)
    }
}

impl AllocationPolicy for Solution1D {
    fn horizon(&self) -> usize {
        self.policy.len()
    }

    fn n(&self) -> usize {
        1
    }

    fn allocate(&self, t: usize, x: f64) -> Result<Vec<f64>> {
        if self.nonneg && x < 0.0 {
            return Err(Error::InvalidInput(format!(
                "negative resource {x} leaves no nonnegative allocation"
            )));
        }
        Ok(vec![self.policy[t].allocate(x)])
    }

    fn affine_rules(&self) -> Option<Vec<AffineRule>> {
        Some(self.policy.iter().map(|p| p.rule.clone()).collect())
    }
}

/// Exact backward induction for `n = 1` with a separable objective.
pub fn backward_induct_1d(problem: &ProblemSpec, nonneg: bool) -> Result<Solution1D> {
    let (_, b) = separable_coefficients(problem)?;
    if b[problem.horizon - 1] == 0.0 {
        return Err(Error::LinearStage);
    }
    backward_induct_1d_unchecked(problem, nonneg)
}

/// As [`backward_induct_1d`], but a linear final stage is accepted as long as
/// every stage problem stays bounded.
pub(crate) fn backward_induct_1d_unchecked(problem: &ProblemSpec, nonneg: bool) -> Result<Solution1D> {
    let (a, b) = separable_coefficients(problem)?;
    if problem.n() != 1 {
        return Err(Error::InvalidInput(format!(
            "the one-dimensional solver needs n = 1, got n = {}",
            problem.n()
        )));
    }
    let horizon = problem.horizon;
    let mut atom_terms = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let atoms = problem.model.atoms(t)?;
        let terms = merge_atoms(atoms);
        let second = compensated_sum(terms.iter().map(|s| s.p * s.d * s.d));
        if second <= DEGENERATE_TOL {
            return Err(Error::DegenerateDenominator { period: t + 1, value: second });
        }
        atom_terms.push(terms);
    }

    let mut values = vec![PiecewiseQuadratic::zero(); horizon];
    let mut policy = Vec::with_capacity(horizon);
    let mut next = PiecewiseQuadratic::zero();
    for t in (0..horizon).rev() {
        let g = next.add_quadratic(&Quadratic::new(-b[t], a[t], 0.0));
        let stage = solve_stage(&g, &atom_terms[t], nonneg)?;
        values[t] = stage.value.clone();
        policy.push(Threshold1D {
            x_star: stage.x_star,
            rule: stage.rule,
        });
        next = stage.value;
    }
    policy.reverse();
    Ok(Solution1D {
        policy,
        values,
        nonneg,
    })
}

fn separable_coefficients(problem: &ProblemSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    match problem.objective.separable() {
        Some((a, b)) => Ok((a.to_vec(), b.to_vec())),
        None => Err(Error::InvalidInput(format!(
            "backward induction needs a separable objective, got {}",
            problem.objective.form_name()
        ))),
    }
}

/// One atom in `(probability, reference return, excess return)` form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Term {
    pub p: f64,
    pub e: f64,
    pub d: f64,
}

/// Collapses atoms with identical returns.
pub(crate) fn merge_atoms(atoms: &[ScenarioAtom]) -> Vec<Term> {
    let mut out: Vec<Term> = Vec::with_capacity(atoms.len());
    for s in atoms {
        let e = s.reference();
        let d = s.returns[1] - e;
        match out.iter_mut().find(|t| t.e == e && t.d == d) {
            Some(t) => t.p += s.prob,
            None => out.push(Term { p: s.prob, e, d }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Interior,
    Cap,
    Floor,
    /// Atom `atom` sits on the breakpoint `bp` of `G`.
    Pinned { atom: usize, bp: usize },
}

#[derive(Debug, Clone)]
struct Config {
    kind: Kind,
    /// Active piece of `G` for each atom.
    pieces: Vec<usize>,
    /// `y(x) = ay x + by`
    ay: f64,
    by: f64,
}

struct Segment {
    lo: f64,
    hi: f64,
    /// Validity interval of the configuration before widening to the probe.
    raw_lo: f64,
    raw_hi: f64,
    value: Quadratic,
    ay: f64,
    by: f64,
    kind: Kind,
}

struct StageSolution {
    value: PiecewiseQuadratic,
    rule: AffineRule,
    x_star: Option<f64>,
}

fn terms_at(terms: &[Term], x: f64) -> Vec<AffineTerm> {
    terms
        .iter()
        .map(|s| AffineTerm {
            weight: s.p,
            intercept: s.e * x,
            slope: s.d,
        })
        .collect()
}

fn config_at(g: &PiecewiseQuadratic, terms: &[Term], x: f64, nonneg: bool) -> Result<Config> {
    let phi = g.compose_sum(&terms_at(terms, x));
    let m = phi.maximize(nonneg.then_some(0.0), Some(x))?;
    let y0 = m.argmax;
    let nudge = 1e-9 * (1.0 + x.abs());
    let pieces_at = |y: f64| -> Vec<usize> {
        terms
            .iter()
            .map(|s| g.piece_index(s.e * x + s.d * y))
            .collect()
    };
    let config = match m.location {
        ArgmaxLocation::Upper => Config {
            kind: Kind::Cap,
            pieces: pieces_at(y0 - nudge),
            ay: 1.0,
            by: 0.0,
        },
        ArgmaxLocation::Lower => Config {
            kind: Kind::Floor,
            pieces: pieces_at(y0 + nudge),
            ay: 0.0,
            by: 0.0,
        },
        ArgmaxLocation::Interior(_) => {
            let pieces = pieces_at(y0);
            let mut num_x = 0.0;
            let mut num_c = 0.0;
            let mut den = 0.0;
            for (s, &k) in terms.iter().zip(&pieces) {
                let q = g.pieces()[k];
                num_x += s.p * s.d * q.q2 * s.e;
                num_c += s.p * s.d * q.q1;
                den += s.p * q.q2 * s.d * s.d;
            }
            Config {
                kind: Kind::Interior,
                pieces,
                ay: -num_x / den,
                by: -num_c / (2.0 * den),
            }
        }
        ArgmaxLocation::Breakpoint(_) => {
            let mut best: Option<(usize, usize, f64)> = None;
            for (j, s) in terms.iter().enumerate() {
                if s.d == 0.0 || g.breakpoints().is_empty() {
                    continue;
                }
                let z = s.e * x + s.d * y0;
                let bp = g.piece_index(z).min(g.breakpoints().len() - 1);
                for cand in [bp.saturating_sub(1), bp] {
                    let gap = (z - g.breakpoints()[cand]).abs() / (1.0 + z.abs());
                    if best.is_none_or(|(_, _, v)| gap < v) {
                        best = Some((j, cand, gap));
                    }
                }
            }
            let (atom, bp, _) = best.ok_or_else(|| {
                Error::InvalidInput("stage maximum on a kink with no atom at a breakpoint".into())
            })?;
            let s = terms[atom];
            let z = g.breakpoints()[bp];
            let mut pieces = pieces_at(y0);
            pieces[atom] = bp;
            Config {
                kind: Kind::Pinned { atom, bp },
                pieces,
                ay: -s.e / s.d,
                by: z / s.d,
            }
        }
    };
    Ok(config)
}

/// `z_j(x) = c_j x + f_j` under the configuration.
fn atom_paths(terms: &[Term], c: &Config) -> Vec<(f64, f64)> {
    terms
        .iter()
        .map(|s| (s.e + s.d * c.ay, s.d * c.by))
        .collect()
}

/// `d Phi / dy` along the configuration as `alpha x + beta`, with the
/// pinned atom (if any) using piece `pinned_piece`.
fn y_derivative(
    g: &PiecewiseQuadratic,
    terms: &[Term],
    c: &Config,
    paths: &[(f64, f64)],
    pinned_piece: Option<(usize, usize)>,
) -> (f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    for (j, (s, &(cj, fj))) in terms.iter().zip(paths).enumerate() {
        let k = match pinned_piece {
            Some((atom, k)) if atom == j => k,
            _ => c.pieces[j],
        };
        let q = g.pieces()[k];
        alpha += s.p * s.d * 2.0 * q.q2 * cj;
        beta += s.p * s.d * (2.0 * q.q2 * fj + q.q1);
    }
    (alpha, beta)
}

/// Interval of `x` on which the configuration stays optimal.
fn config_interval(
    g: &PiecewiseQuadratic,
    terms: &[Term],
    c: &Config,
    nonneg: bool,
) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut need = |alpha: f64, beta: f64| {
        // alpha x + beta >= 0
        if alpha > 0.0 {
            lo = lo.max(-beta / alpha);
        } else if alpha < 0.0 {
            hi = hi.min(-beta / alpha);
        }
    };
    let paths = atom_paths(terms, c);
    for (j, &(cj, fj)) in paths.iter().enumerate() {
        if matches!(c.kind, Kind::Pinned { atom, .. } if atom == j) {
            continue;
        }
        let (zlo, zhi) = g.interval(c.pieces[j]);
        if zlo.is_finite() {
            need(cj, fj - zlo);
        }
        if zhi.is_finite() {
            need(-cj, zhi - fj);
        }
    }
    if c.kind != Kind::Cap {
        need(1.0 - c.ay, -c.by);
    }
    if nonneg && c.kind != Kind::Floor {
        need(c.ay, c.by);
    }
    match c.kind {
        Kind::Interior => {}
        Kind::Cap => {
            let (al, be) = y_derivative(g, terms, c, &paths, None);
            need(al, be);
        }
        Kind::Floor => {
            let (al, be) = y_derivative(g, terms, c, &paths, None);
            need(-al, -be);
        }
        Kind::Pinned { atom, bp } => {
            // Moving y up moves the pinned argument by d: the left
            // y-derivative uses the piece on the far side of the kink.
            let d = terms[atom].d;
            let (below, above) = if d > 0.0 { (bp, bp + 1) } else { (bp + 1, bp) };
            let (al, be) = y_derivative(g, terms, c, &paths, Some((atom, below)));
            need(al, be);
            let (al, be) = y_derivative(g, terms, c, &paths, Some((atom, above)));
            need(-al, -be);
        }
    }
    if nonneg {
        lo = lo.max(0.0);
    }
    (lo, hi)
}

fn segment_at(g: &PiecewiseQuadratic, terms: &[Term], probe: f64, nonneg: bool) -> Result<Segment> {
    let c = config_at(g, terms, probe, nonneg)?;
    let (lo, hi) = config_interval(g, terms, &c, nonneg);
    let paths = atom_paths(terms, &c);
    let mut value = Quadratic::ZERO;
    for ((s, &(cj, fj)), &k) in terms.iter().zip(&paths).zip(&c.pieces) {
        value = value.add(&g.pieces()[k].compose_affine(fj, cj).scale(s.p));
    }
    Ok(Segment {
        lo: lo.min(probe),
        hi: hi.max(probe),
        raw_lo: lo,
        raw_hi: hi,
        value,
        ay: c.ay,
        by: c.by,
        kind: c.kind,
    })
}

fn step_size(x: f64) -> f64 {
    1e-7 * x.abs().max(1.0)
}

fn solve_stage(g: &PiecewiseQuadratic, terms: &[Term], nonneg: bool) -> Result<StageSolution> {
    let start = if nonneg { step_size(0.0) } else { 0.0 };
    let first = segment_at(g, terms, start, nonneg)?;
    // A segment narrower than a few probe steps may be an artefact of
    // widening a nearly degenerate configuration to contain its probe.
    let sliver = |s: &Segment| s.hi - s.lo <= 10.0 * step_size(s.hi.abs().max(s.lo.abs()));

    let mut right = vec![first];
    let mut cur = right[0].hi;
    while cur.is_finite() {
        if right.len() > MAX_SEGMENTS {
            return Err(sweep_failure(right.len()));
        }
        let mut eta = step_size(cur);
        let mut seg = segment_at(g, terms, cur + eta, nonneg)?;
        for _ in 0..4 {
            if seg.lo <= cur + 1e-9 * (1.0 + cur.abs()) {
                break;
            }
            eta *= 1e-2;
            seg = segment_at(g, terms, cur + eta, nonneg)?;
        }
        let mut b = cur;
        if seg.raw_lo < cur {
            // The new configuration starts earlier than the previous one
            // claimed to end: trust it and drop slivers it covers.
            b = seg.raw_lo;
            while right.len() > 1 && b <= right.last().unwrap().lo && sliver(right.last().unwrap()) {
                right.pop();
            }
            let prev = right.last_mut().unwrap();
            b = b.max(prev.lo);
            prev.hi = b;
        }
        seg.lo = b;
        cur = seg.hi;
        right.push(seg);
    }
    let first = right.remove(0);

    let floor = if nonneg { 0.0 } else { f64::NEG_INFINITY };
    let mut left = vec![first];
    let mut cur = left[0].lo;
    while cur > floor {
        if left.len() > MAX_SEGMENTS {
            return Err(sweep_failure(left.len()));
        }
        let mut eta = step_size(cur);
        if nonneg {
            eta = eta.min(0.5 * cur);
        }
        let mut seg = segment_at(g, terms, cur - eta, nonneg)?;
        for _ in 0..4 {
            if seg.hi >= cur - 1e-9 * (1.0 + cur.abs()) {
                break;
            }
            eta *= 1e-2;
            seg = segment_at(g, terms, cur - eta, nonneg)?;
        }
        let mut b = cur;
        if seg.raw_hi > cur {
            b = seg.raw_hi;
            while left.len() > 1 && b >= left.last().unwrap().hi && sliver(left.last().unwrap()) {
                left.pop();
            }
            let prev = left.last_mut().unwrap();
            b = b.min(prev.hi);
            prev.lo = b;
        }
        seg.hi = b;
        cur = seg.lo;
        left.push(seg);
        if nonneg && cur <= step_size(0.0) * 1e-3 {
            break;
        }
    }
    let first = left.remove(0);

    let x_star = match first.kind {
        Kind::Cap => Some(first.hi).filter(|v| v.is_finite()),
        _ => None,
    };

    let mut segments: Vec<Segment> = left.into_iter().rev().collect();
    segments.push(first);
    segments.extend(right);
    segments.retain(|s| s.hi > s.lo || s.lo.is_infinite() || s.hi.is_infinite());

    let mut bps = Vec::with_capacity(segments.len());
    let mut pieces = Vec::with_capacity(segments.len());
    let mut rule_pieces = Vec::with_capacity(segments.len());
    for (i, s) in segments.iter().enumerate() {
        if i > 0 {
            if s.lo <= *bps.last().unwrap_or(&f64::NEG_INFINITY) {
                continue;
            }
            bps.push(s.lo);
        }
        pieces.push(s.value);
        rule_pieces.push(AffinePiece::new(vec![s.by], vec![s.ay]));
    }
    let value = PiecewiseQuadratic::new(bps.clone(), pieces)?.simplified(1e-12);
    let rule = AffineRule::new(bps, rule_pieces)?.simplified();
    Ok(StageSolution {
        value,
        rule,
        x_star,
    })
}

fn sweep_failure(count: usize) -> Error {
    Error::NoConvergence {
        what: "one-dimensional stage sweep",
        iterations: count,
        residual: f64::NAN,
    }
}
