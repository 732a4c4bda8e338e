//! Backward induction for `n` risky entities.
//!
//! The final stage has a closed form: the stationary point
//! `u* = E[PP']^-1 (k E[P] - E[eP] x)` with `k = a / 2b`, corrected by a
//! multiplier on the budget row when `1'u* > x`. Earlier stages reuse the same
//! closed form with effective coefficients `(a_hat, b_hat)` obtained by
//! folding one quadratic piece of the next value function into the stage
//! objective ("recursion" mode), or are solved numerically node by node
//! against the exact scenario tree ("scenario-exact" mode, see [`crate::nodes`]).

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{MomentBlocks, PeriodMoments, ProblemSpec};
use crate::nodes::{self, GreedyStage, NdAtom};
use crate::num;
use crate::policy::{AffinePiece, AffinePolicy, AffineRule, AllocationPolicy};
use crate::pwq::{PiecewiseQuadratic, Quadratic};
use crate::qp;

/// How earlier stages see the value function of later ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Closed-form stages with one quadratic piece of the next value function.
    Recursion,
    /// Numerical stage maximization against the exact atom distribution.
    ScenarioExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NdOptions {
    pub mode: Mode,
    /// Use the literal coefficient formulas with the uniform multiplier shift.
    pub literal: bool,
    /// Forbid negative allocations.
    pub nonneg: bool,
}

impl Default for NdOptions {
    fn default() -> Self {
        NdOptions {
            mode: Mode::Recursion,
            literal: false,
            nonneg: false,
        }
    }
}

/// Budget regime of a stage: which piece of its value function is active.
pub const REGIME_FREE: u8 = 0;
pub const REGIME_BINDING: u8 = 1;
/// Only with a borrowing cost: the overdraft is priced at the marginal cost.
pub const REGIME_OVERDRAFT: u8 = 2;

/// Effective coefficients of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageCoefficients {
    /// Stage weights `a_t`, `b_t` as given.
    #[serde(with = "num::dec")]
    pub a: f64,
    #[serde(with = "num::dec")]
    pub b: f64,
    #[serde(with = "num::dec")]
    pub a_hat: f64,
    #[serde(with = "num::dec")]
    pub b_hat: f64,
    /// Constant contributed by all later stages.
    #[serde(with = "num::dec")]
    pub gamma_hat: f64,
    /// Regime of this stage's value function used by the previous stage.
    pub regime: u8,
}

impl StageCoefficients {
    /// Final-stage coefficients: nothing to fold in.
    pub fn terminal(a: f64, b: f64) -> Self {
        StageCoefficients {
            a,
            b,
            a_hat: a,
            b_hat: b,
            gamma_hat: 0.0,
            regime: REGIME_FREE,
        }
    }
}

fn check_curvature(b: f64, stage: usize) -> Result<()> {
    if b > 0.0 {
        Ok(())
    } else if b == 0.0 {
        Err(Error::LinearStage)
    } else {
        Err(Error::NonpositiveCurvature { stage, value: b })
    }
}

/// Stationary point of `E[a x_t - b x_t^2]` over `u`, ignoring the budget.
pub fn unconstrained_stage_alloc(m: &PeriodMoments, a: f64, b: f64, x: f64) -> Result<DVector<f64>> {
    check_curvature(b, 0)?;
    let blocks = m.blocks(0)?;
    let k = a / (2.0 * b);
    Ok(&blocks.minv_mp * k - &blocks.minv_mep * x)
}

/// Maximizer of `E[a x_t - b x_t^2]` subject to `1'u <= x`; the flag is
/// `true` when the budget binds.
pub fn constrained_stage_alloc(m: &PeriodMoments, a: f64, b: f64, x: f64) -> Result<(DVector<f64>, bool)> {
    check_curvature(b, 0)?;
    let rule = StageAllocationRule::new(m.blocks(0)?, a, b, None, false, false);
    let (u, regime) = rule.allocate(x)?;
    Ok((u, regime != REGIME_FREE))
}

/// Like [`constrained_stage_alloc`], but binding allocations are shifted by
/// the uniform multiplier `(1'E^-1 c - x) / n` on every entity.
pub fn constrained_stage_alloc_literal(
    m: &PeriodMoments,
    a: f64,
    b: f64,
    x: f64,
) -> Result<(DVector<f64>, bool)> {
    check_curvature(b, 0)?;
    let rule = StageAllocationRule::new(m.blocks(0)?, a, b, None, true, false);
    let (u, regime) = rule.allocate(x)?;
    Ok((u, regime != REGIME_FREE))
}

/// Multiplier applied to the budget row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetCorrection {
    /// `nu = (1'u* - x) / scale`, then `u = u* - nu * direction`.
    #[serde(with = "num::dec_vec")]
    pub direction: Vec<f64>,
    #[serde(with = "num::dec")]
    pub scale: f64,
    /// `1'u* - x = excess_intercept + excess_slope * x`
    #[serde(with = "num::dec")]
    pub excess_intercept: f64,
    #[serde(with = "num::dec")]
    pub excess_slope: f64,
    /// Resource level where the budget starts or stops binding.
    #[serde(with = "num::dec_opt")]
    pub threshold: Option<f64>,
    /// Largest multiplier (the per-unit borrowing cost over `2 b_hat`), if any.
    #[serde(with = "num::dec_opt")]
    pub cap: Option<f64>,
    /// Resource level where the multiplier reaches `cap`.
    #[serde(with = "num::dec_opt")]
    pub cap_threshold: Option<f64>,
    /// `false` when the stage ignores the budget altogether.
    pub active: bool,
}

/// Closed-form stage rule `u(x) = base + slope x - nu(x) direction`.
#[derive(Debug, Clone, Serialize)]
pub struct StageAllocationRule {
    #[serde(with = "num::dec")]
    pub a_hat: f64,
    #[serde(with = "num::dec")]
    pub b_hat: f64,
    /// `E[PP']^-1 E[P] a_hat / (2 b_hat)`
    #[serde(with = "num::dec_vec")]
    pub base: Vec<f64>,
    /// `-E[PP']^-1 E[eP]`
    #[serde(with = "num::dec_vec")]
    pub slope: Vec<f64>,
    pub correction: BudgetCorrection,
    pub literal: bool,
    pub nonneg: bool,
    #[serde(skip)]
    blocks: MomentBlocks,
}

impl StageAllocationRule {
    /// `cap` is the per-unit borrowing cost; `None` enforces the budget.
    pub fn new(
        blocks: MomentBlocks,
        a_hat: f64,
        b_hat: f64,
        cost: Option<f64>,
        literal: bool,
        nonneg: bool,
    ) -> Self {
        let n = blocks.n;
        let k = a_hat / (2.0 * b_hat);
        let base = &blocks.minv_mp * k;
        let slope = -&blocks.minv_mep;
        let (direction, scale) = if literal {
            (vec![1.0; n], n as f64)
        } else {
            (blocks.minv_one.iter().copied().collect(), blocks.s11)
        };
        let excess_intercept = k * blocks.s1p;
        let excess_slope = -(blocks.s1e + 1.0);
        let cap = cost.map(|c| c / (2.0 * b_hat));
        // With a literal borrowing cost the allocation has no budget term.
        let active = !(literal && cost.is_some());
        let level = |nu: f64| {
            (excess_slope != 0.0).then(|| (nu * scale - excess_intercept) / excess_slope)
        };
        StageAllocationRule {
            a_hat,
            b_hat,
            base: base.iter().copied().collect(),
            slope: slope.iter().copied().collect(),
            correction: BudgetCorrection {
                direction,
                scale,
                excess_intercept,
                excess_slope,
                threshold: level(0.0),
                cap,
                cap_threshold: cap.and_then(level),
                active,
            },
            literal,
            nonneg,
            blocks,
        }
    }

    pub fn n(&self) -> usize {
        self.base.len()
    }

    pub fn blocks(&self) -> &MomentBlocks {
        &self.blocks
    }

    fn excess(&self, x: f64) -> f64 {
        self.correction.excess_intercept + self.correction.excess_slope * x
    }

    /// Regime of the stage at resource level `x`.
    pub fn regime(&self, x: f64) -> u8 {
        if !self.correction.active {
            return if self.excess(x) > 0.0 { REGIME_BINDING } else { REGIME_FREE };
        }
        let nu = self.excess(x) / self.correction.scale;
        if nu <= 0.0 {
            REGIME_FREE
        } else if self.correction.cap.is_some_and(|c| nu >= c) {
            REGIME_OVERDRAFT
        } else {
            REGIME_BINDING
        }
    }

    /// Allocation and regime at resource level `x`.
    pub fn allocate(&self, x: f64) -> Result<(DVector<f64>, u8)> {
        if self.nonneg {
            return self.allocate_nonneg(x);
        }
        let mut u = DVector::from_iterator(
            self.n(),
            self.base.iter().zip(&self.slope).map(|(g, h)| g + h * x),
        );
        let regime = self.regime(x);
        if self.correction.active && regime != REGIME_FREE {
            let mut nu = self.excess(x) / self.correction.scale;
            if let Some(c) = self.correction.cap {
                nu = nu.min(c);
            }
            for (ui, di) in u.iter_mut().zip(&self.correction.direction) {
                *ui -= nu * di;
            }
        }
        Ok((u, regime))
    }

    fn allocate_nonneg(&self, x: f64) -> Result<(DVector<f64>, u8)> {
        let n = self.n();
        let start = qp::budget_start(n, x, true).ok_or_else(|| {
            Error::InvalidInput(format!("negative resource {x} leaves no nonnegative allocation"))
        })?;
        let bl = &self.blocks;
        let h = &bl.m * (2.0 * self.b_hat);
        let g = &bl.mp * self.a_hat - &bl.mep * (2.0 * self.b_hat * x);
        let sol = qp::solve(&h, &g, &[], &qp::budget_rows(n, x, true), start)?;
        let regime = if sol.is_active(0) { REGIME_BINDING } else { REGIME_FREE };
        Ok((sol.u, regime))
    }

    /// The rule as a piecewise-affine map (not available with `nonneg`).
    pub fn affine_rule(&self) -> Option<AffineRule> {
        if self.nonneg {
            return None;
        }
        let free = AffinePiece::new(self.base.clone(), self.slope.clone());
        let c = &self.correction;
        if !c.active || c.excess_slope == 0.0 {
            // The regime does not depend on x.
            let (u, _) = self.allocate(0.0).ok()?;
            let shift: Vec<f64> = u.iter().zip(&self.base).map(|(ui, b)| ui - b).collect();
            let piece = AffinePiece::new(
                self.base.iter().zip(&shift).map(|(b, s)| b + s).collect(),
                self.slope.clone(),
            );
            return Some(AffineRule::single(piece));
        }
        // nu(x) = (excess_intercept + excess_slope x) / scale
        let nu0 = c.excess_intercept / c.scale;
        let nu1 = c.excess_slope / c.scale;
        let binding = AffinePiece::new(
            self.base.iter().zip(&c.direction).map(|(b, d)| b - nu0 * d).collect(),
            self.slope.iter().zip(&c.direction).map(|(h, d)| h - nu1 * d).collect(),
        );
        let mut pieces = vec![(REGIME_FREE, free), (REGIME_BINDING, binding)];
        let mut bps = vec![c.threshold.unwrap()];
        if let (Some(cap), Some(xc)) = (c.cap, c.cap_threshold) {
            let capped = AffinePiece::new(
                self.base.iter().zip(&c.direction).map(|(b, d)| b - cap * d).collect(),
                self.slope.clone(),
            );
            pieces.push((REGIME_OVERDRAFT, capped));
            bps.push(xc);
        }
        if c.excess_slope < 0.0 {
            // nu decreases in x: regimes run overdraft, binding, free from left to right
            pieces.reverse();
            bps.reverse();
        }
        if bps.windows(2).any(|w| w[0] >= w[1]) {
            // Zero-width binding band (zero borrowing cost).
            pieces.retain(|(r, _)| *r != REGIME_BINDING);
            bps.truncate(1);
        }
        AffineRule::new(bps, pieces.into_iter().map(|(_, p)| p).collect())
            .ok()
            .map(AffineRule::simplified)
    }
}

/// Value pieces of the closed-form stage, in regime order (free, binding, overdraft).
fn regime_pieces(bl: &MomentBlocks, a: f64, b: f64, cap: Option<f64>) -> [Quadratic; 3] {
    let k = a / (2.0 * b);
    let w = bl.s1e + 1.0;
    let free = Quadratic::new(-b * (bl.me2 - bl.see), a * (bl.me - bl.spe), a * k / 2.0 * bl.spp);
    let binding = Quadratic::new(
        free.q2 - b * w * w / bl.s11,
        free.q1 + a * bl.s1p * w / bl.s11,
        a * k / 2.0 * (bl.spp - bl.s1p * bl.s1p / bl.s11),
    );
    // J_free - b (2 cap g - cap^2 S11) with g = k s1p - w x
    let overdraft = match cap {
        Some(c) => Quadratic::new(
            free.q2,
            free.q1 + 2.0 * b * c * w,
            free.q0 - 2.0 * b * c * k * bl.s1p + b * c * c * bl.s11,
        ),
        None => binding,
    };
    [free, binding, overdraft]
}

/// Literal value pieces: `(1 - factor A)` multiplies the cross terms and
/// `See` carries a factor two.
fn literal_pieces(bl: &MomentBlocks, a: f64, b: f64, factor: f64) -> [Quadratic; 2] {
    let piece = |am: f64| {
        let f = 1.0 - factor * am;
        Quadratic::new(
            -b * (bl.me2 - 2.0 * f * bl.see - am),
            a * (bl.me - f * bl.spe),
            f * a * a / (4.0 * b) * bl.spp,
        )
    };
    [piece(0.0), piece(1.0)]
}

/// Stage value as a function of `x`, plus the regime of each piece.
pub(crate) fn stage_value(rule: &StageAllocationRule, cost: Option<f64>) -> Result<(PiecewiseQuadratic, Vec<u8>)> {
    let bl = &rule.blocks;
    let (a, b) = (rule.a_hat, rule.b_hat);
    let c = &rule.correction;
    let regime_quads: Vec<Quadratic> = if rule.literal {
        let factor = cost.unwrap_or(1.0 / bl.n as f64);
        literal_pieces(bl, a, b, factor).to_vec()
    } else {
        regime_pieces(bl, a, b, c.cap).to_vec()
    };
    if c.excess_slope == 0.0 {
        let r = rule.regime(0.0);
        return Ok((PiecewiseQuadratic::from_quadratic(regime_quads[r as usize]), vec![r]));
    }
    let mut order = vec![(REGIME_FREE, None), (REGIME_BINDING, c.threshold)];
    if !rule.literal {
        if let Some(xc) = c.cap_threshold {
            order.push((REGIME_OVERDRAFT, Some(xc)));
        }
    }
    // `order` lists regimes by increasing multiplier; boundary `i` separates
    // regime `i - 1` from regime `i`.
    let mut regimes: Vec<u8> = order.iter().map(|(r, _)| *r).collect();
    let mut bps: Vec<f64> = order.iter().filter_map(|(_, x)| *x).collect();
    if c.excess_slope < 0.0 {
        regimes.reverse();
        bps.reverse();
    }
    if bps.windows(2).any(|w| w[0] >= w[1]) {
        regimes.retain(|r| *r != REGIME_BINDING);
        bps.truncate(1);
    }
    let pieces = regimes.iter().map(|r| regime_quads[*r as usize]).collect();
    Ok((PiecewiseQuadratic::new(bps, pieces)?, regimes))
}

/// Optimal final-stage value `J_T(x)` with the exact budget multiplier.
#[allow(non_snake_case)]
pub fn cost_to_go_T(m: &PeriodMoments, a: f64, b: f64) -> Result<PiecewiseQuadratic> {
    check_curvature(b, 0)?;
    let rule = StageAllocationRule::new(m.blocks(0)?, a, b, None, false, false);
    Ok(stage_value(&rule, None)?.0)
}

/// Coefficients of stage `t` from those of stage `t + 1`, whose value
/// function enters through its piece `next.regime`. `m` holds the moments
/// of period `t + 1`.
pub fn hat_recursion(
    next: &StageCoefficients,
    m: &PeriodMoments,
    a_t: f64,
    b_t: f64,
) -> Result<StageCoefficients> {
    hat_step(next, &m.blocks(0)?, a_t, b_t, None, false, 0)
}

/// Literal coefficient update, with `a_{t+1}`, `b_{t+1}` in place of
/// the effective coefficients and the `(1 - A/n)` factors.
pub fn hat_recursion_literal(
    next: &StageCoefficients,
    m: &PeriodMoments,
    a_t: f64,
    b_t: f64,
) -> Result<StageCoefficients> {
    hat_step(next, &m.blocks(0)?, a_t, b_t, None, true, 0)
}

pub(crate) fn hat_step(
    next: &StageCoefficients,
    bl: &MomentBlocks,
    a_t: f64,
    b_t: f64,
    cost: Option<f64>,
    literal: bool,
    stage: usize,
) -> Result<StageCoefficients> {
    check_curvature(next.b_hat, stage + 1)?;
    let (alpha, beta, gamma) = if literal {
        let am = next.regime.min(1) as f64;
        let f = 1.0 - cost.unwrap_or(1.0 / bl.n as f64) * am;
        (
            next.a * (bl.me - f * bl.spe),
            next.b * (bl.me2 - 2.0 * f * bl.see - am),
            f * next.a_hat * next.a_hat / (4.0 * next.b_hat) * bl.spp,
        )
    } else {
        let cap = cost.map(|c| c / (2.0 * next.b_hat));
        let q = regime_pieces(bl, next.a_hat, next.b_hat, cap)[next.regime as usize];
        (q.q1, -q.q2, q.q0)
    };
    let b_hat = b_t + beta;
    if b_hat <= 0.0 {
        return Err(Error::NonpositiveCurvature { stage, value: b_hat });
    }
    Ok(StageCoefficients {
        a: a_t,
        b: b_t,
        a_hat: a_t + alpha,
        b_hat,
        gamma_hat: next.gamma_hat + gamma,
        regime: REGIME_FREE,
    })
}

/// The classic policy that ignores the budget row: every stage plays the
/// stationary point `k E[PP']^-1 E[P] - x E[PP']^-1 E[eP]`, with effective
/// coefficients built from free pieces only.
pub fn unconstrained_policy(problem: &ProblemSpec, literal: bool) -> Result<(Vec<StageCoefficients>, AffinePolicy)> {
    let (a, b) = problem.objective.separable().ok_or_else(|| {
        Error::InvalidInput(format!(
            "backward induction needs a separable objective, got {}",
            problem.objective.form_name()
        ))
    })?;
    let horizon = problem.horizon;
    let blocks = (0..horizon)
        .map(|t| problem.model.moments(t).blocks(t + 1))
        .collect::<Result<Vec<_>>>()?;
    let mut coefs = vec![StageCoefficients::terminal(a[horizon - 1], b[horizon - 1]); horizon];
    for t in (0..horizon - 1).rev() {
        coefs[t] = hat_step(&coefs[t + 1], &blocks[t + 1], a[t], b[t], None, literal, t + 1)?;
    }
    let rules = coefs
        .iter()
        .zip(&blocks)
        .enumerate()
        .map(|(t, (c, bl))| {
            check_curvature(c.b_hat, t + 1)?;
            let k = c.a_hat / (2.0 * c.b_hat);
            let piece = AffinePiece::new(
                (&bl.minv_mp * k).iter().copied().collect(),
                (-&bl.minv_mep).iter().copied().collect(),
            );
            Ok(AffineRule::single(piece))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((coefs, AffinePolicy::new(rules)))
}

/// One stage of an n-dimensional solution.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum NdStage {
    ClosedForm(StageAllocationRule),
    Numerical(GreedyStage),
}

impl NdStage {
    pub fn allocate(&self, x: f64) -> Result<DVector<f64>> {
        match self {
            NdStage::ClosedForm(r) => r.allocate(x).map(|(u, _)| u),
            NdStage::Numerical(g) => g.allocate(x),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NdSolution {
    pub options: NdOptions,
    pub stages: Vec<NdStage>,
    /// `values[t]` is the value from stage `t` onward as a function of `x_t`.
    pub values: Vec<PiecewiseQuadratic>,
    /// Effective coefficients per stage (recursion mode only).
    pub coefficients: Vec<StageCoefficients>,
    /// Interpolation nodes used per stage (scenario-exact mode only).
    pub grid_nodes: Vec<usize>,
    /// Forward passes needed to settle the regime of each stage.
    pub localization_passes: usize,
    #[serde(skip)]
    n: usize,
}

impl NdSolution {
    pub fn objective(&self, x0: f64) -> f64 {
        self.values[0].eval(x0)
    }
}

impl AllocationPolicy for NdSolution {
    fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn n(&self) -> usize {
        self.n
    }

    fn allocate(&self, t: usize, x: f64) -> Result<Vec<f64>> {
        Ok(self.stages[t].allocate(x)?.iter().copied().collect())
    }

    fn affine_rules(&self) -> Option<Vec<AffineRule>> {
        self.stages
            .iter()
            .map(|s| match s {
                NdStage::ClosedForm(r) => r.affine_rule(),
                NdStage::Numerical(_) => None,
            })
            .collect()
    }
}

/// Backward induction for a separable objective. A `borrow_cost` on the
/// problem replaces the hard budget with a per-unit overdraft charge.
pub fn backward_induct_nd(problem: &ProblemSpec, options: NdOptions) -> Result<NdSolution> {
    let (a, b) = match problem.objective.separable() {
        Some((a, b)) => (a.to_vec(), b.to_vec()),
        None => {
            return Err(Error::InvalidInput(format!(
                "backward induction needs a separable objective, got {}",
                problem.objective.form_name()
            )))
        }
    };
    let horizon = problem.horizon;
    if b[horizon - 1] == 0.0 {
        return Err(Error::LinearStage);
    }
    let blocks = (0..horizon)
        .map(|t| problem.model.moments(t).blocks(t + 1))
        .collect::<Result<Vec<_>>>()?;
    match options.mode {
        Mode::Recursion => {
            if options.nonneg {
                return Err(Error::InvalidInput(
                    "nonnegative allocations need scenario-exact mode (or n = 1)".into(),
                ));
            }
            recursion(problem, &a, &b, blocks, options)
        }
        Mode::ScenarioExact => {
            if problem.borrow_cost.is_some() {
                return Err(Error::InvalidInput(
                    "borrowing costs are supported in recursion mode only".into(),
                ));
            }
            if options.literal {
                return Err(Error::InvalidInput(
                    "the literal formulas apply to recursion mode only".into(),
                ));
            }
            scenario_exact(problem, &a, &b, blocks, options)
        }
    }
}

fn recursion(
    problem: &ProblemSpec,
    a: &[f64],
    b: &[f64],
    blocks: Vec<MomentBlocks>,
    options: NdOptions,
) -> Result<NdSolution> {
    let horizon = problem.horizon;
    let cost = |t: usize| problem.borrow_cost.as_ref().map(|c| c[t]);
    // regimes[t]: piece of values[t] folded into stage t - 1
    let mut regimes = vec![REGIME_FREE; horizon];
    let mut passes = 0;
    loop {
        passes += 1;
        let mut coefs = vec![StageCoefficients::terminal(a[horizon - 1], b[horizon - 1]); horizon];
        coefs[horizon - 1].regime = regimes[horizon - 1];
        for t in (0..horizon - 1).rev() {
            let mut c = hat_step(
                &coefs[t + 1],
                &blocks[t + 1],
                a[t],
                b[t],
                cost(t + 1).map(|c1| if options.literal { cost(t).unwrap_or(c1) } else { c1 }),
                options.literal,
                t + 1,
            )?;
            c.regime = regimes[t];
            coefs[t] = c;
        }
        let rules: Vec<StageAllocationRule> = (0..horizon)
            .map(|t| {
                check_curvature(coefs[t].b_hat, t + 1)?;
                Ok(StageAllocationRule::new(
                    blocks[t].clone(),
                    coefs[t].a_hat,
                    coefs[t].b_hat,
                    cost(t),
                    options.literal,
                    false,
                ))
            })
            .collect::<Result<_>>()?;

        // Mean trajectory under the current rules decides the regimes.
        let mut x = problem.x0;
        let mut seen = Vec::with_capacity(horizon);
        for (t, rule) in rules.iter().enumerate() {
            let (u, r) = rule.allocate(x)?;
            seen.push(r);
            x = blocks[t].me * x + blocks[t].mp.dot(&u);
        }
        if seen == regimes || passes > horizon + 1 {
            let values = rules
                .iter()
                .zip(&coefs)
                .enumerate()
                .map(|(t, (rule, c))| {
                    let (v, _) = stage_value(rule, cost(t))?;
                    Ok(v.add_quadratic(&Quadratic::constant(c.gamma_hat)))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(NdSolution {
                options,
                stages: rules.into_iter().map(NdStage::ClosedForm).collect(),
                values,
                coefficients: coefs,
                grid_nodes: Vec::new(),
                localization_passes: passes,
                n: problem.n(),
            });
        }
        regimes = seen;
    }
}

/// Smallest and largest state fed to stages `1..T` over the whole scenario
/// tree, or `None` when the tree is too large to enumerate.
fn tree_state_range(problem: &ProblemSpec, policy: &NdSolution) -> Result<Option<(f64, f64)>> {
    const MAX_NODES: usize = 100_000;
    let horizon = problem.horizon;
    let mut level = vec![problem.x0];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in 0..horizon - 1 {
        let atoms = problem.model.atoms(t)?;
        if level.len() * atoms.len() > MAX_NODES {
            return Ok(None);
        }
        let mut next = Vec::with_capacity(level.len() * atoms.len());
        for &x in &level {
            let u = policy.stages[t].allocate(x)?;
            for atom in atoms {
                let z = atom.reference() * x + atom.excess().zip(u.iter()).map(|(p, ui)| p * ui).sum::<f64>();
                lo = lo.min(z);
                hi = hi.max(z);
                next.push(z);
            }
        }
        level = next;
    }
    Ok((lo <= hi).then_some((lo, hi)))
}

fn scenario_exact(
    problem: &ProblemSpec,
    a: &[f64],
    b: &[f64],
    blocks: Vec<MomentBlocks>,
    options: NdOptions,
) -> Result<NdSolution> {
    let horizon = problem.horizon;
    let mut atoms = Vec::with_capacity(horizon);
    for t in 0..horizon {
        atoms.push(NdAtom::from_atoms(problem.model.atoms(t)?));
    }
    let (mut lo, mut hi) = nodes::state_range(problem, options.nonneg)?;
    let widen = |lo: &mut f64, hi: &mut f64, range: (f64, f64)| {
        let pad = 0.25 * (range.1 - range.0).max(1e-3 * (1.0 + range.1.abs()));
        let mut changed = false;
        if range.0 < *lo {
            *lo = if options.nonneg { (range.0 - pad).max(0.0) } else { range.0 - pad };
            changed = true;
        }
        if range.1 > *hi {
            *hi = range.1 + pad;
            changed = true;
        }
        changed
    };
    if !options.nonneg && horizon > 1 {
        // States visited by the closed-form policy are a good first guess.
        if let Ok(rec) = recursion(problem, a, b, blocks.clone(), NdOptions { mode: Mode::Recursion, ..options }) {
            if let Some(r) = tree_state_range(problem, &rec)? {
                widen(&mut lo, &mut hi, r);
            }
        }
    }
    let mut attempt = 0;
    loop {
        let sol = scenario_exact_on(problem, a, b, &blocks, &atoms, options, lo, hi)?;
        attempt += 1;
        if horizon == 1 || attempt == 4 {
            return Ok(sol);
        }
        match tree_state_range(problem, &sol)? {
            Some(r) if widen(&mut lo, &mut hi, r) => continue,
            _ => return Ok(sol),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scenario_exact_on(
    problem: &ProblemSpec,
    a: &[f64],
    b: &[f64],
    blocks: &[MomentBlocks],
    atoms: &[Vec<NdAtom>],
    options: NdOptions,
    lo: f64,
    hi: f64,
) -> Result<NdSolution> {
    let horizon = problem.horizon;
    let n = problem.n();
    let mut values = vec![PiecewiseQuadratic::zero(); horizon];
    let mut stages = Vec::with_capacity(horizon);
    let mut grid_nodes = vec![0; horizon];
    let last = horizon - 1;
    if options.nonneg {
        let g = PiecewiseQuadratic::from_quadratic(Quadratic::new(-b[last], a[last], 0.0));
        let stage = GreedyStage::new(g, atoms[last].clone(), n, true);
        let (v, used) = stage.value_function(lo, hi, problem.x0, last + 1)?;
        values[last] = v;
        grid_nodes[last] = used;
        stages.push(NdStage::Numerical(stage));
    } else {
        let rule = StageAllocationRule::new(blocks[last].clone(), a[last], b[last], None, false, false);
        values[last] = stage_value(&rule, None)?.0;
        stages.push(NdStage::ClosedForm(rule));
    }
    for t in (0..last).rev() {
        let g = values[t + 1].add_quadratic(&Quadratic::new(-b[t], a[t], 0.0));
        let stage = GreedyStage::new(g, atoms[t].clone(), n, options.nonneg);
        let (v, used) = stage.value_function(lo, hi, problem.x0, t + 1)?;
        values[t] = v;
        grid_nodes[t] = used;
        stages.push(NdStage::Numerical(stage));
    }
    stages.reverse();
    Ok(NdSolution {
        options,
        stages,
        values,
        coefficients: Vec::new(),
        grid_nodes,
        localization_passes: 0,
        n,
    })
}
