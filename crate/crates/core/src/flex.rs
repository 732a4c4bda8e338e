//! Overdraft at a per-unit cost instead of a hard budget.
//!
//! The stage objective becomes `E[a x_t - b x_t^2] - c [1'u - x]^+`, which is
//! concave in `u`. Its maximizer is `u = E[PP']^-1 (c_vec - nu 1)` where the
//! budget multiplier `nu` of the hard problem is clipped to `[0, c / 2b]`:
//! below zero the budget is slack, above `c / 2b` borrowing is cheaper than
//! cutting back.

use nalgebra::DVector;
use serde::Serialize;

use crate::dpnd::{self, Mode, NdOptions, NdSolution, StageAllocationRule, StageCoefficients};
use crate::error::{Error, Result};
use crate::model::{PeriodMoments, ProblemSpec};
use crate::num;
use crate::pwq::PiecewiseQuadratic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlexCoefficients {
    #[serde(with = "num::dec")]
    pub a: f64,
    #[serde(with = "num::dec")]
    pub b: f64,
    #[serde(with = "num::dec")]
    pub a_tilde: f64,
    #[serde(with = "num::dec")]
    pub b_tilde: f64,
    #[serde(with = "num::dec")]
    pub gamma_tilde: f64,
    /// Per-unit overdraft cost of this stage.
    #[serde(with = "num::dec")]
    pub c_tilde: f64,
    /// Regime of this stage's value function seen by the previous stage.
    pub regime: u8,
}

impl FlexCoefficients {
    pub fn terminal(a: f64, b: f64, c: f64) -> Self {
        Self::from_stage(StageCoefficients::terminal(a, b), c)
    }

    pub fn from_stage(s: StageCoefficients, c: f64) -> Self {
        FlexCoefficients {
            a: s.a,
            b: s.b,
            a_tilde: s.a_hat,
            b_tilde: s.b_hat,
            gamma_tilde: s.gamma_hat,
            c_tilde: c,
            regime: s.regime,
        }
    }

    fn stage(&self) -> StageCoefficients {
        StageCoefficients {
            a: self.a,
            b: self.b,
            a_hat: self.a_tilde,
            b_hat: self.b_tilde,
            gamma_hat: self.gamma_tilde,
            regime: self.regime,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.c_tilde >= 0.0) {
            return Err(Error::InvalidInput(format!("overdraft cost {} is negative", self.c_tilde)));
        }
        if !(self.b_tilde > 0.0) {
            return Err(Error::NonpositiveCurvature { stage: 0, value: self.b_tilde });
        }
        Ok(())
    }

    fn rule(&self, m: &PeriodMoments, literal: bool) -> Result<StageAllocationRule> {
        self.check()?;
        Ok(StageAllocationRule::new(
            m.blocks(0)?,
            self.a_tilde,
            self.b_tilde,
            Some(self.c_tilde),
            literal,
            false,
        ))
    }
}

/// `[1'u - x]^+`
pub fn overdraft(u: &[f64], x: f64) -> f64 {
    (u.iter().sum::<f64>() - x).max(0.0)
}

/// Maximizer of the penalized stage objective.
pub fn flex_stage_alloc(m: &PeriodMoments, fc: &FlexCoefficients, x: f64) -> Result<DVector<f64>> {
    Ok(fc.rule(m, false)?.allocate(x)?.0)
}

/// The stationary point with the tilde coefficients, ignoring the overdraft kink.
pub fn flex_stage_alloc_literal(m: &PeriodMoments, fc: &FlexCoefficients, x: f64) -> Result<DVector<f64>> {
    Ok(fc.rule(m, true)?.allocate(x)?.0)
}

/// Smallest overdraft cost at which the penalized maximizer respects the
/// budget at `x`: the marginal stage gain `2 b nu` of the hard problem.
pub fn flex_cost_bound(m: &PeriodMoments, fc: &FlexCoefficients, x: f64) -> Result<f64> {
    let rule = fc.rule(m, false)?;
    let c = &rule.correction;
    let nu = (c.excess_intercept + c.excess_slope * x) / c.scale;
    Ok(2.0 * fc.b_tilde * nu.max(0.0))
}

/// Optimal penalized stage value as a function of `x` (up to `gamma_tilde`).
pub fn flex_stage_value(m: &PeriodMoments, fc: &FlexCoefficients) -> Result<PiecewiseQuadratic> {
    let rule = fc.rule(m, false)?;
    Ok(dpnd::stage_value(&rule, Some(fc.c_tilde))?.0)
}

/// Coefficient update with the kinked penalty folded in exactly; the
/// continuation is the piece `next.regime` of the next stage's value.
pub fn flex_recursion(
    next: &FlexCoefficients,
    m: &PeriodMoments,
    a_t: f64,
    b_t: f64,
    c_t: f64,
) -> Result<FlexCoefficients> {
    let s = dpnd::hat_step(&next.stage(), &m.blocks(0)?, a_t, b_t, Some(next.c_tilde), false, 0)?;
    Ok(FlexCoefficients::from_stage(s, c_t))
}

/// Literal form of the update, with `(1 - c_t A)` factors.
pub fn flex_recursion_literal(
    next: &FlexCoefficients,
    m: &PeriodMoments,
    a_t: f64,
    b_t: f64,
    c_t: f64,
) -> Result<FlexCoefficients> {
    let s = dpnd::hat_step(&next.stage(), &m.blocks(0)?, a_t, b_t, Some(c_t), true, 0)?;
    Ok(FlexCoefficients::from_stage(s, c_t))
}

/// Backward induction with the overdraft penalty of `problem.borrow_cost`.
pub fn backward_induct_flex(problem: &ProblemSpec, literal: bool) -> Result<NdSolution> {
    if problem.borrow_cost.is_none() {
        return Err(Error::InvalidInput("the problem has no borrow_cost".into()));
    }
    dpnd::backward_induct_nd(
        problem,
        NdOptions {
            mode: Mode::Recursion,
            literal,
            nonneg: false,
        },
    )
}
