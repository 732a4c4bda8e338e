//! Allocation policies: maps from the available resource `x_{t-1}` to an
//! allocation vector `u_t`.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::num;

/// A (possibly history-dependent) allocation rule for every stage.
///
/// Stages are indexed from zero: stage `t` decides `u_{t+1}` from `x_t`.
pub trait AllocationPolicy: Sync {
    fn horizon(&self) -> usize;

    fn n(&self) -> usize;

    fn allocate(&self, t: usize, x: f64) -> Result<Vec<f64>>;

    /// Allocation at a node of the scenario tree. `history` holds the atom
    /// index drawn in each earlier period.
    fn allocate_at(&self, t: usize, history: &[usize], x: f64) -> Result<Vec<f64>> {
        let _ = history;
        self.allocate(t, x)
    }

    /// The stage rules as piecewise-affine maps, when the policy has that form.
    fn affine_rules(&self) -> Option<Vec<AffineRule>> {
        None
    }
}

/// Vector-valued piecewise-affine map `x -> g_k + h_k x` on the `k`-th interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineRule {
    #[serde(with = "num::dec_vec")]
    pub breakpoints: Vec<f64>,
    pub pieces: Vec<AffinePiece>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinePiece {
    #[serde(with = "num::dec_vec")]
    pub intercept: Vec<f64>,
    #[serde(with = "num::dec_vec")]
    pub slope: Vec<f64>,
}

impl AffinePiece {
    pub fn new(intercept: Vec<f64>, slope: Vec<f64>) -> Self {
        AffinePiece { intercept, slope }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.intercept
            .iter()
            .zip(&self.slope)
            .map(|(g, h)| g + h * x)
            .collect()
    }

    fn nearly_equal(&self, o: &AffinePiece, at: f64) -> bool {
        let scale = 1.0 + at.abs();
        self.intercept
            .iter()
            .zip(&self.slope)
            .zip(o.intercept.iter().zip(&o.slope))
            .all(|((g1, h1), (g2, h2))| {
                let tol = 1e-12 * (1.0 + g1.abs() + h1.abs() * scale);
                (h1 - h2).abs() * scale <= tol && (g1 - g2).abs() <= tol
            })
    }
}

impl AffineRule {
    pub fn single(piece: AffinePiece) -> Self {
        AffineRule {
            breakpoints: Vec::new(),
            pieces: vec![piece],
        }
    }

    pub fn new(breakpoints: Vec<f64>, pieces: Vec<AffinePiece>) -> Result<Self> {
        if pieces.len() != breakpoints.len() + 1 || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("malformed piecewise-affine rule".into()));
        }
        Ok(AffineRule { breakpoints, pieces })
    }

    pub fn piece_index(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|b| *b < x)
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.pieces[self.piece_index(x)].eval(x)
    }

    pub fn eval_vector(&self, x: f64) -> DVector<f64> {
        DVector::from_vec(self.eval(x))
    }

    /// Merges adjacent identical pieces.
    pub fn simplified(self) -> Self {
        let mut bps = Vec::new();
        let mut pieces: Vec<AffinePiece> = Vec::new();
        for (k, p) in self.pieces.into_iter().enumerate() {
            if let Some(last) = pieces.last() {
                let b = self.breakpoints[k - 1];
                if last.nearly_equal(&p, b) {
                    continue;
                }
                bps.push(b);
            }
            pieces.push(p);
        }
        AffineRule {
            breakpoints: bps,
            pieces,
        }
    }
}

/// Allocates nothing to the risky entities.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub n: usize,
    pub horizon: usize,
}

impl AllocationPolicy for ZeroPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n(&self) -> usize {
        self.n
    }

    fn allocate(&self, _t: usize, _x: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.n])
    }

    fn affine_rules(&self) -> Option<Vec<AffineRule>> {
        let piece = AffinePiece::new(vec![0.0; self.n], vec![0.0; self.n]);
        Some(vec![AffineRule::single(piece); self.horizon])
    }
}

/// One piecewise-affine rule per stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinePolicy {
    pub rules: Vec<AffineRule>,
}

impl AffinePolicy {
    pub fn new(rules: Vec<AffineRule>) -> Self {
        AffinePolicy { rules }
    }
}

impl AllocationPolicy for AffinePolicy {
    fn horizon(&self) -> usize {
        self.rules.len()
    }

    fn n(&self) -> usize {
        self.rules.first().map_or(0, |r| r.pieces[0].slope.len())
    }

    fn allocate(&self, t: usize, x: f64) -> Result<Vec<f64>> {
        Ok(self.rules[t].eval(x))
    }

    fn affine_rules(&self) -> Option<Vec<AffineRule>> {
        Some(self.rules.clone())
    }
}
