//! Instance generators shared by the integration tests.
#![allow(dead_code)]

use dynalloc::model::{Objective, Period, PeriodMoments, ProblemSpec, ReturnModel, ScenarioAtom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `j` atoms over a reference entity and `n` risky ones. With `riskless`
/// the reference return is the same in every atom.
pub fn random_atoms(rng: &mut ChaCha8Rng, n: usize, j: usize, riskless: bool) -> Vec<ScenarioAtom> {
    let weights: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let r0 = rng.random_range(1.0..1.05);
    weights
        .iter()
        .map(|w| {
            let reference = if riskless { r0 } else { rng.random_range(0.95..1.1) };
            let mut returns = vec![reference];
            returns.extend((0..n).map(|_| rng.random_range(0.7..1.5)));
            ScenarioAtom::new(w / total, returns)
        })
        .collect()
}

pub fn separable(horizon: usize, a: f64, b: f64) -> Objective {
    Objective::Separable {
        a: vec![a; horizon],
        b: vec![b; horizon],
    }
}

/// Random valid separable problem; rejected draws are retried.
pub fn random_problem(rng: &mut ChaCha8Rng, horizon: usize, n: usize, j: usize, riskless: bool) -> ProblemSpec {
    loop {
        let periods: Vec<Period> = (0..horizon)
            .map(|_| Period::from_atoms(random_atoms(rng, n, j, riskless), n))
            .collect::<Result<_, _>>()
            .unwrap_or_default();
        if periods.len() != horizon {
            continue;
        }
        let a: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.5..2.0)).collect();
        let b: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.01..0.1)).collect();
        let x0 = rng.random_range(0.5..5.0);
        if let Ok(p) = ProblemSpec::new(x0, ReturnModel { n, periods }, Objective::Separable { a, b }, None) {
            return p;
        }
    }
}

/// One risky entity with atoms 1.6 / 0.8 over a riskless 1.05.
pub fn one_d_atoms() -> Vec<ScenarioAtom> {
    vec![
        ScenarioAtom::new(0.5, vec![1.05, 1.6]),
        ScenarioAtom::new(0.5, vec![1.05, 0.8]),
    ]
}

pub fn one_d_reference(horizon: usize, x0: f64) -> ProblemSpec {
    let periods = (0..horizon)
        .map(|_| Period::from_atoms(one_d_atoms(), 1).unwrap())
        .collect();
    ProblemSpec::new(x0, ReturnModel { n: 1, periods }, separable(horizon, 1.0, 0.01), None).unwrap()
}

pub fn reference_moments_2d() -> PeriodMoments {
    PeriodMoments {
        mean_ref: 1.0,
        second_ref: 1.0,
        mean_excess: vec![0.1, 0.2],
        cross: vec![0.1, 0.2],
        second_excess: vec![vec![0.2, 0.02], vec![0.02, 0.3]],
    }
}
