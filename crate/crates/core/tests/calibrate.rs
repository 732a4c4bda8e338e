mod common;

use dynalloc::calibrate::{chance_to_meanvar, pi1_to_pi2, pi2_to_pi3, trace_csv, ChanceSpec, FIXED_POINT_TOL};
use dynalloc::model::Objective;
use dynalloc::solve::{DefaultSolver, SolveMode, SolveOptions};
use rand::RngExt;

#[test]
fn fixed_point_satisfies_its_defining_equation() {
    let mut rng = common::rng(31);
    let solvers = [
        DefaultSolver::default(),
        DefaultSolver { options: SolveOptions { mode: SolveMode::Recursion, ..Default::default() } },
    ];
    for solver in &solvers {
        for _ in 0..8 {
            let horizon = rng.random_range(1..=3);
            let n = rng.random_range(1..=2);
            let p = common::random_problem(&mut rng, horizon, n, 3, n == 1);
            let w: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.5..1.5)).collect();
            let y: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.02..0.2)).collect();
            let r = pi2_to_pi3(&p, &w, &y, solver, None).unwrap();
            assert_eq!(r.b, y);
            for t in 0..horizon {
                let target = w[t] + 2.0 * y[t] * r.mean[t];
                assert!((r.a[t] - target).abs() <= FIXED_POINT_TOL * (1.0 + r.a[t].abs()));
            }
        }
    }
}

#[test]
fn damping_changes_the_path_not_the_answer() {
    let p = common::one_d_reference(2, 10.0);
    let solver = DefaultSolver::default();
    let plain = pi2_to_pi3(&p, &[0.5, 1.0], &[0.01, 0.02], &solver, None).unwrap();
    let damped = pi2_to_pi3(&p, &[0.5, 1.0], &[0.01, 0.02], &solver, Some(0.3)).unwrap();
    assert!(damped.iterations > plain.iterations);
    for t in 0..2 {
        assert!((plain.a[t] - damped.a[t]).abs() <= 1e-6);
    }
    assert!(pi2_to_pi3(&p, &[0.5, 1.0], &[0.01, 0.02], &solver, Some(1.5)).is_err());
}

#[test]
fn trace_has_one_row_per_iteration() {
    let p = common::one_d_reference(2, 10.0);
    let r = pi2_to_pi3(&p, &[0.5, 1.0], &[0.01, 0.02], &DefaultSolver::default(), None).unwrap();
    let csv = trace_csv(&r.trace);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "iteration,y_1,y_2,var_1,var_2,residual_1,residual_2");
    assert_eq!(lines.count(), r.iterations);
}

#[test]
fn tight_variance_cap_binds() {
    let base = common::one_d_reference(1, 10.0);
    let solver = DefaultSolver::default();
    let free = pi2_to_pi3(&base, &[1.0], &[0.01], &solver, None).unwrap();
    let alpha = 0.5 * free.var[0];
    let p = dynalloc::model::ProblemSpec { objective: Objective::VarianceConstrained { w: vec![1.0], alpha: vec![alpha] }, ..base };
    let r = pi1_to_pi2(&p, &solver).unwrap();
    assert!(r.var[0] >= 0.99 * alpha && r.var[0] <= 1.01 * alpha, "Var {} vs alpha {alpha}", r.var[0]);
    assert!(r.y[0] > 0.01);
}

#[test]
fn chance_weights_follow_the_target_gap() {
    let p = common::one_d_reference(1, 10.0);
    let solver = DefaultSolver::default();
    let spec = ChanceSpec { w: vec![1.0], d: vec![14.0] };
    let r = chance_to_meanvar(&p, &spec, &solver).unwrap();
    assert!(r.invalid_direction.is_empty());
    assert!(r.mean[0] < 14.0);
    let expected = 1.0 / (14.0 - r.mean[0]).powi(2);
    assert!((r.y[0] - expected).abs() <= 1e-4 * expected, "{} vs {expected}", r.y[0]);

    let below = ChanceSpec { w: vec![1.0], d: vec![5.0] };
    let r = chance_to_meanvar(&p, &below, &solver).unwrap();
    assert_eq!(r.invalid_direction, vec![1]);

    let short = ChanceSpec { w: vec![1.0, 1.0], d: vec![14.0] };
    assert!(chance_to_meanvar(&p, &short, &solver).is_err());
}
