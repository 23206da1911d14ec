mod common;

use common::{rng, spd};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rfs_swarm_core::ilqr::{ilqr_solve, ilqr_solve_with, lqr_backward, QuadraticCost, StackedDynamics};
use rfs_swarm_core::{DistanceKind, GaussianComponent, GaussianMixture, IlqrOptions, IlqrProblem, StageCostModel};
use rfs_swarm_core::dynamics::{discretize_zoh, double_integrator};
use rfs_swarm_core::objective::HessianMode;

fn random_lq<R: Rng>(r: &mut R) -> (StackedDynamics, QuadraticCost, DVector<f64>) {
    let nx = r.random_range(1..=8);
    let nu = r.random_range(1..=nx);
    let horizon = r.random_range(1..=50);
    let scale = 1.0 / (nx as f64).sqrt();
    let a = DMatrix::from_fn(nx, nx, |i, j| {
        let noise = r.random_range(-0.5..0.5) * scale;
        if i == j { 0.9 + noise } else { noise }
    });
    let b = DMatrix::from_fn(nx, nu, |_, _| r.random_range(-1.0..1.0));
    let mut cost = QuadraticCost::simple(spd(nx, 0.0, 2.0, r), spd(nu, 0.1, 2.0, r), spd(nx, 0.1, 3.0, r), horizon);
    cost.q_lin = DVector::from_fn(nx, |_, _| r.random_range(-1.0..1.0));
    cost.r_lin = DVector::from_fn(nu, |_, _| r.random_range(-0.5..0.5));
    cost.q_final_lin = DVector::from_fn(nx, |_, _| r.random_range(-1.0..1.0));
    let x0 = DVector::from_fn(nx, |_, _| r.random_range(-2.0..2.0));
    (StackedDynamics::new(a, b, 1).unwrap(), cost, x0)
}

#[test]
fn ilqr_reaches_the_riccati_optimum_in_one_step() {
    let mut r = rng(303);
    let opts = IlqrOptions {
        tol: 1e-12,
        ..IlqrOptions::default()
    };
    for case in 0..25 {
        let (dynamics, cost, x0) = random_lq(&mut r);
        let exact = lqr_backward(&dynamics, &cost).unwrap().optimal_cost(&x0);
        let sol = ilqr_solve_with(&dynamics, &cost, &x0, None, &opts).unwrap();
        let accepted: Vec<_> = sol.diagnostics.iter().filter(|d| d.accepted).collect();
        assert!(!accepted.is_empty(), "case {case}: no accepted step");
        let first = accepted[0];
        assert_eq!(first.iter, 0, "case {case}");
        assert_eq!(first.alpha, 1.0, "case {case}");
        assert!(
            (first.cost - exact).abs() <= 1e-8 * exact.abs().max(1.0),
            "case {case}: {} vs {exact}",
            first.cost
        );
        assert!((sol.cost - exact).abs() <= 1e-8 * exact.abs().max(1.0));
    }
}

#[test]
fn lqr_gains_reproduce_the_optimal_rollout_cost() {
    let mut r = rng(7);
    for _ in 0..10 {
        let (dynamics, cost, x0) = random_lq(&mut r);
        let sol = lqr_backward(&dynamics, &cost).unwrap();
        let mut x = x0.clone();
        let mut total = 0.0;
        for k in 0..cost.horizon {
            let u = &sol.gains_k[k] * &x + &sol.offsets_l[k];
            total += 0.5 * x.dot(&(&cost.q * &x)) + cost.q_lin.dot(&x) + 0.5 * u.dot(&(&cost.r * &u)) + cost.r_lin.dot(&u);
            x = dynamics.step(k, &x, &u);
        }
        total += 0.5 * x.dot(&(&cost.q_final * &x)) + cost.q_final_lin.dot(&x);
        let exact = sol.optimal_cost(&x0);
        assert!((total - exact).abs() <= 1e-9 * exact.abs().max(1.0));
    }
}

fn swarm_problem(alpha: f64, horizon: usize) -> IlqrProblem {
    let model = discretize_zoh(&double_integrator(), 0.01).unwrap();
    let cov = DMatrix::identity(4, 4) * 0.2;
    let starts = [(-3.0, -3.0), (3.0, -3.0), (3.0, 3.0), (-3.0, 3.0)];
    let goals = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let target = GaussianMixture::new(
        2,
        goals
            .iter()
            .map(|&(x, y)| GaussianComponent::new(1.0, DVector::from_vec(vec![x, y]), DMatrix::identity(2, 2) * 0.2).unwrap())
            .collect(),
    )
    .unwrap();
    let x0 = DVector::from_iterator(16, starts.iter().flat_map(|&(x, y)| [x, y, 0.0, 0.0]));
    let stage = StageCostModel {
        r_weight: DMatrix::identity(2, 2) * 1e-6,
        distance: DistanceKind::l2_quadratic(alpha),
        target,
        covariances: vec![cov; 4],
        weights: vec![1.0; 4],
    };
    IlqrProblem {
        model,
        n_components: 4,
        horizon,
        x0,
        stage_costs: vec![stage.clone(); horizon],
        terminal_cost: stage,
        cost_dims: vec![0, 1],
    }
}

#[test]
fn accepted_costs_decrease_and_pass_the_ratio_test() {
    for mode in [HessianMode::BlockDiagonal, HessianMode::Full] {
        let opts = IlqrOptions {
            max_iters: 15,
            hessian_mode: mode,
            ..IlqrOptions::default()
        };
        let sol = ilqr_solve(&swarm_problem(0.01, 20), &opts).unwrap();
        let mut last = f64::INFINITY;
        for d in sol.diagnostics.iter().filter(|d| d.accepted) {
            assert!(d.cost < last, "{mode:?}");
            assert!(d.z > opts.c1);
            assert!(d.expected < 0.0);
            last = d.cost;
        }
        assert!(sol.diagnostics.iter().any(|d| d.accepted));
        assert_eq!(sol.controls.len(), 20);
        assert_eq!(sol.states.len(), 21);
    }
}

#[test]
fn solution_is_deterministic() {
    let opts = IlqrOptions {
        max_iters: 5,
        ..IlqrOptions::default()
    };
    let a = ilqr_solve(&swarm_problem(0.1, 10), &opts).unwrap();
    let b = ilqr_solve(&swarm_problem(0.1, 10), &opts).unwrap();
    assert_eq!(a.controls, b.controls);
    assert_eq!(a.cost.to_bits(), b.cost.to_bits());
}

#[test]
fn invalid_options_are_rejected() {
    let bad = IlqrOptions {
        c1: 1.5,
        ..IlqrOptions::default()
    };
    assert!(ilqr_solve(&swarm_problem(0.1, 3), &bad).is_err());
    let bad = IlqrOptions {
        mu_scale: 1.0,
        ..IlqrOptions::default()
    };
    assert!(ilqr_solve(&swarm_problem(0.1, 3), &bad).is_err());
}
