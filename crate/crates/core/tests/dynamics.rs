use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rfs_swarm_core::dynamics::{cwh_model, discretize_zoh, double_integrator, ContinuousModel};
use rfs_swarm_core::OrbitParams;

/// exp of the augmented matrix by a long Taylor series, good for small ‖M‖.
fn zoh_by_series(model: &ContinuousModel, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (model.state_dim(), model.input_dim());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&model.a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&model.b * dt));
    let mut term = DMatrix::identity(n + m, n + m);
    let mut sum = term.clone();
    for k in 1..40 {
        term = &term * &aug / k as f64;
        sum += &term;
    }
    (sum.view((0, 0), (n, n)).into_owned(), sum.view((0, n), (n, m)).into_owned())
}

#[test]
fn double_integrator_has_the_textbook_discretization() {
    let dt = 0.01;
    let lm = discretize_zoh(&double_integrator(), dt).unwrap();
    let a = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    let h = 0.5 * dt * dt;
    let b = DMatrix::from_row_slice(4, 2, &[h, 0.0, 0.0, h, dt, 0.0, 0.0, dt]);
    assert!((lm.a_disc - a).amax() < 1e-15);
    assert!((lm.b_disc - b).amax() < 1e-15);
}

#[test]
fn cwh_discretization_matches_a_taylor_series() {
    let orbit = OrbitParams::from_rate(0.00110678);
    let model = cwh_model(&orbit);
    for dt in [0.5, 1.0, 10.0] {
        let lm = discretize_zoh(&model, dt).unwrap();
        let (a, b) = zoh_by_series(&model, dt);
        assert!((&lm.a_disc - a).amax() < 1e-12, "dt {dt}");
        assert!((&lm.b_disc - b).amax() < 1e-12, "dt {dt}");
    }
}

#[test]
fn cwh_in_plane_drift_free_orbit_is_periodic() {
    // ẏ₀ = −2n x₀ with zero other velocities gives a closed 2:1 ellipse.
    let n = 0.00110678;
    let lm = discretize_zoh(&cwh_model(&OrbitParams::from_rate(n)), 1.0).unwrap();
    let x0 = DVector::from_vec(vec![1.0, 0.0, 0.5, 0.0, -2.0 * n, 0.0]);
    let period = (2.0 * std::f64::consts::PI / n).round() as usize;
    let mut x = x0.clone();
    let u = DVector::zeros(3);
    for _ in 0..period {
        x = lm.propagate_mean(&x, &u).unwrap();
    }
    // the period is rounded to whole seconds, so allow the residual phase
    assert!((&x - &x0).rows(0, 3).amax() < 5e-3);
    // along-track position never drifts secularly
    let mut y_max: f64 = 0.0;
    let mut x = x0.clone();
    for _ in 0..3 * period {
        x = lm.propagate_mean(&x, &u).unwrap();
        y_max = y_max.max(x[1].abs());
    }
    assert!(y_max < 2.0 + 1e-6);
}

#[test]
fn orbit_rate_from_gravity_and_radius() {
    let o = OrbitParams::from_mu_radius(3.986004418e14, 7.0e6).unwrap();
    assert!((o.n_freq - (3.986004418e14f64 / 7.0e6f64.powi(3)).sqrt()).abs() < 1e-18);
    let back = OrbitParams::from_rate(o.n_freq);
    assert!((back.a_radius - 7.0e6).abs() < 1e-3);
    assert!(OrbitParams::from_mu_radius(-1.0, 1.0).is_err());
}

#[test]
fn bad_step_sizes_are_rejected() {
    assert!(discretize_zoh(&double_integrator(), 0.0).is_err());
    assert!(discretize_zoh(&double_integrator(), f64::NAN).is_err());
}

proptest! {
    #[test]
    fn zoh_composes_over_consecutive_steps(dt in 0.001f64..2.0) {
        let model = cwh_model(&OrbitParams::from_rate(0.0011));
        let one = discretize_zoh(&model, dt).unwrap();
        let two = discretize_zoh(&model, 2.0 * dt).unwrap();
        let a2 = &one.a_disc * &one.a_disc;
        let b2 = &one.a_disc * &one.b_disc + &one.b_disc;
        prop_assert!((a2 - &two.a_disc).amax() < 1e-10);
        prop_assert!((b2 - &two.b_disc).amax() < 1e-10);
    }

    #[test]
    fn propagated_covariance_stays_symmetric_psd(d in prop::collection::vec(0.01f64..2.0, 4)) {
        let lm = discretize_zoh(&double_integrator(), 0.1).unwrap();
        let p = DMatrix::from_diagonal(&DVector::from_vec(d));
        let out = lm.propagate_covariance(&p).unwrap();
        prop_assert_eq!(out.clone(), out.transpose());
        prop_assert!(out.symmetric_eigenvalues().min() > 0.0);
    }
}
