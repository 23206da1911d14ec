mod common;

use common::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use rfs_swarm_core::dynamics::{discretize_zoh, double_integrator, LinearModel};
use rfs_swarm_core::gmphd::{estimate_states, phd_predict, phd_update, prune_merge, SpawnKernel};
use rfs_swarm_core::swarmsim::generate_measurements;
use rfs_swarm_core::{Agent, GaussianComponent, GaussianMixture, PhdModel, PruneParams, SensorModel};

fn motion() -> LinearModel {
    discretize_zoh(&double_integrator(), 0.1)
        .unwrap()
        .with_process_noise(DMatrix::identity(4, 4) * 1e-3)
        .unwrap()
}

fn position_sensor(p_detect: f64, clutter_rate: f64) -> SensorModel {
    let mut h = DMatrix::zeros(2, 4);
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    SensorModel {
        p_detect,
        h_mat: h,
        r_meas: DMatrix::identity(2, 2) * 0.01,
        clutter_rate,
        window: vec![(-10.0, 10.0), (-10.0, 10.0)],
    }
}

/// Textbook Kalman filter written out with explicit inverses.
fn kalman_step(
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
    model: &LinearModel,
    sensor: &SensorModel,
) -> (DVector<f64>, DMatrix<f64>) {
    let mp = &model.a_disc * m + &model.b_disc * u;
    let pp = &model.a_disc * p * model.a_disc.transpose() + &model.q_proc;
    let h = &sensor.h_mat;
    let s = h * &pp * h.transpose() + &sensor.r_meas;
    let k = &pp * h.transpose() * s.try_inverse().unwrap();
    let mu = &mp + &k * (z - h * &mp);
    let pu = (DMatrix::identity(4, 4) - &k * h) * &pp;
    (mu, pu)
}

#[test]
fn degenerate_filter_is_a_kalman_filter() {
    let model = motion();
    let sensor = position_sensor(1.0, 0.0);
    let phd = PhdModel {
        p_survive: 1.0,
        birth: GaussianMixture::empty(4),
        spawn: vec![],
        motion: model.clone(),
    };
    let prune = PruneParams {
        trunc_thresh: 1e-12,
        ..PruneParams::default()
    };
    let mut r = rng(9);
    let m0 = DVector::from_vec(vec![0.5, -0.5, 0.1, 0.2]);
    let p0 = DMatrix::identity(4, 4) * 0.3;
    let mut intensity = GaussianMixture::new(4, vec![GaussianComponent::new(1.0, m0.clone(), p0.clone()).unwrap()]).unwrap();
    let (mut km, mut kp) = (m0, p0);
    let mut truth = DVector::from_vec(vec![0.4, -0.4, 0.0, 0.3]);
    for step in 0..100 {
        let u = DVector::from_vec(vec![(step as f64 * 0.1).sin(), 0.2]);
        truth = &model.a_disc * &truth + &model.b_disc * &u;
        let noise = DVector::from_fn(2, |_, _| 0.1 * r.sample::<f64, _>(StandardNormal));
        let z = &sensor.h_mat * &truth + noise;

        let pred = phd_predict(&intensity, &phd, std::slice::from_ref(&u)).unwrap();
        let post = phd_update(&pred, std::slice::from_ref(&z), &sensor).unwrap();
        intensity = prune_merge(&post, &prune).unwrap();
        (km, kp) = kalman_step(&km, &kp, &u, &z, &model, &sensor);

        assert_eq!(intensity.len(), 1, "step {step}");
        let c = &intensity.components()[0];
        assert!((c.weight() - 1.0).abs() <= 1e-10, "step {step}");
        assert!((c.mean() - &km).amax() <= 1e-10, "step {step}");
        assert!((c.covariance() - &kp).amax() <= 1e-10, "step {step}");
    }
}

#[test]
fn mass_without_measurements_decays_by_survival_and_detection() {
    let phd = PhdModel {
        p_survive: 0.9,
        birth: GaussianMixture::new(4, vec![GaussianComponent::new(0.2, DVector::zeros(4), DMatrix::identity(4, 4)).unwrap()]).unwrap(),
        spawn: vec![],
        motion: motion(),
    };
    let prior = GaussianMixture::new(4, vec![GaussianComponent::new(3.0, DVector::zeros(4), DMatrix::identity(4, 4)).unwrap()]).unwrap();
    let pred = phd_predict(&prior, &phd, &[]).unwrap();
    assert!((pred.total_mass() - (0.9 * 3.0 + 0.2)).abs() < 1e-14);
    let post = phd_update(&pred, &[], &position_sensor(0.8, 2.0)).unwrap();
    assert!((post.total_mass() - 0.2 * (0.9 * 3.0 + 0.2)).abs() < 1e-14);
}

#[test]
fn spawned_components_follow_the_kernel() {
    let kernel = SpawnKernel {
        weight: 0.5,
        f_mat: DMatrix::identity(4, 4),
        offset: DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
        cov: DMatrix::identity(4, 4) * 0.1,
    };
    let phd = PhdModel {
        p_survive: 1.0,
        birth: GaussianMixture::empty(4),
        spawn: vec![kernel],
        motion: motion(),
    };
    let prior = GaussianMixture::new(4, vec![GaussianComponent::new(2.0, DVector::zeros(4), DMatrix::identity(4, 4)).unwrap()]).unwrap();
    let pred = phd_predict(&prior, &phd, &[]).unwrap();
    assert_eq!(pred.len(), 2);
    let s = &pred.components()[1];
    assert_eq!(s.weight(), 1.0);
    assert_eq!(s.mean()[0], 1.0);
    assert!((s.covariance() - DMatrix::identity(4, 4) * 1.1).amax() < 1e-15);
}

#[test]
fn one_clean_detection_per_target_recovers_the_cardinality() {
    let sensor = SensorModel {
        clutter_rate: 1.0,
        ..position_sensor(0.99, 1.0)
    };
    let targets = [(-2.0, 0.0), (2.0, 0.0), (0.0, 3.0)];
    let pred = GaussianMixture::new(
        4,
        targets
            .iter()
            .map(|&(x, y)| GaussianComponent::new(1.0, DVector::from_vec(vec![x, y, 0.0, 0.0]), DMatrix::identity(4, 4) * 0.05).unwrap())
            .collect(),
    )
    .unwrap();
    let zs: Vec<_> = targets.iter().map(|&(x, y)| DVector::from_vec(vec![x + 0.01, y - 0.01])).collect();
    let post = prune_merge(&phd_update(&pred, &zs, &sensor).unwrap(), &PruneParams::default()).unwrap();
    let est = estimate_states(&post);
    assert_eq!(est.cardinality, 3);
    assert_eq!(est.states.len(), 3);
    for (x, y) in targets {
        assert!(est.states.iter().any(|s| (s[0] - x).abs() < 0.05 && (s[1] - y).abs() < 0.05));
    }
}

#[test]
fn measurement_count_matches_detection_plus_clutter_rate() {
    // 10 agents at p_d = 0.7 plus 5 clutter points per scan: 12 on average.
    let sensor = SensorModel {
        window: vec![(-2.0, 2.0), (-2.0, 2.0)],
        ..position_sensor(0.7, 5.0)
    };
    let agents: Vec<Agent> = (0..10).map(|i| Agent::new(i, DVector::from_vec(vec![0.1 * i as f64, 0.0, 0.0, 0.0]), 0)).collect();
    let mut r = rng(12);
    let scans = 20_000;
    let mut total = 0usize;
    for _ in 0..scans {
        let zs = generate_measurements(&agents, &sensor, &mut r).unwrap();
        total += zs.len();
    }
    let mean = total as f64 / scans as f64;
    assert!((mean - 12.0).abs() < 0.1, "mean count {mean}");
}

#[test]
fn dead_agents_are_never_observed_and_noise_can_be_zero() {
    let sensor = SensorModel {
        r_meas: DMatrix::zeros(2, 2),
        ..position_sensor(1.0, 0.0)
    };
    let mut dead = Agent::new(1, DVector::from_vec(vec![5.0, 5.0, 0.0, 0.0]), 0);
    dead.death_step = Some(0);
    dead.update_alive(0);
    let live = Agent::new(0, DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]), 0);
    let zs = generate_measurements(&[live, dead], &sensor, &mut rng(1)).unwrap();
    assert_eq!(zs, vec![DVector::from_vec(vec![1.0, -1.0])]);
}

#[test]
fn invalid_sensor_settings_are_rejected() {
    let pred = GaussianMixture::new(4, vec![GaussianComponent::new(1.0, DVector::zeros(4), DMatrix::identity(4, 4)).unwrap()]).unwrap();
    let bad = SensorModel {
        p_detect: 1.5,
        ..position_sensor(1.0, 0.0)
    };
    assert!(phd_update(&pred, &[], &bad).is_err());
    let bad = SensorModel {
        window: vec![(1.0, 1.0), (0.0, 1.0)],
        ..position_sensor(1.0, 0.0)
    };
    assert!(phd_update(&pred, &[], &bad).is_err());
}

fn intensity_strategy() -> impl Strategy<Value = GaussianMixture> {
    let comp = (0.0f64..2.0, prop::collection::vec(-5.0f64..5.0, 2), 0.05f64..1.0);
    prop::collection::vec(comp, 0..12).prop_map(|cs| {
        let comps = cs
            .into_iter()
            .map(|(w, m, v)| GaussianComponent::new(w, DVector::from_vec(m), DMatrix::identity(2, 2) * v).unwrap())
            .collect();
        GaussianMixture::new(2, comps).unwrap()
    })
}

proptest! {
    #[test]
    fn merging_keeps_the_mass_above_the_threshold(mix in intensity_strategy()) {
        let params = PruneParams { trunc_thresh: 0.01, merge_dist: 4.0, max_components: 100 };
        let kept: f64 = mix.components().iter().map(|c| c.weight()).filter(|w| *w >= 0.01).sum();
        let out = prune_merge(&mix, &params).unwrap();
        prop_assert!((out.total_mass() - kept).abs() <= 1e-12 * (1.0 + kept));
        prop_assert!(out.len() <= mix.len());
        for c in out.components() {
            prop_assert!(c.covariance().symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn component_cap_is_respected(mix in intensity_strategy(), cap in 1usize..5) {
        let params = PruneParams { trunc_thresh: 0.0, merge_dist: 0.0, max_components: cap };
        prop_assert!(prune_merge(&mix, &params).unwrap().len() <= cap);
    }

    #[test]
    fn estimates_never_exceed_the_rounded_mass(mix in intensity_strategy()) {
        let est = estimate_states(&mix);
        prop_assert_eq!(est.cardinality, mix.total_mass().round() as usize);
        prop_assert!(est.states.len() <= est.cardinality);
        prop_assert_eq!(est.states.len(), est.sources.len());
    }

    #[test]
    fn update_weights_never_exceed_one_per_measurement(
        mix in intensity_strategy(),
        z in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let mut h = DMatrix::zeros(2, 2);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        let sensor = SensorModel { p_detect: 0.9, h_mat: h, r_meas: DMatrix::identity(2, 2) * 0.1, clutter_rate: 3.0, window: vec![(-6.0, 6.0), (-6.0, 6.0)] };
        let post = phd_update(&mix, &[DVector::from_vec(z)], &sensor).unwrap();
        let detected: f64 = post.components()[mix.len()..].iter().map(|c| c.weight()).sum();
        prop_assert!(detected <= 1.0 + 1e-12);
    }
}
