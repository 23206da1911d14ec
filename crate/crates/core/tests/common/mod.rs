#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfs_swarm_core::{GaussianComponent, GaussianMixture};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random SPD matrix with eigenvalues in [lo, hi].
pub fn spd<R: Rng>(d: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let q = raw.qr().q();
    let eig = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| rng.random_range(lo..hi)));
    let mut p = &q * eig * q.transpose();
    let pt = p.transpose();
    p = (p + pt) * 0.5;
    p
}

pub fn random_mixture<R: Rng>(d: usize, n: usize, spread: f64, rng: &mut R) -> GaussianMixture {
    let comps = (0..n)
        .map(|_| {
            let w = rng.random_range(0.3..1.5);
            let m = DVector::from_fn(d, |_, _| rng.random_range(-spread..spread));
            GaussianComponent::new(w, m, spd(d, 0.1, 1.0, rng)).unwrap()
        })
        .collect();
    GaussianMixture::new(d, comps).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Largest entrywise relative error of `approx` against `exact`. Entries
/// that vanish analytically are compared against a floor of 1e-6 times the
/// largest entry.
pub fn entrywise(approx: &[f64], exact: &[f64]) -> f64 {
    let floor = 1e-6 * exact.iter().fold(1e-12_f64, |m, v| m.max(v.abs()));
    approx
        .iter()
        .zip(exact)
        .map(|(a, e)| (a - e).abs() / e.abs().max(floor))
        .fold(0.0, f64::max)
}
