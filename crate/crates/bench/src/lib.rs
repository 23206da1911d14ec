//! Fixtures shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rfs_swarm_core::{GaussianComponent, GaussianMixture};

/// `n` planar components on a ring of radius `r`, isotropic variance `var`.
pub fn ring(n: usize, r: f64, var: f64) -> GaussianMixture {
    let comps = (0..n)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / n as f64;
            GaussianComponent::new(
                1.0,
                DVector::from_vec(vec![r * th.cos(), r * th.sin()]),
                DMatrix::identity(2, 2) * var,
            )
            .expect("valid component")
        })
        .collect();
    GaussianMixture::new(2, comps).expect("valid mixture")
}
