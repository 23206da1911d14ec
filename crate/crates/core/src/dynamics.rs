//! Linear agent models, zero-order-hold discretization and propagation of
//! mixture statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_PROCESS_NOISE: f64 = 1e-6;

/// Continuous-time pair ẋ = A x + B u.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ContinuousModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Discretized model with its continuous origin and per-step process noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a_cont: DMatrix<f64>,
    pub b_cont: DMatrix<f64>,
    pub a_disc: DMatrix<f64>,
    pub b_disc: DMatrix<f64>,
    pub q_proc: DMatrix<f64>,
    pub dt: f64,
}

impl LinearModel {
    /// A model given directly in discrete form; the continuous part is left
    /// empty-sized zeros.
    pub fn from_discrete(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.nrows(),
            });
        }
        Ok(Self {
            a_cont: DMatrix::zeros(n, n),
            b_cont: DMatrix::zeros(n, b.ncols()),
            a_disc: a,
            b_disc: b,
            q_proc: q,
            dt,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a_disc.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_disc.ncols()
    }

    pub fn with_process_noise(mut self, q: DMatrix<f64>) -> Result<Self> {
        let n = self.state_dim();
        if q.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: q.nrows(),
            });
        }
        if !linalg::is_symmetric(&q, 1e-12) {
            return Err(Error::NotSymmetric {
                context: "process noise".into(),
            });
        }
        self.q_proc = q;
        Ok(self)
    }

    /// a_disc·m + b_disc·u
    pub fn propagate_mean(&self, m: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if m.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: m.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(&self.a_disc * m + &self.b_disc * u)
    }

    /// a_disc·P·a_discᵀ + q_proc, symmetrized.
    pub fn propagate_covariance(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.state_dim();
        if p.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.nrows(),
            });
        }
        if !linalg::is_symmetric(p, 1e-10) {
            return Err(Error::NotSymmetric {
                context: "covariance to propagate".into(),
            });
        }
        let mut out = &self.a_disc * p * self.a_disc.transpose() + &self.q_proc;
        linalg::symmetrize(&mut out);
        Ok(out)
    }
}

/// Circular-orbit parameters of the chief.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitParams {
    /// Standard gravitational parameter, m³/s².
    pub mu_grav: f64,
    /// Orbit radius, m.
    pub a_radius: f64,
    /// Mean motion, rad/s.
    pub n_freq: f64,
}

impl OrbitParams {
    pub fn from_mu_radius(mu_grav: f64, a_radius: f64) -> Result<Self> {
        if !(mu_grav > 0.0 && a_radius > 0.0) {
            return Err(Error::invalid("orbit", "mu and radius must be positive"));
        }
        Ok(Self {
            mu_grav,
            a_radius,
            n_freq: (mu_grav / a_radius.powi(3)).sqrt(),
        })
    }

    /// Orbit given only by its mean motion; μ is Earth's and the radius is
    /// the one consistent with `n`. A zero rate is accepted as a limit case.
    pub fn from_rate(n_freq: f64) -> Self {
        const MU_EARTH: f64 = 3.986_004_418e14;
        let a_radius = if n_freq > 0.0 {
            (MU_EARTH / (n_freq * n_freq)).cbrt()
        } else {
            f64::INFINITY
        };
        Self {
            mu_grav: MU_EARTH,
            a_radius,
            n_freq,
        }
    }
}

/// Planar double integrator: state [x, y, ẋ, ẏ], input [a_x, a_y].
pub fn double_integrator() -> ContinuousModel {
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    let mut b = DMatrix::zeros(4, 2);
    b[(2, 0)] = 1.0;
    b[(3, 1)] = 1.0;
    ContinuousModel { a, b }
}

/// Clohessy-Wiltshire relative motion: state [x, y, z, ẋ, ẏ, ż],
/// input [a_x, a_y, a_z].
pub fn cwh_model(orbit: &OrbitParams) -> ContinuousModel {
    let n = orbit.n_freq;
    let mut a = DMatrix::zeros(6, 6);
    a[(0, 3)] = 1.0;
    a[(1, 4)] = 1.0;
    a[(2, 5)] = 1.0;
    a[(3, 0)] = 3.0 * n * n;
    a[(3, 4)] = 2.0 * n;
    a[(4, 3)] = -2.0 * n;
    a[(5, 2)] = -n * n;
    let mut b = DMatrix::zeros(6, 3);
    b[(3, 0)] = 1.0;
    b[(4, 1)] = 1.0;
    b[(5, 2)] = 1.0;
    ContinuousModel { a, b }
}

/// Exact zero-order-hold discretization through the exponential of the
/// augmented matrix [[A, B], [0, 0]]·dt. Process noise defaults to
/// `DEFAULT_PROCESS_NOISE`·I.
pub fn discretize_zoh(model: &ContinuousModel, dt: f64) -> Result<LinearModel> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
    }
    let n = model.state_dim();
    let m = model.input_dim();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&model.a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&model.b * dt));
    // scaling-and-squaring Padé exponential
    let e = aug.exp();
    Ok(LinearModel {
        a_cont: model.a.clone(),
        b_cont: model.b.clone(),
        a_disc: e.view((0, 0), (n, n)).into_owned(),
        b_disc: e.view((0, n), (n, m)).into_owned(),
        q_proc: DMatrix::identity(n, n) * DEFAULT_PROCESS_NOISE,
        dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn double_integrator_structure() {
        let m = double_integrator();
        assert_eq!(m.state_dim(), 4);
        assert_eq!(m.input_dim(), 2);
        assert_eq!(m.a.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(m.b.rows(0, 2).amax(), 0.0);
        assert_eq!(m.b.rows(2, 2), DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn cwh_entries() {
        let n = 0.00110678;
        let m = cwh_model(&OrbitParams::from_rate(n));
        // one-based (4,1), (4,5), (5,4), (6,3)
        assert_relative_eq!(m.a[(3, 0)], 3.0 * n * n, max_relative = 1e-15);
        assert_relative_eq!(m.a[(3, 0)], 3.674_865e-6, max_relative = 1e-5);
        assert_eq!(m.a[(3, 4)], 2.0 * n);
        assert_eq!(m.a[(4, 3)], -2.0 * n);
        assert_eq!(m.a[(5, 2)], -n * n);
        let m0 = cwh_model(&OrbitParams::from_rate(0.0));
        for (r, c) in [(3, 0), (3, 4), (4, 3), (5, 2)] {
            assert_eq!(m0.a[(r, c)], 0.0);
        }
    }

    #[test]
    fn orbit_rate_from_mu_radius() {
        let o = OrbitParams::from_mu_radius(3.986_004_418e14, 6_778_000.0).unwrap();
        assert_relative_eq!(o.n_freq, (o.mu_grav / o.a_radius.powi(3)).sqrt(), max_relative = 1e-12);
        let back = OrbitParams::from_rate(o.n_freq);
        assert_relative_eq!(back.a_radius, 6_778_000.0, max_relative = 1e-10);
    }

    #[test]
    fn zoh_double_integrator_exact() {
        let dt = 0.01;
        let lm = discretize_zoh(&double_integrator(), dt).unwrap();
        assert_relative_eq!(lm.a_disc[(0, 2)], dt, max_relative = 1e-14);
        assert_relative_eq!(lm.a_disc[(1, 3)], dt, max_relative = 1e-14);
        assert_relative_eq!(lm.b_disc[(0, 0)], dt * dt / 2.0, max_relative = 1e-12);
        assert_relative_eq!(lm.b_disc[(2, 0)], dt, max_relative = 1e-14);
        assert_eq!(lm.b_disc[(0, 1)], 0.0);
    }

    #[test]
    fn zoh_small_dt_limit() {
        let dt = 1e-9;
        let cont = cwh_model(&OrbitParams::from_rate(0.00110678));
        let lm = discretize_zoh(&cont, dt).unwrap();
        // entries of order dt remain, so both converge at first order in dt
        let id = DMatrix::<f64>::identity(6, 6);
        assert!((&lm.a_disc - &id).amax() <= 1.01 * dt);
        assert!((&lm.a_disc - &id - &cont.a * dt).amax() <= 1e-12);
        assert!(lm.b_disc.amax() <= 1.01 * dt);
        assert!((&lm.b_disc - &cont.b * dt).amax() <= 1e-12);
    }

    #[test]
    fn zoh_rejects_bad_dt() {
        assert!(discretize_zoh(&double_integrator(), 0.0).is_err());
        assert!(discretize_zoh(&double_integrator(), -1.0).is_err());
    }

    #[test]
    fn propagation_examples() {
        let lm = discretize_zoh(&double_integrator(), 0.01).unwrap();
        let z = lm.propagate_mean(&DVector::zeros(4), &DVector::zeros(2)).unwrap();
        assert_eq!(z.amax(), 0.0);
        let m = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(lm.propagate_mean(&m, &DVector::zeros(2)).unwrap(), m);
        assert!(lm.propagate_mean(&DVector::zeros(3), &DVector::zeros(2)).is_err());

        let id = LinearModel::from_discrete(
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 3),
            1.0,
        )
        .unwrap();
        let p = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.3, 0.0, 0.3, 4.0]);
        assert_eq!(id.propagate_covariance(&p).unwrap(), p);
        let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let id = id.with_process_noise(q.clone()).unwrap();
        assert_eq!(id.propagate_covariance(&DMatrix::zeros(3, 3)).unwrap(), q);
    }

    #[test]
    fn propagate_covariance_rejects_asymmetric() {
        let lm = discretize_zoh(&double_integrator(), 0.01).unwrap();
        let mut p = DMatrix::identity(4, 4);
        p[(0, 1)] = 0.5;
        assert!(matches!(lm.propagate_covariance(&p), Err(Error::NotSymmetric { .. })));
    }
}
