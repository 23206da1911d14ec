//! Scenario files: the JSON description of one simulation run.
//!
//! ```json
//! {
//!   "schema": 1,
//!   "name": "case1_l2q_ilqr",
//!   "model": { "kind": "double_integrator" },
//!   "dt": 0.01,
//!   "horizon_steps": 40,
//!   "initial": { "kind": "points", "points": [[3, 3], [-3, 3]], "position_var": 0.2 },
//!   "target": { "kind": "points", "points": [[1, 1], [-1, 1]], "position_var": 0.2 },
//!   "distance": { "kind": "l2_quadratic", "alpha": 0.002 },
//!   "controller": { "kind": "ilqr" },
//!   "estimation": { "kind": "perfect" },
//!   "seed": 1
//! }
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::DistanceKind;
use crate::dynamics::{self, LinearModel, OrbitParams};
use crate::error::{Error, Result};
use crate::gmix::{GaussianComponent, GaussianMixture, MixtureDoc};
use crate::gmphd::PruneParams;
use crate::ilqr::IlqrOptions;
use crate::mpc::{MpcConfig, QuasiNewtonOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    DoubleIntegrator,
    /// Clohessy-Wiltshire; give either `n_freq` or both `mu_grav` and `a_radius`.
    Cwh {
        #[serde(default)]
        n_freq: Option<f64>,
        #[serde(default)]
        mu_grav: Option<f64>,
        #[serde(default)]
        a_radius: Option<f64>,
    },
}

fn default_one() -> f64 {
    1.0
}

fn default_velocity_var() -> f64 {
    1e-4
}

/// A set of Gaussian components over the full state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixtureSpec {
    /// Explicit components.
    Mixture { mixture: MixtureDoc },
    /// Components centred on the given positions (missing coordinates and
    /// all velocities zero) with diagonal covariance.
    Points {
        points: Vec<Vec<f64>>,
        position_var: f64,
        #[serde(default = "default_velocity_var")]
        velocity_var: f64,
        #[serde(default = "default_one")]
        weight: f64,
    },
    /// Regular `per_axis` × `per_axis` grid over [low, high] in the planar axes.
    Grid {
        per_axis: usize,
        low: f64,
        high: f64,
        position_var: f64,
        #[serde(default = "default_velocity_var")]
        velocity_var: f64,
        #[serde(default = "default_one")]
        weight: f64,
    },
    /// Positions drawn uniformly from [low, high] in the planar axes.
    Uniform {
        count: usize,
        low: f64,
        high: f64,
        position_var: f64,
        #[serde(default = "default_velocity_var")]
        velocity_var: f64,
        #[serde(default = "default_one")]
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Points {
        points: Vec<Vec<f64>>,
        position_var: f64,
        #[serde(default = "default_velocity_var")]
        velocity_var: f64,
        #[serde(default = "default_one")]
        weight: f64,
    },
    Mixture {
        mixture: MixtureDoc,
    },
    /// Star outline rotating counterclockwise at the orbital rate.
    RotatingStar {
        n_points: usize,
        #[serde(default = "StarGeometry::default_outer")]
        outer_radius: f64,
        #[serde(default = "StarGeometry::default_inner")]
        inner_radius: f64,
        position_var: f64,
        #[serde(default = "default_velocity_var")]
        velocity_var: f64,
    },
}

/// Five-pointed star outline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StarGeometry {
    pub outer_radius: f64,
    pub inner_radius: f64,
    pub position_var: f64,
    pub velocity_var: f64,
}

impl StarGeometry {
    fn default_outer() -> f64 {
        1.0
    }

    fn default_inner() -> f64 {
        0.382
    }
}

impl Default for StarGeometry {
    fn default() -> Self {
        Self {
            outer_radius: 1.0,
            inner_radius: 0.382,
            position_var: 0.005,
            velocity_var: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    Ilqr {
        #[serde(default)]
        options: IlqrOptions,
        /// Replan every this many steps over `plan_horizon` steps; absent
        /// means a single solve over the whole run.
        #[serde(default)]
        replan_every: Option<usize>,
        #[serde(default)]
        plan_horizon: Option<usize>,
    },
    Mpc {
        #[serde(default = "default_tp")]
        t_p: usize,
        #[serde(default = "default_tc")]
        t_c: usize,
        #[serde(default)]
        qn_opts: QuasiNewtonOptions,
    },
}

fn default_tp() -> usize {
    3
}

fn default_tc() -> usize {
    1
}

impl ControllerSpec {
    pub fn mpc_config(&self) -> Option<MpcConfig> {
        match self {
            ControllerSpec::Mpc { t_p, t_c, qn_opts } => Some(MpcConfig {
                t_p: *t_p,
                t_c: *t_c,
                qn_opts: qn_opts.clone(),
            }),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ControllerSpec::Ilqr { .. } => "ilqr",
            ControllerSpec::Mpc { .. } => "mpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    #[serde(default = "SensorSpec::default_pd")]
    pub p_detect: f64,
    /// Measurement noise variance per axis (R = r_var·I).
    #[serde(default = "SensorSpec::default_r")]
    pub r_var: f64,
    #[serde(default = "SensorSpec::default_rate")]
    pub clutter_rate: f64,
    /// Observed state coordinates (H selects them).
    #[serde(default = "default_cost_dims")]
    pub observed_dims: Vec<usize>,
    /// Square observation window [low, high] on every measured axis.
    pub window: (f64, f64),
}

impl SensorSpec {
    fn default_pd() -> f64 {
        0.98
    }

    fn default_r() -> f64 {
        0.01
    }

    fn default_rate() -> f64 {
        5.0
    }
}

/// Agents entering or leaving the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationEvent {
    pub step: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmphdSpec {
    pub sensor: SensorSpec,
    #[serde(default = "GmphdSpec::default_ps")]
    pub p_survive: f64,
    pub birth: MixtureSpec,
    #[serde(default)]
    pub prune: PruneParams,
    /// Process noise variance the filter assumes (Q = q·I).
    pub filter_process_noise: f64,
    pub births: Vec<PopulationEvent>,
    #[serde(default)]
    pub deaths: Vec<PopulationEvent>,
    /// Newborn agents appear uniformly in [low, high] on the planar axes.
    pub spawn_box: (f64, f64),
    /// Covariance the controller attaches to every extracted estimate.
    pub control_position_var: f64,
    #[serde(default = "default_velocity_var")]
    pub control_velocity_var: f64,
}

impl GmphdSpec {
    fn default_ps() -> f64 {
        0.99
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimationSpec {
    Perfect,
    Gmphd(Box<GmphdSpec>),
}

fn default_cost_dims() -> Vec<usize> {
    vec![0, 1]
}

fn default_agents() -> usize {
    10
}

fn default_r_weight() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub model: ModelSpec,
    pub dt: f64,
    pub horizon_steps: usize,
    /// Per-step process noise variance (Q = q·I).
    #[serde(default = "Scenario::default_q")]
    pub process_noise: f64,
    pub initial: MixtureSpec,
    #[serde(default = "default_agents")]
    pub agents_per_intensity: usize,
    pub target: TargetSpec,
    pub distance: DistanceKind,
    #[serde(default = "default_cost_dims")]
    pub cost_dims: Vec<usize>,
    /// Control weight per input axis (R = r_weight·I).
    #[serde(default = "default_r_weight")]
    pub r_weight: f64,
    pub controller: ControllerSpec,
    pub estimation: EstimationSpec,
    pub seed: u64,
    /// Times (s) of the SVG snapshots.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

impl Scenario {
    fn default_q() -> f64 {
        dynamics::DEFAULT_PROCESS_NOISE
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn orbit(&self) -> Option<OrbitParams> {
        match &self.model {
            ModelSpec::DoubleIntegrator => None,
            ModelSpec::Cwh {
                n_freq,
                mu_grav,
                a_radius,
            } => match (n_freq, mu_grav, a_radius) {
                (Some(n), _, _) => Some(OrbitParams::from_rate(*n)),
                (None, Some(mu), Some(a)) => OrbitParams::from_mu_radius(*mu, *a).ok(),
                _ => None,
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.model {
            ModelSpec::DoubleIntegrator => 4,
            ModelSpec::Cwh { .. } => 6,
        }
    }

    /// Number of position axes (half the state).
    pub fn spatial_dim(&self) -> usize {
        self.state_dim() / 2
    }

    /// Discretized model with the scenario's process noise.
    pub fn linear_model(&self) -> Result<LinearModel> {
        let cont = match &self.model {
            ModelSpec::DoubleIntegrator => dynamics::double_integrator(),
            ModelSpec::Cwh { .. } => {
                let orbit = self
                    .orbit()
                    .ok_or_else(|| Error::invalid("model", "cwh needs n_freq or mu_grav with a_radius"))?;
                dynamics::cwh_model(&orbit)
            }
        };
        let n = cont.state_dim();
        dynamics::discretize_zoh(&cont, self.dt)?
            .with_process_noise(DMatrix::identity(n, n) * self.process_noise)
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        let nu = self.spatial_dim();
        DMatrix::identity(nu, nu) * self.r_weight
    }

    /// Time of step k in seconds.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Checks everything that can be checked without running; the first
    /// violation is returned and names the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema),
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if self.horizon_steps == 0 {
            return Err(Error::invalid("horizon_steps", "must be at least 1"));
        }
        if !(self.process_noise >= 0.0) {
            return Err(Error::invalid("process_noise", "must be >= 0"));
        }
        if !(self.r_weight > 0.0) || !self.r_weight.is_finite() {
            return Err(Error::invalid("r_weight", "must be positive"));
        }
        if let ModelSpec::Cwh { .. } = self.model {
            if self.orbit().is_none() {
                return Err(Error::invalid("model", "cwh needs n_freq or mu_grav with a_radius"));
            }
        }
        self.distance.validate()?;
        let n = self.state_dim();
        if self.cost_dims.is_empty() || self.cost_dims.iter().any(|&d| d >= n) {
            return Err(Error::invalid("cost_dims", format!("indices must lie below {n}")));
        }
        check_mixture_spec("initial", &self.initial, n)?;
        match &self.target {
            TargetSpec::Points {
                points,
                position_var,
                velocity_var,
                weight,
            } => check_points("target", points, *position_var, *velocity_var, *weight, n)?,
            TargetSpec::Mixture { mixture } => check_doc("target", mixture, n)?,
            TargetSpec::RotatingStar {
                n_points,
                outer_radius,
                inner_radius,
                position_var,
                velocity_var,
            } => {
                if *n_points == 0 {
                    return Err(Error::invalid("target.n_points", "must be at least 1"));
                }
                if !(*outer_radius > 0.0 && *inner_radius > 0.0) {
                    return Err(Error::invalid("target.outer_radius", "radii must be positive"));
                }
                check_vars("target", *position_var, *velocity_var)?;
            }
        }
        match &self.controller {
            ControllerSpec::Ilqr {
                options,
                replan_every,
                plan_horizon,
            } => {
                options.validate()?;
                if replan_every == &Some(0) {
                    return Err(Error::invalid("controller.replan_every", "must be at least 1"));
                }
                if plan_horizon == &Some(0) {
                    return Err(Error::invalid("controller.plan_horizon", "must be at least 1"));
                }
            }
            ControllerSpec::Mpc { .. } => {
                self.controller.mpc_config().expect("mpc").validate()?;
            }
        }
        if let EstimationSpec::Gmphd(g) = &self.estimation {
            let s = &g.sensor;
            if !(0.0..=1.0).contains(&s.p_detect) {
                return Err(Error::invalid("sensor.p_detect", "must lie in [0, 1]"));
            }
            if !(s.r_var > 0.0) {
                return Err(Error::invalid("sensor.r_var", "must be positive"));
            }
            if !(s.clutter_rate >= 0.0) {
                return Err(Error::invalid("sensor.clutter_rate", "must be >= 0"));
            }
            if s.observed_dims.is_empty() || s.observed_dims.iter().any(|&d| d >= n) {
                return Err(Error::invalid("sensor.observed_dims", format!("indices must lie below {n}")));
            }
            if !(s.window.1 > s.window.0) {
                return Err(Error::invalid("sensor.window", "needs low < high"));
            }
            if !(0.0..=1.0).contains(&g.p_survive) {
                return Err(Error::invalid("p_survive", "must lie in [0, 1]"));
            }
            check_mixture_spec("birth", &g.birth, n)?;
            if !(g.filter_process_noise > 0.0) {
                return Err(Error::invalid("filter_process_noise", "must be positive"));
            }
            if !(g.spawn_box.1 > g.spawn_box.0) {
                return Err(Error::invalid("spawn_box", "needs low < high"));
            }
            check_vars("control", g.control_position_var, g.control_velocity_var)?;
            let born: usize = g.births.iter().map(|e| e.count).sum();
            let died: usize = g.deaths.iter().map(|e| e.count).sum();
            if died > born {
                return Err(Error::invalid("deaths", "more deaths than births"));
            }
        }
        if self.snapshot_times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::invalid("snapshot_times", "must be >= 0"));
        }
        Ok(())
    }
}

fn check_vars(field: &str, position_var: f64, velocity_var: f64) -> Result<()> {
    if !(position_var > 0.0) || !position_var.is_finite() {
        return Err(Error::invalid(format!("{field}.position_var"), "must be positive"));
    }
    if !(velocity_var > 0.0) || !velocity_var.is_finite() {
        return Err(Error::invalid(format!("{field}.velocity_var"), "must be positive"));
    }
    Ok(())
}

fn check_points(
    field: &str,
    points: &[Vec<f64>],
    position_var: f64,
    velocity_var: f64,
    weight: f64,
    n: usize,
) -> Result<()> {
    check_vars(field, position_var, velocity_var)?;
    if !(weight >= 0.0) {
        return Err(Error::invalid(format!("{field}.weight"), "must be >= 0"));
    }
    for (i, p) in points.iter().enumerate() {
        if p.is_empty() || p.len() > n || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                format!("{field}.points[{i}]"),
                format!("needs 1..={n} finite coordinates"),
            ));
        }
    }
    Ok(())
}

fn check_doc(field: &str, doc: &MixtureDoc, n: usize) -> Result<()> {
    if doc.dim != n {
        return Err(Error::invalid(format!("{field}.mixture.dim"), format!("must be {n}")));
    }
    for (i, c) in doc.components.iter().enumerate() {
        c.to_component()
            .map_err(|e| Error::invalid(format!("{field}.mixture.components[{i}]"), e.to_string()))?;
    }
    Ok(())
}

fn check_mixture_spec(field: &str, spec: &MixtureSpec, n: usize) -> Result<()> {
    match spec {
        MixtureSpec::Mixture { mixture } => check_doc(field, mixture, n),
        MixtureSpec::Points {
            points,
            position_var,
            velocity_var,
            weight,
        } => check_points(field, points, *position_var, *velocity_var, *weight, n),
        MixtureSpec::Grid {
            per_axis,
            low,
            high,
            position_var,
            velocity_var,
            weight,
        } if *per_axis > 0 => {
            if !(high > low) {
                return Err(Error::invalid(format!("{field}.high"), "needs low < high"));
            }
            check_points(field, &[], *position_var, *velocity_var, *weight, n)
        }
        MixtureSpec::Grid { .. } => Err(Error::invalid(format!("{field}.per_axis"), "must be at least 1")),
        MixtureSpec::Uniform {
            low,
            high,
            position_var,
            velocity_var,
            weight,
            ..
        } => {
            if !(high > low) {
                return Err(Error::invalid(format!("{field}.high"), "needs low < high"));
            }
            check_points(field, &[], *position_var, *velocity_var, *weight, n)
        }
    }
}

impl MixtureSpec {
    /// Realizes the spec over an `n`-dimensional state; only `Uniform`
    /// consumes randomness.
    pub fn build<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<GaussianMixture> {
        match self {
            MixtureSpec::Mixture { mixture } => GaussianMixture::try_from(mixture.clone()),
            MixtureSpec::Points {
                points,
                position_var,
                velocity_var,
                weight,
            } => mixture_from_points(points, n, *position_var, *velocity_var, *weight),
            MixtureSpec::Grid {
                per_axis,
                low,
                high,
                position_var,
                velocity_var,
                weight,
            } => {
                let step = if *per_axis > 1 {
                    (high - low) / (*per_axis - 1) as f64
                } else {
                    0.0
                };
                let origin = if *per_axis > 1 { *low } else { 0.5 * (low + high) };
                let mut points = Vec::with_capacity(per_axis * per_axis);
                for i in 0..*per_axis {
                    for j in 0..*per_axis {
                        points.push(vec![origin + step * j as f64, origin + step * i as f64]);
                    }
                }
                mixture_from_points(&points, n, *position_var, *velocity_var, *weight)
            }
            MixtureSpec::Uniform {
                count,
                low,
                high,
                position_var,
                velocity_var,
                weight,
            } => {
                let points: Vec<Vec<f64>> = (0..*count)
                    .map(|_| vec![rng.random_range(*low..*high), rng.random_range(*low..*high)])
                    .collect();
                mixture_from_points(&points, n, *position_var, *velocity_var, *weight)
            }
        }
    }
}

/// Diagonal full-state covariance with the first half position variances.
pub fn diagonal_covariance(n: usize, position_var: f64, velocity_var: f64) -> DMatrix<f64> {
    let half = n / 2;
    DMatrix::from_fn(n, n, |i, j| {
        if i != j {
            0.0
        } else if i < half {
            position_var
        } else {
            velocity_var
        }
    })
}

/// Components at the given (possibly partial) state points.
pub fn mixture_from_points(
    points: &[Vec<f64>],
    n: usize,
    position_var: f64,
    velocity_var: f64,
    weight: f64,
) -> Result<GaussianMixture> {
    let cov = diagonal_covariance(n, position_var, velocity_var);
    let comps = points
        .iter()
        .map(|p| {
            let mut m = DVector::zeros(n);
            for (i, v) in p.iter().enumerate().take(n) {
                m[i] = *v;
            }
            GaussianComponent::new(weight, m, cov.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(n, comps)
}
