//! Agent-level simulation. Intensity controls are computed on the component
//! means and each agent applies the control of the component it currently
//! belongs to, through its own noisy dynamics.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{LinearModel, OrbitParams};
use crate::error::{Error, Result};
use crate::gmix::{GaussianComponent, GaussianMixture};
use crate::gmphd::{self, PhdModel, SensorModel, StateEstimate};
use crate::ilqr::{ilqr_solve_with, IlqrIterRecord, IlqrOptions, StackedDynamics, SwarmCost};
use crate::linalg;
use crate::mpc::{self, MpcConfig, MpcStepRecord};
use crate::objective::{HessianMode, PreparedStage, StageCostModel};
use crate::scenario::{
    diagonal_covariance, mixture_from_points, ControllerSpec, EstimationSpec, GmphdSpec, Scenario,
    StarGeometry, TargetSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: usize,
    pub state: DVector<f64>,
    pub alive: bool,
    pub birth_step: usize,
    pub death_step: Option<usize>,
}

impl Agent {
    pub fn new(id: usize, state: DVector<f64>, birth_step: usize) -> Self {
        Self {
            id,
            state,
            alive: true,
            birth_step,
            death_step: None,
        }
    }

    pub fn alive_at(&self, k: usize) -> bool {
        self.birth_step <= k && self.death_step.is_none_or(|d| k < d)
    }

    /// Refreshes `alive` for step `k`.
    pub fn update_alive(&mut self, k: usize) {
        self.alive = self.alive_at(k);
    }
}

/// Index of the Mahalanobis-nearest component for every live agent; dead
/// agents map to `None`. Ties go to the lowest component index.
pub fn mahalanobis_assign(agents: &[Agent], intensities: &GaussianMixture) -> Result<Vec<Option<usize>>> {
    let nearest = MahalanobisNearest::new(intensities)?;
    agents
        .iter()
        .map(|agent| {
            if agent.alive {
                nearest.index_of(&agent.state)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Factored components for repeated nearest-component queries.
struct MahalanobisNearest<'a> {
    mixture: &'a GaussianMixture,
    chols: Vec<&'a Cholesky<f64, Dyn>>,
}

impl<'a> MahalanobisNearest<'a> {
    fn new(mixture: &'a GaussianMixture) -> Result<Self> {
        let chols = mixture
            .components()
            .iter()
            .map(|c| c.cholesky())
            .collect::<Result<_>>()?;
        Ok(Self { mixture, chols })
    }

    /// Index of the component nearest to `x`; the lowest index wins ties.
    fn index_of(&self, x: &DVector<f64>) -> Result<Option<usize>> {
        if x.len() != self.mixture.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.mixture.dim(),
                got: x.len(),
            });
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, (c, chol)) in self.mixture.components().iter().zip(&self.chols).enumerate() {
            let d2 = linalg::chol_quad_form(chol, &(x - c.mean()));
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        Ok(best.map(|(i, _)| i))
    }
}

/// Vertices of a five-pointed star with its first tip on the +y axis.
fn star_vertices(geometry: &StarGeometry) -> Vec<(f64, f64)> {
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 {
                geometry.outer_radius
            } else {
                geometry.inner_radius
            };
            let th = PI / 2.0 + k as f64 * PI / 5.0;
            (r * th.cos(), r * th.sin())
        })
        .collect()
}

/// Points equally spaced by arc length along the star outline, before rotation.
pub fn star_outline(n_points: usize, geometry: &StarGeometry) -> Vec<(f64, f64)> {
    let v = star_vertices(geometry);
    let edges: Vec<((f64, f64), (f64, f64), f64)> = (0..v.len())
        .map(|i| {
            let a = v[i];
            let b = v[(i + 1) % v.len()];
            (a, b, ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt())
        })
        .collect();
    let perimeter: f64 = edges.iter().map(|e| e.2).sum();
    let spacing = perimeter / n_points as f64;
    let mut out = Vec::with_capacity(n_points);
    let mut edge = 0;
    let mut start = 0.0;
    for i in 0..n_points {
        let s = i as f64 * spacing;
        while edge + 1 < edges.len() && s >= start + edges[edge].2 {
            start += edges[edge].2;
            edge += 1;
        }
        let (a, b, len) = edges[edge];
        let f = ((s - start) / len).clamp(0.0, 1.0);
        out.push((a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)));
    }
    out
}

/// Star targets rotated counterclockwise by n·t, with the rigid-rotation
/// velocity n·(−y, x). Every component has unit weight.
pub fn rotating_star_targets(
    n_points: usize,
    t: f64,
    orbit: &OrbitParams,
    geometry: &StarGeometry,
    state_dim: usize,
) -> Result<GaussianMixture> {
    if n_points == 0 {
        return Err(Error::invalid("n_points", "must be at least 1"));
    }
    if state_dim < 4 || state_dim % 2 != 0 {
        return Err(Error::invalid("state_dim", "needs positions and velocities of at least 2 axes"));
    }
    let n = orbit.n_freq;
    let (s, c) = (n * t).sin_cos();
    let half = state_dim / 2;
    let cov = diagonal_covariance(state_dim, geometry.position_var, geometry.velocity_var);
    let comps = star_outline(n_points, geometry)
        .into_iter()
        .map(|(x0, y0)| {
            let x = c * x0 - s * y0;
            let y = s * x0 + c * y0;
            let mut m = DVector::zeros(state_dim);
            m[0] = x;
            m[1] = y;
            m[half] = -n * y;
            m[half + 1] = n * x;
            GaussianComponent::new(1.0, m, cov.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(state_dim, comps)
}

fn sample_standard<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn lower_factor(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return Ok(m.clone());
    }
    Ok(linalg::cholesky_checked(m, context)?.l())
}

/// One scan: each live agent is detected with probability p_d and observed
/// through H with Gaussian noise; Poisson clutter is uniform in the window.
/// The returned list is shuffled. A zero `r_meas` gives noiseless detections.
pub fn generate_measurements<R: Rng + ?Sized>(
    agents: &[Agent],
    sensor: &SensorModel,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let nz = sensor.measurement_dim();
    if sensor.r_meas.shape() != (nz, nz) || sensor.window.len() != nz {
        return Err(Error::DimensionMismatch {
            expected: nz,
            got: sensor.window.len(),
        });
    }
    let l = lower_factor(&sensor.r_meas, "r_meas")?;
    let mut zs = Vec::new();
    for agent in agents.iter().filter(|a| a.alive) {
        if rng.random::<f64>() < sensor.p_detect {
            zs.push(&sensor.h_mat * &agent.state + &l * sample_standard(nz, rng));
        }
    }
    if sensor.clutter_rate > 0.0 {
        let count = Poisson::new(sensor.clutter_rate)
            .map_err(|e| Error::invalid("clutter_rate", e.to_string()))?
            .sample(rng) as usize;
        for _ in 0..count {
            zs.push(DVector::from_iterator(
                nz,
                sensor.window.iter().map(|&(lo, hi)| rng.random_range(lo..hi)),
            ));
        }
    }
    zs.shuffle(rng);
    Ok(zs)
}

/// A Gaussian component as written to the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityLog {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl IntensityLog {
    fn from_component(c: &GaussianComponent) -> Self {
        let p = c.covariance();
        Self {
            weight: c.weight(),
            mean: c.mean().iter().copied().collect(),
            cov: (0..p.nrows()).map(|i| p.row(i).iter().copied().collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLog {
    pub id: usize,
    pub state: Vec<f64>,
    /// Component whose control the agent applied at this step.
    pub component: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub t: f64,
    /// Controlled components (perfect information) or the filter posterior.
    pub intensities: Vec<IntensityLog>,
    /// Live agents.
    pub agents: Vec<AgentLog>,
    /// Desired component means.
    pub targets: Vec<Vec<f64>>,
    /// Control per controlled component applied after this step.
    pub controls: Vec<Vec<f64>>,
    pub measurements: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
    pub estimated_cardinality: Option<usize>,
    pub true_cardinality: usize,
    /// Distance term at this step plus the control effort spent after it.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlqrSolveRecord {
    pub step: usize,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    pub iterations_log: Vec<IlqrIterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub step: usize,
    pub message: String,
}

/// Wall-clock measurements, kept apart from the reproducible part of the log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub total_ms: f64,
    pub controller_ms: f64,
    pub step_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub scenario: String,
    pub controller: String,
    pub estimation: String,
    pub dt: f64,
    pub state_dim: usize,
    pub cost_dims: Vec<usize>,
    pub steps: Vec<StepLog>,
    pub ilqr_solves: Vec<IlqrSolveRecord>,
    /// MPC step records; `wallclock_ms` is also mirrored into `timing`.
    pub mpc_steps: Vec<MpcStepRecord>,
    pub failures: Vec<FailureRecord>,
    pub timing: RunTiming,
}

fn project(v: &[f64], dims: &[usize]) -> Vec<f64> {
    dims.iter().map(|&d| v[d]).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl SimLog {
    /// For every intensity, the cost-space distance from its mean to the
    /// nearest desired mean at the same step.
    pub fn errors_at(&self, step: usize) -> Vec<f64> {
        let s = &self.steps[step];
        let targets: Vec<Vec<f64>> = s.targets.iter().map(|t| project(t, &self.cost_dims)).collect();
        s.intensities
            .iter()
            .map(|c| {
                let m = project(&c.mean, &self.cost_dims);
                targets.iter().map(|t| dist(&m, t)).fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn final_errors(&self) -> Vec<f64> {
        self.errors_at(self.steps.len() - 1)
    }

    /// Earliest time after which every intensity stays within `tol` of a
    /// desired mean until the end of the run.
    pub fn settling_time(&self, tol: f64) -> Option<f64> {
        let mut first = None;
        for k in (0..self.steps.len()).rev() {
            if self.errors_at(k).iter().all(|e| *e <= tol) {
                first = Some(self.steps[k].t);
            } else {
                break;
            }
        }
        first
    }

    /// Smallest distance between two intensity means over the whole run.
    pub fn min_pairwise_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for s in &self.steps {
            let ms: Vec<Vec<f64>> = s.intensities.iter().map(|c| project(&c.mean, &self.cost_dims)).collect();
            for i in 0..ms.len() {
                for j in i + 1..ms.len() {
                    best = best.min(dist(&ms[i], &ms[j]));
                }
            }
        }
        best
    }

    /// Cost-space distance from each live agent to the nearest desired mean.
    pub fn agent_errors_at(&self, step: usize) -> Vec<f64> {
        let s = &self.steps[step];
        let targets: Vec<Vec<f64>> = s.targets.iter().map(|t| project(t, &self.cost_dims)).collect();
        s.agents
            .iter()
            .map(|a| {
                let p = project(&a.state, &self.cost_dims);
                targets.iter().map(|t| dist(&p, t)).fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }
}

const STREAM_AGENTS: u64 = 1;
const STREAM_PROCESS: u64 = 2;
const STREAM_SENSOR: u64 = 3;
const STREAM_POPULATION: u64 = 4;
const STREAM_SETUP: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Desired intensity at time `t`.
fn target_at(scenario: &Scenario, t: f64, n: usize) -> Result<GaussianMixture> {
    match &scenario.target {
        TargetSpec::Points {
            points,
            position_var,
            velocity_var,
            weight,
        } => mixture_from_points(points, n, *position_var, *velocity_var, *weight),
        TargetSpec::Mixture { mixture } => GaussianMixture::try_from(mixture.clone()),
        TargetSpec::RotatingStar {
            n_points,
            outer_radius,
            inner_radius,
            position_var,
            velocity_var,
        } => {
            let orbit = scenario.orbit().unwrap_or_else(|| OrbitParams::from_rate(0.0));
            let geometry = StarGeometry {
                outer_radius: *outer_radius,
                inner_radius: *inner_radius,
                position_var: *position_var,
                velocity_var: *velocity_var,
            };
            rotating_star_targets(*n_points, t, &orbit, &geometry, n)
        }
    }
}

fn stacked(means: &[DVector<f64>]) -> DVector<f64> {
    let n = means.first().map_or(0, |m| m.len());
    let mut x = DVector::zeros(n * means.len());
    for (i, m) in means.iter().enumerate() {
        x.rows_mut(i * n, n).copy_from(m);
    }
    x
}

fn unstack(x: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..x.len() / n).map(|i| x.rows(i * n, n).into_owned()).collect()
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Builds the prepared stage for one step of a covariance/target schedule.
fn prepare_stage(
    scenario: &Scenario,
    r: &DMatrix<f64>,
    target: &GaussianMixture,
    covariances: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
) -> Result<PreparedStage> {
    StageCostModel {
        r_weight: r.clone(),
        distance: scenario.distance,
        target: target.clone(),
        covariances,
        weights,
    }
    .prepare(scenario.state_dim(), &scenario.cost_dims)
}

/// The control law of a run, evaluated on stacked means.
enum Planner {
    Ilqr {
        options: IlqrOptions,
        every: Option<usize>,
        horizon: Option<usize>,
    },
    Mpc(MpcConfig),
}

impl Planner {
    fn from_spec(spec: &ControllerSpec) -> Self {
        match spec {
            ControllerSpec::Ilqr {
                options,
                replan_every,
                plan_horizon,
            } => Planner::Ilqr {
                options: options.clone(),
                every: *replan_every,
                horizon: *plan_horizon,
            },
            ControllerSpec::Mpc { .. } => Planner::Mpc(spec.mpc_config().expect("mpc spec")),
        }
    }

    /// Steps beyond the run horizon the stage schedule must cover.
    fn lookahead(&self) -> usize {
        match self {
            Planner::Ilqr { horizon, .. } => horizon.unwrap_or(0),
            Planner::Mpc(c) => c.t_p,
        }
    }
}

struct Recorder {
    ilqr: Vec<IlqrSolveRecord>,
    mpc: Vec<MpcStepRecord>,
    failures: Vec<FailureRecord>,
    controller_ms: f64,
}

impl Recorder {
    fn new() -> Self {
        Self {
            ilqr: Vec::new(),
            mpc: Vec::new(),
            failures: Vec::new(),
            controller_ms: 0.0,
        }
    }

    fn fail(&mut self, step: usize, e: &Error) {
        self.failures.push(FailureRecord {
            step,
            message: e.to_string(),
        });
    }
}

/// Solves ILQR on `stages[0..h]` with terminal `stages[h]`. Returns the
/// control sequence or the solver error.
fn solve_ilqr(
    dynamics: &StackedDynamics,
    stages: &[PreparedStage],
    x0: &DVector<f64>,
    warm: Option<Vec<DVector<f64>>>,
    options: &IlqrOptions,
    step: usize,
    rec: &mut Recorder,
) -> Result<Vec<DVector<f64>>> {
    let h = stages.len() - 1;
    let cost = SwarmCost::from_prepared(stages[..h].to_vec(), stages[h].clone(), options.hessian_mode);
    let sol = ilqr_solve_with(dynamics, &cost, x0, warm, options)?;
    rec.ilqr.push(IlqrSolveRecord {
        step,
        iterations: sol.iterations,
        converged: sol.converged,
        cost: sol.cost,
        iterations_log: sol.diagnostics,
    });
    Ok(sol.controls)
}

/// Runs a scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<SimLog> {
    let mut log = SimLog::for_scenario(scenario);
    run_scenario_into(scenario, &mut log)?;
    Ok(log)
}

/// Runs a scenario, appending to `log` as it goes, so that a run aborted by
/// an error still leaves every completed step in the log.
pub fn run_scenario_into(scenario: &Scenario, log: &mut SimLog) -> Result<()> {
    scenario.validate()?;
    let started = Instant::now();
    let mut rec = Recorder::new();
    let result = match &scenario.estimation {
        EstimationSpec::Perfect => run_perfect(scenario, log, &mut rec),
        EstimationSpec::Gmphd(spec) => run_gmphd(scenario, spec, log, &mut rec),
    };
    if let Err(e) = &result {
        rec.fail(log.steps.len(), e);
    }
    finish_log(log, rec);
    log.timing.total_ms = started.elapsed().as_secs_f64() * 1e3;
    result
}

impl SimLog {
    /// Empty log carrying the scenario's metadata.
    pub fn for_scenario(scenario: &Scenario) -> Self {
        SimLog {
            scenario: scenario.name.clone(),
            controller: scenario.controller.label().to_string(),
            estimation: match scenario.estimation {
                EstimationSpec::Perfect => "perfect".into(),
                EstimationSpec::Gmphd(_) => "gmphd".into(),
            },
            dt: scenario.dt,
            state_dim: scenario.state_dim(),
            cost_dims: scenario.cost_dims.clone(),
            steps: Vec::new(),
            ilqr_solves: Vec::new(),
            mpc_steps: Vec::new(),
            failures: Vec::new(),
            timing: RunTiming::default(),
        }
    }
}

fn finish_log(log: &mut SimLog, rec: Recorder) {
    log.ilqr_solves.extend(rec.ilqr);
    log.mpc_steps.extend(rec.mpc);
    log.failures.extend(rec.failures);
    log.timing.controller_ms += rec.controller_ms;
}

fn move_agents(
    agents: &mut [Agent],
    assignment: &[Option<usize>],
    controls: &[DVector<f64>],
    model: &LinearModel,
    noise: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) {
    let n = model.state_dim();
    let zero = DVector::zeros(model.input_dim());
    for (agent, comp) in agents.iter_mut().zip(assignment) {
        if !agent.alive {
            continue;
        }
        let u = comp.and_then(|i| controls.get(i)).unwrap_or(&zero);
        agent.state = &model.a_disc * &agent.state + &model.b_disc * u + noise * sample_standard(n, rng);
    }
}

fn agent_logs(agents: &[Agent], assignment: &[Option<usize>]) -> Vec<AgentLog> {
    agents
        .iter()
        .zip(assignment)
        .filter(|(a, _)| a.alive)
        .map(|(a, c)| AgentLog {
            id: a.id,
            state: to_vec(&a.state),
            component: *c,
        })
        .collect()
}

fn run_perfect(scenario: &Scenario, log: &mut SimLog, rec: &mut Recorder) -> Result<()> {
    let n = scenario.state_dim();
    let model = scenario.linear_model()?;
    let r = scenario.r_matrix();
    let horizon = scenario.horizon_steps;
    let planner = Planner::from_spec(&scenario.controller);
    let span = horizon + planner.lookahead();

    let mut setup_rng = stream(scenario.seed, STREAM_SETUP);
    let initial = scenario.initial.build(n, &mut setup_rng)?;
    let n_comp = initial.len();
    if n_comp == 0 {
        return Err(Error::invalid("initial", "needs at least one component"));
    }
    let weights: Vec<f64> = initial.components().iter().map(|c| c.weight()).collect();

    // Covariance and target schedules over the whole planning span.
    let mut cov_schedule: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(span + 1);
    cov_schedule.push(initial.components().iter().map(|c| c.covariance().clone()).collect());
    for k in 0..span {
        let next = cov_schedule[k]
            .iter()
            .map(|p| model.propagate_covariance(p))
            .collect::<Result<Vec<_>>>()?;
        cov_schedule.push(next);
    }
    let targets: Vec<GaussianMixture> = (0..=span)
        .map(|k| target_at(scenario, scenario.time(k), n))
        .collect::<Result<_>>()?;
    let stages: Vec<PreparedStage> = (0..=span)
        .map(|k| prepare_stage(scenario, &r, &targets[k], cov_schedule[k].clone(), weights.clone()))
        .collect::<Result<_>>()?;
    let dynamics = StackedDynamics::from_model(&model, n_comp)?;

    // Agents sampled from their initial component.
    let mut agent_rng = stream(scenario.seed, STREAM_AGENTS);
    let mut agents = Vec::with_capacity(n_comp * scenario.agents_per_intensity);
    for c in initial.components() {
        let l = c.cholesky()?.l();
        for _ in 0..scenario.agents_per_intensity {
            let x = c.mean() + &l * sample_standard(n, &mut agent_rng);
            agents.push(Agent::new(agents.len(), x, 0));
        }
    }
    let noise = lower_factor(&model.q_proc, "process_noise")?;
    let mut process_rng = stream(scenario.seed, STREAM_PROCESS);

    let mut means: Vec<DVector<f64>> = initial.means();
    let nu = model.input_dim();
    let zero_u = DVector::zeros(nu * n_comp);
    // Remaining planned controls starting at the current step.
    let mut plan: Vec<DVector<f64>> = Vec::new();
    let mut since_plan = 0usize;

    for k in 0..=horizon {
        let step_started = Instant::now();
        let x = stacked(&means);
        let u = if k < horizon {
            let due = match &planner {
                Planner::Ilqr { every: None, .. } => k == 0,
                Planner::Ilqr { every: Some(e), .. } => since_plan >= *e || plan.is_empty(),
                Planner::Mpc(c) => since_plan >= c.t_c || plan.is_empty(),
            };
            if due {
                let t0 = Instant::now();
                let result = match &planner {
                    Planner::Ilqr {
                        options,
                        horizon: h,
                        every,
                    } => {
                        let h = if every.is_none() { horizon } else { h.unwrap_or(horizon - k) };
                        let warm = (!plan.is_empty()).then(|| {
                            let mut w = mpc::shift_plan(&plan, since_plan);
                            w.resize(h, DVector::zeros(nu * n_comp));
                            w
                        });
                        solve_ilqr(&dynamics, &stages[k..=k + h], &x, warm, options, k, rec)
                    }
                    Planner::Mpc(config) => {
                        let warm = (!plan.is_empty()).then(|| mpc::shift_plan(&plan, since_plan));
                        let t_p = config.t_p;
                        mpc::mpc_step(&x, &stages[k + 1..=k + t_p], &dynamics, config, warm.as_deref()).map(
                            |res| {
                                rec.mpc.push(MpcStepRecord {
                                    step: k,
                                    inner_iters: res.inner_iters,
                                    fevals: res.fevals,
                                    cost: res.cost,
                                    wallclock_ms: 0.0,
                                });
                                res.plan
                            },
                        )
                    }
                };
                let elapsed = t0.elapsed().as_secs_f64() * 1e3;
                rec.controller_ms += elapsed;
                if let Some(last) = rec.mpc.last_mut().filter(|r| r.step == k) {
                    last.wallclock_ms = elapsed;
                }
                since_plan = 0;
                match result {
                    Ok(p) => plan = p,
                    Err(e) => {
                        rec.fail(k, &e);
                        plan = Vec::new();
                    }
                }
            }
            let u = plan.get(since_plan).cloned().unwrap_or_else(|| zero_u.clone());
            since_plan += 1;
            u
        } else {
            zero_u.clone()
        };

        // Controlled intensity at this step.
        let comps = means
            .iter()
            .zip(&cov_schedule[k])
            .zip(&weights)
            .map(|((m, p), &w)| GaussianComponent::new(w, m.clone(), p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let intensity = GaussianMixture::new(n, comps)?;
        let assignment = mahalanobis_assign(&agents, &intensity)?;
        let controls = unstack(&u, nu);

        let distance = stages[k].distance(&x)?;
        let effort = if k < horizon { stages[k].control_cost(&u)? } else { 0.0 };
        log.steps.push(StepLog {
            step: k,
            t: scenario.time(k),
            intensities: intensity.components().iter().map(IntensityLog::from_component).collect(),
            agents: agent_logs(&agents, &assignment),
            targets: targets[k].components().iter().map(|c| to_vec(c.mean())).collect(),
            controls: if k < horizon { controls.iter().map(to_vec).collect() } else { Vec::new() },
            measurements: Vec::new(),
            estimates: Vec::new(),
            estimated_cardinality: None,
            true_cardinality: agents.iter().filter(|a| a.alive).count(),
            cost: distance + effort,
        });

        if k < horizon {
            move_agents(&mut agents, &assignment, &controls, &model, &noise, &mut process_rng);
            means = unstack(&dynamics.step(k, &x, &u), n);
        }
        log.timing.step_ms.push(step_started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

/// Filter and sensor models of an imperfect-information run.
fn gmphd_models(scenario: &Scenario, spec: &GmphdSpec, model: &LinearModel) -> Result<(PhdModel, SensorModel)> {
    let n = scenario.state_dim();
    let mut setup_rng = stream(scenario.seed, STREAM_SETUP);
    let birth = spec.birth.build(n, &mut setup_rng)?;
    let motion = model
        .clone()
        .with_process_noise(DMatrix::identity(n, n) * spec.filter_process_noise)?;
    let phd = PhdModel {
        p_survive: spec.p_survive,
        birth,
        spawn: Vec::new(),
        motion,
    };
    let s = &spec.sensor;
    let nz = s.observed_dims.len();
    let mut h = DMatrix::zeros(nz, n);
    for (row, &d) in s.observed_dims.iter().enumerate() {
        h[(row, d)] = 1.0;
    }
    let sensor = SensorModel {
        p_detect: s.p_detect,
        h_mat: h,
        r_meas: DMatrix::identity(nz, nz) * s.r_var,
        clutter_rate: s.clutter_rate,
        window: vec![s.window; nz],
    };
    phd.validate()?;
    sensor.validate()?;
    Ok((phd, sensor))
}

/// Planar newborn state with zero velocity.
fn newborn<R: Rng + ?Sized>(n: usize, spawn_box: (f64, f64), rng: &mut R) -> DVector<f64> {
    let mut x = DVector::zeros(n);
    x[0] = rng.random_range(spawn_box.0..spawn_box.1);
    x[1] = rng.random_range(spawn_box.0..spawn_box.1);
    x
}

fn run_gmphd(scenario: &Scenario, spec: &GmphdSpec, log: &mut SimLog, rec: &mut Recorder) -> Result<()> {
    let n = scenario.state_dim();
    let model = scenario.linear_model()?;
    let r = scenario.r_matrix();
    let horizon = scenario.horizon_steps;
    let nu = model.input_dim();
    let (phd_model, sensor) = gmphd_models(scenario, spec, &model)?;
    let (options, plan_h) = match &scenario.controller {
        ControllerSpec::Ilqr {
            options, plan_horizon, ..
        } => (options.clone(), plan_horizon.unwrap_or(10)),
        ControllerSpec::Mpc { .. } => {
            return Err(Error::invalid(
                "controller",
                "imperfect-information runs use the ilqr controller",
            ))
        }
    };
    let options = IlqrOptions {
        hessian_mode: HessianMode::BlockDiagonal,
        ..options
    };

    let targets: Vec<GaussianMixture> = (0..=horizon + plan_h)
        .map(|k| target_at(scenario, scenario.time(k), n))
        .collect::<Result<_>>()?;
    let control_cov = diagonal_covariance(n, spec.control_position_var, spec.control_velocity_var);
    let mut cov_schedule = vec![control_cov.clone()];
    for k in 0..plan_h {
        let next = model.propagate_covariance(&cov_schedule[k])?;
        cov_schedule.push(next);
    }

    let mut setup_rng = stream(scenario.seed, STREAM_SETUP);
    let mut posterior = scenario.initial.build(n, &mut setup_rng)?;
    let mut agents: Vec<Agent> = Vec::new();
    let mut population_rng = stream(scenario.seed, STREAM_POPULATION);
    let mut sensor_rng = stream(scenario.seed, STREAM_SENSOR);
    let mut process_rng = stream(scenario.seed, STREAM_PROCESS);
    let noise = lower_factor(&model.q_proc, "process_noise")?;

    let mut filter_controls: Vec<DVector<f64>> = Vec::new();

    for k in 0..=horizon {
        let step_started = Instant::now();
        for event in spec.births.iter().filter(|e| e.step == k) {
            for _ in 0..event.count {
                let x = newborn(n, spec.spawn_box, &mut population_rng);
                agents.push(Agent::new(agents.len(), x, k));
            }
        }
        for event in spec.deaths.iter().filter(|e| e.step == k) {
            let mut alive: Vec<usize> = (0..agents.len()).filter(|&i| agents[i].alive_at(k)).collect();
            alive.shuffle(&mut population_rng);
            for &i in alive.iter().take(event.count) {
                agents[i].death_step = Some(k);
            }
        }
        for a in agents.iter_mut() {
            a.update_alive(k);
        }

        // Filter recursion.
        let zs = generate_measurements(&agents, &sensor, &mut sensor_rng)?;
        let predicted = if k == 0 {
            let mut p = posterior.clone();
            p.extend(phd_model.birth.clone())?;
            p
        } else {
            gmphd::phd_predict(&posterior, &phd_model, &filter_controls)?
        };
        let updated = gmphd::phd_update(&predicted, &zs, &sensor)?;
        posterior = gmphd::prune_merge(&updated, &spec.prune)?;
        let estimate: StateEstimate = gmphd::estimate_states(&posterior);

        // Estimates become unit-weight components of the controlled intensity.
        let n_est = estimate.states.len();
        let mut controls: Vec<DVector<f64>> = vec![DVector::zeros(nu); n_est];
        let mut stage_cost = 0.0;
        if n_est > 0 && k < horizon {
            let t0 = Instant::now();
            let h = plan_h.min(horizon - k).max(1);
            let x0 = stacked(&estimate.states);
            let result = (|| -> Result<Vec<DVector<f64>>> {
                let dynamics = StackedDynamics::from_model(&model, n_est)?;
                let stages = (0..=h)
                    .map(|j| {
                        prepare_stage(
                            scenario,
                            &r,
                            &targets[k + j],
                            vec![cov_schedule[j].clone(); n_est],
                            vec![1.0; n_est],
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                stage_cost = stages[0].distance(&x0)?;
                solve_ilqr(&dynamics, &stages, &x0, None, &options, k, rec)
            })();
            rec.controller_ms += t0.elapsed().as_secs_f64() * 1e3;
            match result {
                Ok(plan) => {
                    controls = unstack(&plan[0], nu);
                    stage_cost += plan[0].norm_squared() * scenario.r_weight;
                }
                Err(e) => rec.fail(k, &e),
            }
        }

        // Agents follow the Mahalanobis-nearest estimate.
        let control_mixture = GaussianMixture::new(
            n,
            estimate
                .states
                .iter()
                .map(|m| GaussianComponent::new(1.0, m.clone(), control_cov.clone()))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let assignment = if n_est > 0 {
            mahalanobis_assign(&agents, &control_mixture)?
        } else {
            vec![None; agents.len()]
        };
        // The filter predicts each posterior component with the control its
        // agents receive, i.e. that of the Mahalanobis-nearest estimate.
        filter_controls = if n_est > 0 {
            let nearest = MahalanobisNearest::new(&control_mixture)?;
            posterior
                .components()
                .iter()
                .map(|c| Ok(nearest.index_of(c.mean())?.map_or_else(|| DVector::zeros(nu), |i| controls[i].clone())))
                .collect::<Result<_>>()?
        } else {
            vec![DVector::zeros(nu); posterior.len()]
        };

        log.steps.push(StepLog {
            step: k,
            t: scenario.time(k),
            intensities: posterior.components().iter().map(IntensityLog::from_component).collect(),
            agents: agent_logs(&agents, &assignment),
            targets: targets[k].components().iter().map(|c| to_vec(c.mean())).collect(),
            controls: if k < horizon { controls.iter().map(to_vec).collect() } else { Vec::new() },
            measurements: zs.iter().map(to_vec).collect(),
            estimates: estimate.states.iter().map(to_vec).collect(),
            estimated_cardinality: Some(estimate.cardinality),
            true_cardinality: agents.iter().filter(|a| a.alive).count(),
            cost: stage_cost,
        });

        if k < horizon {
            move_agents(&mut agents, &assignment, &controls, &model, &noise, &mut process_rng);
        }
        log.timing.step_ms.push(step_started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(m: &[f64], p: DMatrix<f64>) -> GaussianComponent {
        GaussianComponent::new(1.0, DVector::from_column_slice(m), p).unwrap()
    }

    fn agent_at(id: usize, x: &[f64]) -> Agent {
        Agent::new(id, DVector::from_column_slice(x), 0)
    }

    #[test]
    fn identity_metric_assigns_nearest_mean() {
        let mix = GaussianMixture::new(
            2,
            vec![comp(&[0.0, 0.0], DMatrix::identity(2, 2)), comp(&[3.0, 0.0], DMatrix::identity(2, 2))],
        )
        .unwrap();
        let agents = vec![agent_at(0, &[1.4, 0.0]), agent_at(1, &[1.6, 1.0]), agent_at(2, &[3.0, 0.0])];
        assert_eq!(mahalanobis_assign(&agents, &mix).unwrap(), vec![Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn anisotropic_covariance_overrides_euclidean() {
        // Point (0, 2): Euclidean distance 2 to A and ~2.24 to B, but B is
        // stretched along y so its Mahalanobis distance is smaller.
        let a = comp(&[0.0, 0.0], DMatrix::identity(2, 2));
        let b = comp(&[1.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 25.0]));
        let x = DVector::from_vec(vec![0.0, 2.0]);
        let d_a = (x.clone() - a.mean()).norm();
        let d_b = (x.clone() - b.mean()).norm();
        assert!(d_a < d_b);
        // Squared Mahalanobis: A gives 4, B gives 1 + 4/25.
        let mix = GaussianMixture::new(2, vec![a, b]).unwrap();
        let agents = vec![agent_at(0, &[0.0, 2.0])];
        assert_eq!(mahalanobis_assign(&agents, &mix).unwrap(), vec![Some(1)]);
    }

    #[test]
    fn ties_and_dead_agents() {
        let mix = GaussianMixture::new(
            1,
            vec![comp(&[-1.0], DMatrix::identity(1, 1)), comp(&[1.0], DMatrix::identity(1, 1))],
        )
        .unwrap();
        let mut dead = agent_at(1, &[5.0]);
        dead.death_step = Some(0);
        dead.update_alive(0);
        let agents = vec![agent_at(0, &[0.0]), dead];
        assert_eq!(mahalanobis_assign(&agents, &mix).unwrap(), vec![Some(0), None]);
    }

    #[test]
    fn star_has_tip_on_y_axis_and_uniform_mass() {
        let g = StarGeometry::default();
        let pts = star_outline(77, &g);
        assert_eq!(pts.len(), 77);
        assert!(pts[0].0.abs() < 1e-15 && (pts[0].1 - 1.0).abs() < 1e-15);
        let orbit = OrbitParams::from_rate(0.00110678);
        let m = rotating_star_targets(77, 0.0, &orbit, &g, 6).unwrap();
        assert!((m.total_mass() - 77.0).abs() < 1e-12);
    }

    #[test]
    fn star_full_revolution_is_periodic() {
        let g = StarGeometry::default();
        let orbit = OrbitParams::from_rate(0.00110678);
        let a = rotating_star_targets(77, 0.0, &orbit, &g, 4).unwrap();
        let b = rotating_star_targets(77, 2.0 * PI / orbit.n_freq, &orbit, &g, 4).unwrap();
        for (x, y) in a.components().iter().zip(b.components()) {
            assert!((x.mean() - y.mean()).amax() <= 1e-9);
        }
    }

    #[test]
    fn star_static_without_rotation() {
        let g = StarGeometry::default();
        let orbit = OrbitParams::from_rate(0.0);
        let a = rotating_star_targets(12, 0.0, &orbit, &g, 4).unwrap();
        let b = rotating_star_targets(12, 1234.5, &orbit, &g, 4).unwrap();
        assert_eq!(a, b);
    }

    fn sensor(p_detect: f64, clutter_rate: f64, r: f64) -> SensorModel {
        SensorModel {
            p_detect,
            h_mat: DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            r_meas: DMatrix::identity(2, 2) * r,
            clutter_rate,
            window: vec![(-2.0, 2.0); 2],
        }
    }

    #[test]
    fn perfect_sensor_sees_every_agent_exactly() {
        let agents: Vec<Agent> = (0..5).map(|i| agent_at(i, &[i as f64 * 0.1, -0.2, 1.0, 1.0])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zs = generate_measurements(&agents, &sensor(1.0, 0.0, 0.0), &mut rng).unwrap();
        let mut got: Vec<(f64, f64)> = zs.iter().map(|z| (z[0], z[1])).collect();
        got.sort_by(|a, b| a.0.total_cmp(&b.0));
        let want: Vec<(f64, f64)> = (0..5).map(|i| (i as f64 * 0.1, -0.2)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn blind_sensor_without_clutter_is_empty() {
        let agents = vec![agent_at(0, &[0.0, 0.0, 0.0, 0.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_measurements(&agents, &sensor(0.0, 0.0, 0.01), &mut rng)
            .unwrap()
            .is_empty());
    }
}
