//! Gaussian-mixture PHD filter: closed-form prediction and measurement
//! update of an intensity, component management and state extraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::LinearModel;
use crate::error::{Error, Result};
use crate::gmix::{GaussianComponent, GaussianMixture};
use crate::linalg;

/// One term of the spawn intensity β(x|ζ) = Σ w N(x; F ζ + d, Q).
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnKernel {
    pub weight: f64,
    pub f_mat: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhdModel {
    pub p_survive: f64,
    pub birth: GaussianMixture,
    pub spawn: Vec<SpawnKernel>,
    pub motion: LinearModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub p_detect: f64,
    pub h_mat: DMatrix<f64>,
    pub r_meas: DMatrix<f64>,
    /// Expected number of clutter points per scan.
    pub clutter_rate: f64,
    /// Observation window, one (low, high) interval per measurement axis.
    pub window: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneParams {
    pub trunc_thresh: f64,
    /// Squared Mahalanobis radius within which components merge.
    pub merge_dist: f64,
    pub max_components: usize,
}

impl Default for PruneParams {
    fn default() -> Self {
        Self {
            trunc_thresh: 1e-5,
            merge_dist: 4.0,
            max_components: 300,
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(name, format!("must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl PhdModel {
    pub fn validate(&self) -> Result<()> {
        check_probability("p_survive", self.p_survive)?;
        let n = self.motion.state_dim();
        if !self.birth.is_empty() && self.birth.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.birth.dim(),
            });
        }
        if !self.birth.total_mass().is_finite() {
            return Err(Error::NonFinite("birth mass".into()));
        }
        for s in &self.spawn {
            if s.f_mat.shape() != (n, n) || s.offset.len() != n || s.cov.shape() != (n, n) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.f_mat.nrows(),
                });
            }
        }
        Ok(())
    }
}

impl SensorModel {
    pub fn measurement_dim(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn window_volume(&self) -> f64 {
        self.window.iter().map(|(lo, hi)| hi - lo).product()
    }

    /// Clutter intensity κ(z) = λ_c / |window| (uniform over the window).
    pub fn clutter_intensity(&self) -> f64 {
        if self.clutter_rate == 0.0 {
            0.0
        } else {
            self.clutter_rate / self.window_volume()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("p_detect", self.p_detect)?;
        let nz = self.measurement_dim();
        if self.r_meas.shape() != (nz, nz) {
            return Err(Error::DimensionMismatch {
                expected: nz,
                got: self.r_meas.nrows(),
            });
        }
        if !linalg::is_symmetric(&self.r_meas, 1e-12) {
            return Err(Error::NotSymmetric {
                context: "r_meas".into(),
            });
        }
        linalg::cholesky_checked(&self.r_meas, "r_meas")?;
        if !(self.clutter_rate >= 0.0) || !self.clutter_rate.is_finite() {
            return Err(Error::invalid("clutter_rate", "must be finite and >= 0"));
        }
        if self.window.len() != nz || self.window.iter().any(|(lo, hi)| !(hi > lo)) {
            return Err(Error::invalid(
                "window",
                "needs one non-empty (low, high) interval per measurement axis",
            ));
        }
        Ok(())
    }
}

/// ν̄ = p_s·(motion applied to the prior) + birth + spawn. `controls[i]`
/// drives prior component i; missing entries mean zero input.
pub fn phd_predict(
    prior: &GaussianMixture,
    model: &PhdModel,
    controls: &[DVector<f64>],
) -> Result<GaussianMixture> {
    model.validate()?;
    let m = &model.motion;
    let n = m.state_dim();
    if !prior.is_empty() && prior.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: prior.dim(),
        });
    }
    let zero_u = DVector::zeros(m.input_dim());
    let mut out = Vec::with_capacity(prior.len() * (1 + model.spawn.len()) + model.birth.len());
    for (i, c) in prior.components().iter().enumerate() {
        let u = controls.get(i).unwrap_or(&zero_u);
        out.push(GaussianComponent::new(
            model.p_survive * c.weight(),
            m.propagate_mean(c.mean(), u)?,
            m.propagate_covariance(c.covariance())?,
        )?);
    }
    out.extend(model.birth.components().iter().cloned());
    for c in prior.components() {
        for s in &model.spawn {
            let mut cov = &s.cov + &s.f_mat * c.covariance() * s.f_mat.transpose();
            linalg::symmetrize(&mut cov);
            out.push(GaussianComponent::new(
                c.weight() * s.weight,
                &s.f_mat * c.mean() + &s.offset,
                cov,
            )?);
        }
    }
    GaussianMixture::new(n, out)
}

/// Per-component quantities of the Kalman-style update that do not depend
/// on the measurement.
struct UpdateTerms {
    eta: DVector<f64>,
    gain: DMatrix<f64>,
    cov: DMatrix<f64>,
    innov_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Closed-form measurement update. The output holds the missed-detection
/// copies (1 − p_d)·ν̄ first, then one block of updated components per
/// measurement, in measurement order.
pub fn phd_update(
    pred: &GaussianMixture,
    measurements: &[DVector<f64>],
    sensor: &SensorModel,
) -> Result<GaussianMixture> {
    sensor.validate()?;
    let nz = sensor.measurement_dim();
    let h = &sensor.h_mat;
    if pred.is_empty() {
        return Ok(GaussianMixture::empty(if h.ncols() > 0 { h.ncols() } else { pred.dim() }));
    }
    if h.ncols() != pred.dim() {
        return Err(Error::DimensionMismatch {
            expected: pred.dim(),
            got: h.ncols(),
        });
    }
    if let Some(z) = measurements.iter().find(|z| z.len() != nz) {
        return Err(Error::DimensionMismatch {
            expected: nz,
            got: z.len(),
        });
    }
    let pd = sensor.p_detect;
    let mut out = Vec::with_capacity(pred.len() * (1 + measurements.len()));
    for c in pred.components() {
        out.push(c.with_weight((1.0 - pd) * c.weight()));
    }
    if pd == 0.0 || measurements.is_empty() {
        return GaussianMixture::new(pred.dim(), out);
    }
    let n = pred.dim();
    let terms = pred
        .components()
        .iter()
        .map(|c| {
            let p = c.covariance();
            let mut s = h * p * h.transpose() + &sensor.r_meas;
            linalg::symmetrize(&mut s);
            let innov_chol = linalg::cholesky_checked(&s, "innovation covariance")?;
            let pht = p * h.transpose();
            let gain = innov_chol.solve(&pht.transpose()).transpose();
            let mut cov = (DMatrix::identity(n, n) - &gain * h) * p;
            linalg::symmetrize(&mut cov);
            Ok(UpdateTerms {
                eta: h * c.mean(),
                gain,
                cov,
                innov_chol,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let kappa = sensor.clutter_intensity();
    for z in measurements {
        let mut block = Vec::with_capacity(pred.len());
        let mut likelihoods = Vec::with_capacity(pred.len());
        for (c, t) in pred.components().iter().zip(&terms) {
            let innov = z - &t.eta;
            let q = linalg::gaussian_log_density(&t.innov_chol, &innov).exp();
            let w = pd * c.weight() * q;
            likelihoods.push(w);
            block.push((c.mean() + &t.gain * innov, t.cov.clone()));
        }
        let denom = kappa + likelihoods.iter().sum::<f64>();
        for ((mean, cov), w) in block.into_iter().zip(likelihoods) {
            let weight = if denom > 0.0 { w / denom } else { 0.0 };
            out.push(GaussianComponent::new(weight, mean, cov)?);
        }
    }
    GaussianMixture::new(pred.dim(), out)
}

/// Truncation, greedy moment-matched merging around the heaviest remaining
/// component, and a cap on the component count.
pub fn prune_merge(intensity: &GaussianMixture, params: &PruneParams) -> Result<GaussianMixture> {
    if !(params.trunc_thresh >= 0.0) || !(params.merge_dist >= 0.0) || params.max_components == 0 {
        return Err(Error::invalid("prune", "thresholds must be >= 0 and max_components >= 1"));
    }
    let comps = intensity.components();
    let mut remaining: Vec<usize> = (0..comps.len())
        .filter(|&i| comps[i].weight() >= params.trunc_thresh && comps[i].weight() > 0.0)
        .collect();
    let n = intensity.dim();
    let mut merged = Vec::new();
    while !remaining.is_empty() {
        // heaviest, lowest index on ties
        let mut j = remaining[0];
        for &i in &remaining {
            if comps[i].weight() > comps[j].weight() {
                j = i;
            }
        }
        let mj = comps[j].mean();
        let mut group = Vec::new();
        let mut rest = Vec::with_capacity(remaining.len());
        for &i in &remaining {
            let d = mj - comps[i].mean();
            let dist = if i == j {
                0.0
            } else {
                linalg::chol_quad_form(comps[i].cholesky()?, &d)
            };
            if dist <= params.merge_dist {
                group.push(i);
            } else {
                rest.push(i);
            }
        }
        remaining = rest;
        if group.len() == 1 {
            merged.push(comps[j].clone());
            continue;
        }
        let w: f64 = group.iter().map(|&i| comps[i].weight()).sum();
        let mut mean = DVector::zeros(n);
        for &i in &group {
            mean += comps[i].mean() * comps[i].weight();
        }
        mean /= w;
        let mut cov = DMatrix::zeros(n, n);
        for &i in &group {
            let d = comps[i].mean() - &mean;
            cov += (comps[i].covariance() + &d * d.transpose()) * comps[i].weight();
        }
        cov /= w;
        linalg::symmetrize(&mut cov);
        merged.push(GaussianComponent::new(w, mean, cov)?);
    }
    if merged.len() > params.max_components {
        // stable sort keeps the merge order among equal weights
        merged.sort_by(|a, b| b.weight().total_cmp(&a.weight()));
        merged.truncate(params.max_components);
    }
    GaussianMixture::new(n, merged)
}

/// Extracted multi-agent state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    /// round(total mass)
    pub cardinality: usize,
    pub states: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Index of the intensity component each state was read from.
    pub sources: Vec<usize>,
}

/// Components heavier than ½ each contribute round(w) copies of their mean,
/// heaviest first, up to round(total mass) states.
pub fn estimate_states(intensity: &GaussianMixture) -> StateEstimate {
    let cardinality = intensity.total_mass().round().max(0.0) as usize;
    let comps = intensity.components();
    let mut order: Vec<usize> = (0..comps.len()).filter(|&i| comps[i].weight() > 0.5).collect();
    order.sort_by(|&a, &b| comps[b].weight().total_cmp(&comps[a].weight()).then(a.cmp(&b)));
    let mut est = StateEstimate {
        cardinality,
        states: Vec::new(),
        covariances: Vec::new(),
        sources: Vec::new(),
    };
    'outer: for i in order {
        let copies = (comps[i].weight().round() as usize).max(1);
        for _ in 0..copies {
            if est.states.len() >= cardinality {
                break 'outer;
            }
            est.states.push(comps[i].mean().clone());
            est.covariances.push(comps[i].covariance().clone());
            est.sources.push(i);
        }
    }
    est
}
