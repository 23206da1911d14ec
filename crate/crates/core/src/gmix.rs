//! Gaussian-mixture intensities.
//!
//! A mixture's weights sum to the expected number of agents, not to one.
//! Mixtures serialize to `{dim, components: [{w, mean, cov}]}`.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_checked};

/// Relative symmetry tolerance accepted for covariances.
const SYMMETRY_TOL: f64 = 1e-12;

/// One weighted Gaussian term of an intensity.
#[derive(Debug)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: OnceLock<Cholesky<f64, Dyn>>,
}

impl Clone for GaussianComponent {
    fn clone(&self) -> Self {
        let chol = OnceLock::new();
        if let Some(c) = self.chol.get() {
            let _ = chol.set(c.clone());
        }
        Self {
            weight: self.weight,
            mean: self.mean.clone(),
            covariance: self.covariance.clone(),
            chol,
        }
    }
}

impl PartialEq for GaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight
            && self.mean == other.mean
            && self.covariance == other.covariance
    }
}

impl GaussianComponent {
    /// Builds a validated component. The covariance must be symmetric and
    /// positive definite; it is factored eagerly.
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let c = Self::new_unfactored(weight, mean, covariance)?;
        c.cholesky()?;
        Ok(c)
    }

    fn new_unfactored(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::invalid("weight", format!("must be finite and >= 0, got {weight}")));
        }
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: covariance.nrows(),
            });
        }
        if !linalg::is_symmetric(&covariance, SYMMETRY_TOL) {
            return Err(Error::NotSymmetric {
                context: "component covariance".into(),
            });
        }
        Ok(Self {
            weight,
            mean,
            covariance,
            chol: OnceLock::new(),
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn set_weight(&mut self, weight: f64) {
        self.weight = weight;
    }

    pub fn set_mean(&mut self, mean: DVector<f64>) {
        assert_eq!(mean.len(), self.mean.len(), "mean dimension changed");
        self.mean = mean;
    }

    /// Replaces the covariance; the cached factorization is dropped.
    pub fn set_covariance(&mut self, covariance: DMatrix<f64>) -> Result<()> {
        let c = Self::new(self.weight, self.mean.clone(), covariance)?;
        *self = c;
        Ok(())
    }

    pub fn with_weight(&self, weight: f64) -> Self {
        let mut c = self.clone();
        c.weight = weight;
        c
    }

    /// Cached Cholesky factor of the covariance.
    pub fn cholesky(&self) -> Result<&Cholesky<f64, Dyn>> {
        if let Some(c) = self.chol.get() {
            return Ok(c);
        }
        let c = cholesky_checked(&self.covariance, "component covariance")?;
        Ok(self.chol.get_or_init(|| c))
    }

    /// N(x; m, P), without the weight.
    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let chol = self.cholesky()?;
        Ok(linalg::gaussian_log_density(chol, &(x - &self.mean)).exp())
    }

    /// Marginal over the listed state indices.
    pub fn marginal(&self, dims: &[usize]) -> Result<Self> {
        let n = self.dim();
        if let Some(&bad) = dims.iter().find(|&&d| d >= n) {
            return Err(Error::invalid("dims", format!("index {bad} out of range for dim {n}")));
        }
        let mean = DVector::from_iterator(dims.len(), dims.iter().map(|&d| self.mean[d]));
        let cov = DMatrix::from_fn(dims.len(), dims.len(), |i, j| {
            self.covariance[(dims[i], dims[j])]
        });
        Self::new(self.weight, mean, cov)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

/// N(a.mean; b.mean, a.cov + b.cov): the integral of the product of the two
/// unit-weight densities.
pub fn cross_likelihood(a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    Ok(log_cross_likelihood(a, b)?.exp())
}

/// ln N(a.mean; b.mean, a.cov + b.cov).
pub fn log_cross_likelihood(a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    // summed in a fixed order so that (a, b) and (b, a) agree bit for bit
    let (lo, hi) = if a_before_b(a, b) { (a, b) } else { (b, a) };
    let sum = &lo.covariance + &hi.covariance;
    let chol = cholesky_checked(&sum, "summed covariance")?;
    let delta = &lo.mean - &hi.mean;
    Ok(linalg::gaussian_log_density(&chol, &delta))
}

fn a_before_b(a: &GaussianComponent, b: &GaussianComponent) -> bool {
    for (x, y) in a.mean.iter().zip(b.mean.iter()) {
        if x != y {
            return x < y;
        }
    }
    for (x, y) in a.covariance.iter().zip(b.covariance.iter()) {
        if x != y {
            return x < y;
        }
    }
    true
}

/// Weighted sum of Gaussian components.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            components: Vec::new(),
        }
    }

    pub fn new(dim: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        for c in &components {
            check_dim(dim, c.dim())?;
        }
        Ok(Self { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [GaussianComponent] {
        &mut self.components
    }

    pub fn into_components(self) -> Vec<GaussianComponent> {
        self.components
    }

    pub fn push(&mut self, c: GaussianComponent) -> Result<()> {
        check_dim(self.dim, c.dim())?;
        self.components.push(c);
        Ok(())
    }

    pub fn extend(&mut self, other: GaussianMixture) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        self.components.extend(other.components);
        Ok(())
    }

    /// Expected cardinality.
    pub fn total_mass(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| c.with_weight(c.weight * factor))
            .collect();
        Self {
            dim: self.dim,
            components,
        }
    }

    pub fn marginal(&self, dims: &[usize]) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| c.marginal(dims))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims.len(), components)
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    /// Σ_i w_i N(x; m_i, P_i).
    pub fn eval_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight * c.density(x)?;
        }
        Ok(acc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MixtureDoc::from(self)).expect("mixture serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MixtureDoc =
            serde_json::from_str(s).map_err(|e| Error::Scenario(format!("mixture json: {e}")))?;
        doc.try_into()
    }
}

/// ⟨f, g⟩ = Σ_j Σ_i w_g^j w_f^i N(m_g^j; m_f^i, P_f^i + P_g^j).
pub fn inner_product(f: &GaussianMixture, g: &GaussianMixture) -> Result<f64> {
    check_dim(f.dim, g.dim)?;
    let mut acc = 0.0;
    for gj in &g.components {
        for fi in &f.components {
            acc += gj.weight * fi.weight * cross_likelihood(fi, gj)?;
        }
    }
    Ok(acc)
}

/// Serialized form of a single component.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentDoc {
    pub w: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Serialized form of a mixture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixtureDoc {
    pub dim: usize,
    pub components: Vec<ComponentDoc>,
}

impl From<&GaussianComponent> for ComponentDoc {
    fn from(c: &GaussianComponent) -> Self {
        let n = c.dim();
        Self {
            w: c.weight,
            mean: c.mean.iter().copied().collect(),
            cov: (0..n)
                .map(|i| (0..n).map(|j| c.covariance[(i, j)]).collect())
                .collect(),
        }
    }
}

impl From<&GaussianMixture> for MixtureDoc {
    fn from(m: &GaussianMixture) -> Self {
        Self {
            dim: m.dim,
            components: m.components.iter().map(ComponentDoc::from).collect(),
        }
    }
}

impl ComponentDoc {
    pub fn to_component(&self) -> Result<GaussianComponent> {
        let n = self.mean.len();
        if self.cov.len() != n || self.cov.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.cov.len(),
            });
        }
        let cov = DMatrix::from_fn(n, n, |i, j| self.cov[i][j]);
        GaussianComponent::new(self.w, DVector::from_vec(self.mean.clone()), cov)
    }
}

impl TryFrom<MixtureDoc> for GaussianMixture {
    type Error = Error;

    fn try_from(doc: MixtureDoc) -> Result<Self> {
        let mut components = Vec::with_capacity(doc.components.len());
        for (i, c) in doc.components.iter().enumerate() {
            components.push(c.to_component().map_err(|e| {
                Error::Scenario(format!("component {i}: {e}"))
            })?);
        }
        GaussianMixture::new(doc.dim, components)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn comp1(w: f64, m: f64, p: f64) -> GaussianComponent {
        GaussianComponent::new(w, DVector::from_element(1, m), DMatrix::from_element(1, 1, p))
            .unwrap()
    }

    #[test]
    fn standard_normal_at_mean() {
        let mix = GaussianMixture::new(1, vec![comp1(1.0, 0.0, 1.0)]).unwrap();
        let v = mix.eval_density(&DVector::from_element(1, 0.0)).unwrap();
        assert_relative_eq!(v, 0.398_942_280_401_432_7, max_relative = 1e-14);
    }

    #[test]
    fn empty_mixture_is_zero() {
        let mix = GaussianMixture::empty(3);
        assert_eq!(mix.eval_density(&DVector::from_element(3, 1.5)).unwrap(), 0.0);
        assert_eq!(mix.total_mass(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mix = GaussianMixture::new(1, vec![comp1(1.0, 0.0, 1.0)]).unwrap();
        assert!(matches!(
            mix.eval_density(&DVector::from_element(2, 0.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_spd_covariance_rejected() {
        let r = GaussianComponent::new(
            1.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        );
        assert!(matches!(r, Err(Error::NotPositiveDefinite { .. })));
        let r = GaussianComponent::new(
            1.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]),
        );
        assert!(matches!(r, Err(Error::NotSymmetric { .. })));
        assert!(GaussianComponent::new(-1.0, DVector::zeros(1), DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn cross_likelihood_examples() {
        let a = comp1(1.0, 0.0, 0.5);
        let b = comp1(1.0, 0.0, 0.5);
        assert_relative_eq!(cross_likelihood(&a, &b).unwrap(), 0.398_942_280_401_432_7, max_relative = 1e-14);
        let a = comp1(1.0, 2.0, 0.5);
        let expected = 0.398_942_280_401_432_7 * (-2.0f64).exp();
        assert_relative_eq!(cross_likelihood(&a, &b).unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(expected, 0.053_990_966_513_188, max_relative = 1e-12);
    }

    #[test]
    fn inner_product_examples() {
        let f = GaussianMixture::new(1, vec![comp1(1.0, 0.0, 0.5)]).unwrap();
        assert_relative_eq!(inner_product(&f, &f).unwrap(), 0.398_942_280_401_432_7, max_relative = 1e-14);
        let g = GaussianMixture::new(1, vec![comp1(0.0, 1.0, 0.3), comp1(0.0, -1.0, 0.2)]).unwrap();
        assert_eq!(inner_product(&f, &g).unwrap(), 0.0);
    }

    #[test]
    fn set_covariance_refactors() {
        let mut c = comp1(1.0, 0.0, 1.0);
        let d0 = c.density(&DVector::zeros(1)).unwrap();
        c.set_covariance(DMatrix::from_element(1, 1, 4.0)).unwrap();
        let d1 = c.density(&DVector::zeros(1)).unwrap();
        assert_relative_eq!(d0 / d1, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn json_round_trip() {
        let mix = GaussianMixture::new(
            2,
            vec![GaussianComponent::new(
                0.7,
                DVector::from_vec(vec![1.0, -2.0]),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            )
            .unwrap()],
        )
        .unwrap();
        let s = mix.to_json();
        assert!(s.contains("\"components\"") && s.contains("\"cov\""));
        assert_eq!(GaussianMixture::from_json(&s).unwrap(), mix);
    }

    #[test]
    fn marginal_selects_dims() {
        let c = GaussianComponent::new(
            2.0,
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.2, 0.1, 2.0, 0.3, 0.2, 0.3, 3.0]),
        )
        .unwrap();
        let m = c.marginal(&[0, 2]).unwrap();
        assert_eq!(m.mean().as_slice(), &[1.0, 3.0]);
        assert_eq!(m.covariance()[(0, 1)], 0.2);
        assert_eq!(m.weight(), 2.0);
    }
}
