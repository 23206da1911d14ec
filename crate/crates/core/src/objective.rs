//! The swarm objective Σ uᵀRu + D(ν, ν_des) evaluated on stacked component
//! states. Distances are taken on a subset of state coordinates (the cost
//! dimensions, positions by default) and their derivatives are scattered
//! back into the full stacked state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergence::{DistanceKind, PreparedPair};
use crate::error::{Error, Result};
use crate::gmix::{GaussianComponent, GaussianMixture};
use crate::linalg;

/// How much of the distance Hessian the solvers use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Every cross-component coupling term.
    #[default]
    Full,
    /// Only per-component diagonal blocks; the gradient stays exact.
    BlockDiagonal,
}

/// Cost of one time step: control effort uᵀRu plus the distance between the
/// controlled intensity and the desired intensity at that step.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCostModel {
    /// Per-component control weight (n_u × n_u, SPD); the stacked weight is
    /// block diagonal.
    pub r_weight: DMatrix<f64>,
    pub distance: DistanceKind,
    /// Desired intensity, either over the full state or over the cost
    /// dimensions only.
    pub target: GaussianMixture,
    /// Full-state covariance of each controlled component at this step.
    pub covariances: Vec<DMatrix<f64>>,
    /// Weight of each controlled component.
    pub weights: Vec<f64>,
}

/// Stage cost with all covariance-dependent quantities factored once.
#[derive(Debug, Clone)]
pub struct PreparedStage {
    pair: PreparedPair,
    kind: DistanceKind,
    r_weight: DMatrix<f64>,
    dims: Vec<usize>,
    n_x: usize,
    n_u: usize,
    n_comp: usize,
}

/// Second-order expansion of a cost term in (x, u).
#[derive(Debug, Clone, PartialEq)]
pub struct StageExpansion {
    pub value: f64,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: BlockMatrix,
    pub luu: BlockMatrix,
    /// Mixed term ∂²l/∂u∂x; `None` means zero.
    pub lux: Option<DMatrix<f64>>,
}

/// A dense matrix or a block-diagonal one stored as its blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockMatrix {
    Dense(DMatrix<f64>),
    Blocks(Vec<DMatrix<f64>>),
}

impl BlockMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            BlockMatrix::Dense(m) => m.nrows(),
            BlockMatrix::Blocks(b) => b.iter().map(|m| m.nrows()).sum(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            BlockMatrix::Dense(m) => m.ncols(),
            BlockMatrix::Blocks(b) => b.iter().map(|m| m.ncols()).sum(),
        }
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            BlockMatrix::Dense(m) => m * v,
            BlockMatrix::Blocks(b) => {
                let mut out = DVector::zeros(self.nrows());
                let (mut r0, mut c0) = (0, 0);
                for m in b {
                    let (r, c) = m.shape();
                    out.rows_mut(r0, r).gemv(1.0, m, &v.rows(c0, c), 0.0);
                    r0 += r;
                    c0 += c;
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            BlockMatrix::Dense(m) => m.clone(),
            BlockMatrix::Blocks(b) => {
                let mut out = DMatrix::zeros(self.nrows(), self.ncols());
                let (mut r0, mut c0) = (0, 0);
                for m in b {
                    let (r, c) = m.shape();
                    out.view_mut((r0, c0), (r, c)).copy_from(m);
                    r0 += r;
                    c0 += c;
                }
                out
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            BlockMatrix::Dense(m) => m.iter().all(|v| v.is_finite()),
            BlockMatrix::Blocks(b) => b.iter().all(|m| m.iter().all(|v| v.is_finite())),
        }
    }
}

impl StageCostModel {
    pub fn n_components(&self) -> usize {
        self.covariances.len()
    }

    /// Factors every pairwise covariance of this stage.
    pub fn prepare(&self, n_x: usize, dims: &[usize]) -> Result<PreparedStage> {
        let n_comp = self.covariances.len();
        if self.weights.len() != n_comp {
            return Err(Error::DimensionMismatch {
                expected: n_comp,
                got: self.weights.len(),
            });
        }
        if dims.is_empty() || dims.iter().any(|&d| d >= n_x) {
            return Err(Error::invalid(
                "cost_dims",
                format!("must be non-empty indices below {n_x}"),
            ));
        }
        self.distance.validate()?;
        let r = &self.r_weight;
        if r.nrows() != r.ncols() || r.nrows() == 0 {
            return Err(Error::invalid("r_weight", "must be a non-empty square matrix"));
        }
        if !linalg::is_symmetric(r, 1e-12) {
            return Err(Error::NotSymmetric {
                context: "r_weight".into(),
            });
        }
        linalg::cholesky_checked(r, "r_weight")?;

        let zero = DVector::zeros(dims.len());
        let mut comps = Vec::with_capacity(n_comp);
        for (i, (p, &w)) in self.covariances.iter().zip(&self.weights).enumerate() {
            if p.shape() != (n_x, n_x) {
                return Err(Error::DimensionMismatch {
                    expected: n_x,
                    got: p.nrows(),
                });
            }
            let sub = p.select_rows(dims).select_columns(dims);
            comps.push(GaussianComponent::new(w, zero.clone(), sub).map_err(|e| {
                Error::invalid(format!("covariances[{i}]"), e.to_string())
            })?);
        }
        let f = GaussianMixture::new(dims.len(), comps)?;
        let target = if self.target.dim() == dims.len() {
            self.target.clone()
        } else if self.target.dim() == n_x {
            self.target.marginal(dims)?
        } else {
            return Err(Error::DimensionMismatch {
                expected: n_x,
                got: self.target.dim(),
            });
        };
        Ok(PreparedStage {
            pair: PreparedPair::new(&f, &target)?,
            kind: self.distance,
            r_weight: self.r_weight.clone(),
            dims: dims.to_vec(),
            n_x,
            n_u: self.r_weight.nrows(),
            n_comp,
        })
    }
}

impl PreparedStage {
    pub fn n_components(&self) -> usize {
        self.n_comp
    }

    pub fn state_dim(&self) -> usize {
        self.n_x * self.n_comp
    }

    pub fn input_dim(&self) -> usize {
        self.n_u * self.n_comp
    }

    fn check_x(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_u(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    fn cost_means(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_comp * self.dims.len());
        for i in 0..self.n_comp {
            for &d in &self.dims {
                out.push(x[i * self.n_x + d]);
            }
        }
        out
    }

    fn scatter_grad(&self, g: &DVector<f64>) -> DVector<f64> {
        let dc = self.dims.len();
        let mut out = DVector::zeros(self.state_dim());
        for i in 0..self.n_comp {
            for (r, &d) in self.dims.iter().enumerate() {
                out[i * self.n_x + d] = g[i * dc + r];
            }
        }
        out
    }

    /// D(x) alone.
    pub fn distance(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_x(x)?;
        self.pair.value(self.kind, &self.cost_means(x))
    }

    /// D(x) and its gradient in the full stacked state.
    pub fn distance_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_x(x)?;
        let (v, g) = self.pair.gradient(self.kind, &self.cost_means(x))?;
        Ok((v, self.scatter_grad(&g)))
    }

    /// uᵀRu with the block-diagonal stacked R.
    pub fn control_cost(&self, u: &DVector<f64>) -> Result<f64> {
        self.check_u(u)?;
        let mut acc = 0.0;
        for i in 0..self.n_comp {
            let ui = u.rows(i * self.n_u, self.n_u);
            acc += (ui.transpose() * &self.r_weight * ui)[(0, 0)];
        }
        Ok(acc)
    }

    /// 2Ru with the block-diagonal stacked R.
    pub fn control_gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_u(u)?;
        let mut out = DVector::zeros(u.len());
        for i in 0..self.n_comp {
            let ui = u.rows(i * self.n_u, self.n_u);
            out.rows_mut(i * self.n_u, self.n_u)
                .gemv(2.0, &self.r_weight, &ui, 0.0);
        }
        Ok(out)
    }

    pub fn stage_value(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        Ok(self.control_cost(u)? + self.distance(x)?)
    }

    /// Expansion of D(x) alone (no control term).
    pub fn distance_expansion(&self, x: &DVector<f64>, mode: HessianMode) -> Result<StageExpansion> {
        self.check_x(x)?;
        let means = self.cost_means(x);
        let dc = self.dims.len();
        let (value, grad, lxx) = match mode {
            HessianMode::Full => {
                let q = self.pair.quadratize(self.kind, &means)?;
                let n = self.state_dim();
                let mut h = DMatrix::zeros(n, n);
                for i in 0..self.n_comp {
                    for (r, &dr) in self.dims.iter().enumerate() {
                        for j in 0..self.n_comp {
                            for (c, &dcol) in self.dims.iter().enumerate() {
                                h[(i * self.n_x + dr, j * self.n_x + dcol)] =
                                    q.hess_means[(i * dc + r, j * dc + c)];
                            }
                        }
                    }
                }
                (q.value, q.grad_means, BlockMatrix::Dense(h))
            }
            HessianMode::BlockDiagonal => {
                let q = self.pair.quadratize_blocks(self.kind, &means)?;
                let blocks = q
                    .hess_blocks
                    .iter()
                    .map(|b| {
                        let mut h = DMatrix::zeros(self.n_x, self.n_x);
                        for (r, &dr) in self.dims.iter().enumerate() {
                            for (c, &dcol) in self.dims.iter().enumerate() {
                                h[(dr, dcol)] = b[(r, c)];
                            }
                        }
                        h
                    })
                    .collect();
                (q.value, q.grad_means, BlockMatrix::Blocks(blocks))
            }
        };
        let luu = match mode {
            HessianMode::Full => BlockMatrix::Dense(DMatrix::zeros(0, 0)),
            HessianMode::BlockDiagonal => BlockMatrix::Blocks(Vec::new()),
        };
        Ok(StageExpansion {
            value,
            lx: self.scatter_grad(&grad),
            lu: DVector::zeros(0),
            lxx,
            luu,
            lux: None,
        })
    }

    /// Full expansion of uᵀRu + D(x).
    pub fn expansion(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        mode: HessianMode,
    ) -> Result<StageExpansion> {
        let mut e = self.distance_expansion(x, mode)?;
        e.value += self.control_cost(u)?;
        e.lu = self.control_gradient(u)?;
        let r2 = &self.r_weight * 2.0;
        e.luu = match mode {
            HessianMode::Full => BlockMatrix::Dense(linalg::block_diag_repeat(&r2, self.n_comp)),
            HessianMode::BlockDiagonal => BlockMatrix::Blocks(vec![r2; self.n_comp]),
        };
        Ok(e)
    }
}
