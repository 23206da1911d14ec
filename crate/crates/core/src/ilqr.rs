//! Finite-horizon LQR and iterative LQR over stacked component means.
//!
//! The solver works on any [`TrajectoryCost`] paired with block-diagonal
//! linear dynamics ([`StackedDynamics`]). When every Hessian it receives is
//! block diagonal the backward pass runs one small Riccati recursion per
//! component; otherwise it works with the dense stacked matrices.

use std::borrow::Cow;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dynamics::LinearModel;
use crate::error::{Error, Result};
pub use crate::objective::{BlockMatrix, HessianMode, StageCostModel, StageExpansion};
use crate::objective::PreparedStage;
use crate::linalg;

/// x_{k+1} = A x_k + B u_k + g_k with A and B block diagonal, `copies`
/// identical blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub copies: usize,
    /// Per-step affine offsets of the full stacked state; empty means zero.
    pub offsets: Vec<DVector<f64>>,
}

impl StackedDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, copies: usize) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: b.nrows(),
            });
        }
        if copies == 0 {
            return Err(Error::invalid("copies", "must be at least 1"));
        }
        Ok(Self {
            a,
            b,
            copies,
            offsets: Vec::new(),
        })
    }

    pub fn from_model(model: &LinearModel, copies: usize) -> Result<Self> {
        Self::new(model.a_disc.clone(), model.b_disc.clone(), copies)
    }

    pub fn block_state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn block_input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows() * self.copies
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols() * self.copies
    }

    pub fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (nx, nu) = (self.block_state_dim(), self.block_input_dim());
        let mut out = DVector::zeros(self.state_dim());
        for i in 0..self.copies {
            let mut o = out.rows_mut(i * nx, nx);
            o.gemv(1.0, &self.a, &x.rows(i * nx, nx), 0.0);
            o.gemv(1.0, &self.b, &u.rows(i * nu, nu), 1.0);
        }
        if let Some(g) = self.offsets.get(k) {
            out += g;
        }
        out
    }

    pub fn a_full(&self) -> DMatrix<f64> {
        linalg::block_diag_repeat(&self.a, self.copies)
    }

    pub fn b_full(&self) -> DMatrix<f64> {
        linalg::block_diag_repeat(&self.b, self.copies)
    }
}

/// Stage and terminal costs over a fixed horizon.
pub trait TrajectoryCost {
    fn horizon(&self) -> usize;
    fn stage_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64>;
    fn terminal_value(&self, x: &DVector<f64>) -> Result<f64>;
    fn stage_expansion(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageExpansion>;
    /// Expansion of the terminal cost; `lu` and `luu` are ignored.
    fn terminal_expansion(&self, x: &DVector<f64>) -> Result<StageExpansion>;
}

/// ½xᵀQx + qᵀx + ½uᵀRu + rᵀu + uᵀN x per stage and ½xᵀQ_N x + q_Nᵀx at
/// the end.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r: DMatrix<f64>,
    pub r_lin: DVector<f64>,
    pub n_cross: DMatrix<f64>,
    pub q_final: DMatrix<f64>,
    pub q_final_lin: DVector<f64>,
    pub horizon: usize,
}

impl QuadraticCost {
    /// Pure quadratic cost without linear or cross terms.
    pub fn simple(q: DMatrix<f64>, r: DMatrix<f64>, q_final: DMatrix<f64>, horizon: usize) -> Self {
        let (nx, nu) = (q.nrows(), r.nrows());
        Self {
            q,
            q_lin: DVector::zeros(nx),
            r,
            r_lin: DVector::zeros(nu),
            n_cross: DMatrix::zeros(nu, nx),
            q_final,
            q_final_lin: DVector::zeros(nx),
            horizon,
        }
    }
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

impl TrajectoryCost for QuadraticCost {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn stage_value(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * quad(&self.q, x)
            + self.q_lin.dot(x)
            + 0.5 * quad(&self.r, u)
            + self.r_lin.dot(u)
            + u.dot(&(&self.n_cross * x)))
    }

    fn terminal_value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * quad(&self.q_final, x) + self.q_final_lin.dot(x))
    }

    fn stage_expansion(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageExpansion> {
        Ok(StageExpansion {
            value: self.stage_value(k, x, u)?,
            lx: &self.q * x + &self.q_lin + self.n_cross.transpose() * u,
            lu: &self.r * u + &self.r_lin + &self.n_cross * x,
            lxx: BlockMatrix::Dense(self.q.clone()),
            luu: BlockMatrix::Dense(self.r.clone()),
            lux: Some(self.n_cross.clone()),
        })
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> Result<StageExpansion> {
        Ok(StageExpansion {
            value: self.terminal_value(x)?,
            lx: &self.q_final * x + &self.q_final_lin,
            lu: DVector::zeros(0),
            lxx: BlockMatrix::Dense(self.q_final.clone()),
            luu: BlockMatrix::Dense(DMatrix::zeros(0, 0)),
            lux: None,
        })
    }
}

/// Result of the exact LQR recursion. The optimal cost-to-go from step k is
/// ½xᵀS_k x + s_kᵀx + c_k and the optimal control is K_k x + l_k.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub gains_k: Vec<DMatrix<f64>>,
    pub offsets_l: Vec<DVector<f64>>,
    pub s_mats: Vec<DMatrix<f64>>,
    pub s_vecs: Vec<DVector<f64>>,
    pub c_consts: Vec<f64>,
}

impl LqrSolution {
    pub fn optimal_cost(&self, x0: &DVector<f64>) -> f64 {
        0.5 * quad(&self.s_mats[0], x0) + self.s_vecs[0].dot(x0) + self.c_consts[0]
    }
}

/// Riccati recursion for a time-invariant LQ problem (one dynamics block)
/// with affine offsets.
pub fn lqr_backward(dynamics: &StackedDynamics, cost: &QuadraticCost) -> Result<LqrSolution> {
    let a = dynamics.a_full();
    let b = dynamics.b_full();
    let n = cost.horizon;
    if n == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    if a.nrows() != cost.q.nrows() || b.ncols() != cost.r.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: cost.q.nrows(),
        });
    }
    let mut s_mats = vec![DMatrix::zeros(0, 0); n + 1];
    let mut s_vecs = vec![DVector::zeros(0); n + 1];
    let mut c_consts = vec![0.0; n + 1];
    let mut gains_k = vec![DMatrix::zeros(0, 0); n];
    let mut offsets_l = vec![DVector::zeros(0); n];
    s_mats[n] = cost.q_final.clone();
    s_vecs[n] = cost.q_final_lin.clone();
    let zero_g = DVector::zeros(a.nrows());
    for k in (0..n).rev() {
        let s = s_mats[k + 1].clone();
        let s = &s;
        let g = dynamics.offsets.get(k).unwrap_or(&zero_g);
        let sg = s * g + &s_vecs[k + 1];
        let qxx = &cost.q + a.transpose() * s * &a;
        let quu = &cost.r + b.transpose() * s * &b;
        let qux = &cost.n_cross + b.transpose() * s * &a;
        let qx = &cost.q_lin + a.transpose() * &sg;
        let qu = &cost.r_lin + b.transpose() * &sg;
        let chol = Cholesky::new(quu.clone()).ok_or(Error::NonPdFailure { step: k })?;
        let kk = -chol.solve(&qux);
        let ll = -chol.solve(&qu);
        let mut s_new = &qxx + qux.transpose() * &kk;
        linalg::symmetrize(&mut s_new);
        s_mats[k] = s_new;
        s_vecs[k] = &qx + qux.transpose() * &ll;
        c_consts[k] = c_consts[k + 1] + s_vecs[k + 1].dot(g) + 0.5 * quad(s, g) + 0.5 * ll.dot(&qu);
        gains_k[k] = kk;
        offsets_l[k] = ll;
    }
    Ok(LqrSolution {
        gains_k,
        offsets_l,
        s_mats,
        s_vecs,
        c_consts,
    })
}

/// Levenberg-Marquardt state of the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegState {
    pub mu_lm: f64,
    pub mu_min: f64,
    pub mu_scale: f64,
}

impl Default for RegState {
    fn default() -> Self {
        Self {
            mu_lm: 0.0,
            mu_min: 1e-6,
            mu_scale: 10.0,
        }
    }
}

impl RegState {
    pub fn increase(&mut self) {
        self.mu_lm = (self.mu_lm * self.mu_scale).max(self.mu_min);
    }

    pub fn decrease(&mut self) {
        self.mu_lm /= 3.0;
        if self.mu_lm < self.mu_min {
            self.mu_lm = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlqrOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub c1: f64,
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_scale: f64,
    pub mu_max: f64,
    /// Line search tries α = 1, ½, …, 2^−max_halvings.
    pub max_halvings: u32,
    pub hessian_mode: HessianMode,
}

impl Default for IlqrOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            c1: 1e-4,
            mu_init: 0.0,
            mu_min: 1e-6,
            mu_scale: 4.0,
            mu_max: 1e10,
            max_halvings: 10,
            hessian_mode: HessianMode::BlockDiagonal,
        }
    }
}

impl IlqrOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol", "must be >= 0"));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::invalid("c1", "must lie in (0, 1)"));
        }
        if !(self.mu_min > 0.0 && self.mu_scale > 1.0 && self.mu_init >= 0.0 && self.mu_max > self.mu_min) {
            return Err(Error::invalid("mu", "need mu_min > 0, mu_scale > 1, mu_max > mu_min"));
        }
        Ok(())
    }
}

/// One iteration of the solver as recorded for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlqrIterRecord {
    pub iter: usize,
    pub cost: f64,
    pub mu: f64,
    /// Accepted step length; 0 when no step was accepted.
    pub alpha: f64,
    /// Actual over predicted reduction of the accepted step.
    pub z: f64,
    pub expected: f64,
    pub accepted: bool,
    /// Backward passes run in this iteration, failed ones included.
    pub backward_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlqrSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub gains_big_k: Vec<BlockMatrix>,
    pub gains_small_k: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: Vec<IlqrIterRecord>,
}

/// Feedback and feed-forward gains of one backward pass plus the two
/// coefficients of the predicted cost change.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    pub big_k: Vec<BlockMatrix>,
    pub small_k: Vec<DVector<f64>>,
    /// Σ kᵀQ_u
    pub dv1: f64,
    /// Σ ½ kᵀQ_uu k
    pub dv2: f64,
}

impl BackwardPass {
    /// Predicted change of the total cost for step length α.
    pub fn expected_change(&self, alpha: f64) -> f64 {
        alpha * self.dv1 + alpha * alpha * self.dv2
    }
}

/// Q-function coefficients of one step before the gains are formed.
#[derive(Debug, Clone, PartialEq)]
pub struct QTerms {
    pub qx: DVector<f64>,
    pub qu: DVector<f64>,
    pub qxx: DMatrix<f64>,
    pub quu: DMatrix<f64>,
    pub qux: DMatrix<f64>,
    pub quu_reg: DMatrix<f64>,
    pub qux_reg: DMatrix<f64>,
}

/// Q_x = l_x + AᵀV_x', Q_u = l_u + BᵀV_x', Q_xx = l_xx + AᵀV_xx'A and the
/// regularized Q̃_uu = l_uu + Bᵀ(V_xx' + μI)B, Q̃_ux = l_ux + Bᵀ(V_xx' + μI)A.
/// All matrices here belong to a single dynamics block.
#[allow(clippy::too_many_arguments)]
pub fn quadratize_stage(
    lx: &DVector<f64>,
    lu: &DVector<f64>,
    lxx: &DMatrix<f64>,
    luu: &DMatrix<f64>,
    lux: Option<&DMatrix<f64>>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    vx: &DVector<f64>,
    vxx: &DMatrix<f64>,
    mu: f64,
) -> QTerms {
    let vxx_a = vxx * a;
    let vxx_b = vxx * b;
    let bt_vxx_b = b.transpose() * &vxx_b;
    let bt_vxx_a = b.transpose() * &vxx_a;
    let mut qxx = lxx + a.transpose() * &vxx_a;
    linalg::symmetrize(&mut qxx);
    let mut quu = luu + &bt_vxx_b;
    let qux = match lux {
        Some(m) => m + &bt_vxx_a,
        None => bt_vxx_a.clone(),
    };
    let (mut quu_reg, qux_reg) = if mu > 0.0 {
        let btb = b.transpose() * b;
        let bta = b.transpose() * a;
        (&quu + &btb * mu, &qux + &bta * mu)
    } else {
        (quu.clone(), qux.clone())
    };
    linalg::symmetrize(&mut quu);
    linalg::symmetrize(&mut quu_reg);
    QTerms {
        qx: lx + a.transpose() * vx,
        qu: lu + b.transpose() * vx,
        qxx,
        quu,
        qux,
        quu_reg,
        qux_reg,
    }
}

/// Gains and value update of one block; returns (K, k, V_x, V_xx, kᵀQ_u, ½kᵀQ_uu k).
pub fn gains_and_value(
    q: &QTerms,
    step: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>, f64, f64)> {
    let chol: Cholesky<f64, Dyn> =
        Cholesky::new(q.quu_reg.clone()).ok_or(Error::NonPdFailure { step })?;
    let l = chol.l_dirty();
    for i in 0..l.nrows() {
        if !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite() {
            return Err(Error::NonPdFailure { step });
        }
    }
    let big_k = -chol.solve(&q.qux_reg);
    let small_k = -chol.solve(&q.qu);
    let quu_k = &q.quu * &small_k;
    let quu_big_k = &q.quu * &big_k;
    let vx = &q.qx + big_k.transpose() * &quu_k + big_k.transpose() * &q.qu + q.qux.transpose() * &small_k;
    let mut vxx = &q.qxx
        + big_k.transpose() * &quu_big_k
        + big_k.transpose() * &q.qux
        + q.qux.transpose() * &big_k;
    linalg::symmetrize(&mut vxx);
    let dv1 = small_k.dot(&q.qu);
    let dv2 = 0.5 * small_k.dot(&quu_k);
    Ok((big_k, small_k, vx, vxx, dv1, dv2))
}

fn as_dense(m: &BlockMatrix, n: usize) -> Cow<'_, DMatrix<f64>> {
    match m {
        BlockMatrix::Dense(d) if d.nrows() == n => Cow::Borrowed(d),
        BlockMatrix::Dense(d) if d.nrows() == 0 => Cow::Owned(DMatrix::zeros(n, n)),
        other => Cow::Owned(other.to_dense()),
    }
}

fn is_block_structured(e: &StageExpansion, terminal: bool) -> bool {
    matches!(e.lxx, BlockMatrix::Blocks(_))
        && (terminal || matches!(e.luu, BlockMatrix::Blocks(_)))
        && e.lux.is_none()
}

/// One backward step over `c` stacked copies of a p-state, q-input block,
/// computed in preallocated column-major buffers. Produces the same numbers
/// as [`quadratize_stage`] followed by [`gains_and_value`] on the stacked
/// block-diagonal matrices.
struct StepKernel<'a> {
    a: &'a [f64],
    b: &'a [f64],
    btb: Vec<f64>,
    bta: Vec<f64>,
    p: usize,
    q: usize,
    c: usize,
    va: Vec<f64>,
    vb: Vec<f64>,
    qxx: Vec<f64>,
    quu: Vec<f64>,
    qux: Vec<f64>,
    quu_reg: Vec<f64>,
    qux_reg: Vec<f64>,
    qx: Vec<f64>,
    qu: Vec<f64>,
    chol: Vec<f64>,
    quu_k: Vec<f64>,
    quu_big_k: Vec<f64>,
    big_k: Vec<f64>,
    small_k: Vec<f64>,
    vx: Vec<f64>,
    vxx: Vec<f64>,
}

impl<'a> StepKernel<'a> {
    fn new(a: &'a DMatrix<f64>, b: &'a DMatrix<f64>, c: usize) -> Self {
        let (p, q) = (a.nrows(), b.ncols());
        let btb = b.transpose() * b;
        let bta = b.transpose() * a;
        let (n, m) = (p * c, q * c);
        Self {
            a: a.as_slice(),
            b: b.as_slice(),
            btb: btb.as_slice().to_vec(),
            bta: bta.as_slice().to_vec(),
            p,
            q,
            c,
            va: vec![0.0; n * n],
            vb: vec![0.0; n * m],
            qxx: vec![0.0; n * n],
            quu: vec![0.0; m * m],
            qux: vec![0.0; m * n],
            quu_reg: vec![0.0; m * m],
            qux_reg: vec![0.0; m * n],
            qx: vec![0.0; n],
            qu: vec![0.0; m],
            chol: vec![0.0; m * m],
            quu_k: vec![0.0; m],
            quu_big_k: vec![0.0; m * n],
            big_k: vec![0.0; m * n],
            small_k: vec![0.0; m],
            vx: vec![0.0; n],
            vxx: vec![0.0; n * n],
        }
    }

    /// Fills `big_k`, `small_k`, `vx` and `vxx` from the stage derivatives
    /// and the next value function; returns (kᵀQ_u, ½kᵀQ_uu k).
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        lx: &[f64],
        lu: &[f64],
        lxx: &[f64],
        luu: &[f64],
        lux: Option<&[f64]>,
        vx_next: &[f64],
        vxx_next: &[f64],
        mu: f64,
        step: usize,
    ) -> Result<(f64, f64)> {
        let (p, q, c) = (self.p, self.q, self.c);
        let (n, m) = (p * c, q * c);
        let (a, b) = (self.a, self.b);

        // V'A and V'B, one column block at a time
        for j in 0..c {
            for t in 0..p {
                for r in 0..n {
                    let mut acc = 0.0;
                    for u in 0..p {
                        acc += vxx_next[r + (j * p + u) * n] * a[u + t * p];
                    }
                    self.va[r + (j * p + t) * n] = acc;
                }
            }
            for t in 0..q {
                for r in 0..n {
                    let mut acc = 0.0;
                    for u in 0..p {
                        acc += vxx_next[r + (j * p + u) * n] * b[u + t * p];
                    }
                    self.vb[r + (j * q + t) * n] = acc;
                }
            }
        }
        for i in 0..c {
            for t in 0..p {
                let row = i * p + t;
                for col in 0..n {
                    let mut acc = lxx[row + col * n];
                    for u in 0..p {
                        acc += a[u + t * p] * self.va[(i * p + u) + col * n];
                    }
                    self.qxx[row + col * n] = acc;
                }
                let mut acc = lx[row];
                for u in 0..p {
                    acc += a[u + t * p] * vx_next[i * p + u];
                }
                self.qx[row] = acc;
            }
            for t in 0..q {
                let row = i * q + t;
                for col in 0..m {
                    let mut acc = luu[row + col * m];
                    for u in 0..p {
                        acc += b[u + t * p] * self.vb[(i * p + u) + col * n];
                    }
                    self.quu[row + col * m] = acc;
                }
                for col in 0..n {
                    let mut acc = lux.map_or(0.0, |l| l[row + col * m]);
                    for u in 0..p {
                        acc += b[u + t * p] * self.va[(i * p + u) + col * n];
                    }
                    self.qux[row + col * m] = acc;
                }
                let mut acc = lu[row];
                for u in 0..p {
                    acc += b[u + t * p] * vx_next[i * p + u];
                }
                self.qu[row] = acc;
            }
        }
        symmetrize_slice(&mut self.qxx, n);
        symmetrize_slice(&mut self.quu, m);
        self.quu_reg.copy_from_slice(&self.quu);
        self.qux_reg.copy_from_slice(&self.qux);
        if mu > 0.0 {
            for i in 0..c {
                for t in 0..q {
                    for s in 0..q {
                        self.quu_reg[(i * q + t) + (i * q + s) * m] += mu * self.btb[t + s * q];
                    }
                    for s in 0..p {
                        self.qux_reg[(i * q + t) + (i * p + s) * m] += mu * self.bta[t + s * q];
                    }
                }
            }
        }

        // lower Cholesky factor of Q̃_uu
        let l = &mut self.chol;
        for j in 0..m {
            let mut d = self.quu_reg[j + j * m];
            for k in 0..j {
                d -= l[j + k * m] * l[j + k * m];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NonPdFailure { step });
            }
            let ljj = d.sqrt();
            l[j + j * m] = ljj;
            for i in j + 1..m {
                let mut s = self.quu_reg[i + j * m];
                for k in 0..j {
                    s -= l[i + k * m] * l[j + k * m];
                }
                l[i + j * m] = s / ljj;
            }
        }
        for col in 0..n {
            let x = &mut self.big_k[col * m..(col + 1) * m];
            for (xi, ri) in x.iter_mut().zip(&self.qux_reg[col * m..(col + 1) * m]) {
                *xi = -ri;
            }
            chol_solve_in_place(l, m, x);
        }
        for (xi, ri) in self.small_k.iter_mut().zip(&self.qu) {
            *xi = -ri;
        }
        chol_solve_in_place(l, m, &mut self.small_k);

        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += self.quu[i + j * m] * self.small_k[j];
            }
            self.quu_k[i] = acc;
        }
        for col in 0..n {
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += self.quu[i + j * m] * self.big_k[j + col * m];
                }
                self.quu_big_k[i + col * m] = acc;
            }
        }
        for r in 0..n {
            let mut acc = self.qx[r];
            for i in 0..m {
                acc += self.big_k[i + r * m] * (self.quu_k[i] + self.qu[i]) + self.qux[i + r * m] * self.small_k[i];
            }
            self.vx[r] = acc;
        }
        for s in 0..n {
            for r in 0..n {
                let mut acc = self.qxx[r + s * n];
                for i in 0..m {
                    acc += self.big_k[i + r * m] * (self.quu_big_k[i + s * m] + self.qux[i + s * m])
                        + self.qux[i + r * m] * self.big_k[i + s * m];
                }
                self.vxx[r + s * n] = acc;
            }
        }
        symmetrize_slice(&mut self.vxx, n);
        let dv1: f64 = self.small_k.iter().zip(&self.qu).map(|(a, b)| a * b).sum();
        let dv2: f64 = 0.5 * self.small_k.iter().zip(&self.quu_k).map(|(a, b)| a * b).sum::<f64>();
        Ok((dv1, dv2))
    }
}

fn symmetrize_slice(m: &mut [f64], n: usize) {
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (m[i + j * n] + m[j + i * n]);
            m[i + j * n] = v;
            m[j + i * n] = v;
        }
    }
}

/// Solves L Lᵀ x = rhs in place with L stored column-major in `l`.
fn chol_solve_in_place(l: &[f64], m: usize, x: &mut [f64]) {
    for i in 0..m {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i + k * m] * x[k];
        }
        x[i] = s / l[i + i * m];
    }
    for i in (0..m).rev() {
        let mut s = x[i];
        for k in i + 1..m {
            s -= l[k + i * m] * x[k];
        }
        x[i] = s / l[i + i * m];
    }
}

/// Backward pass from a terminal expansion and per-step expansions.
pub fn backward_pass(
    dynamics: &StackedDynamics,
    stages: &[StageExpansion],
    terminal: &StageExpansion,
    reg: &RegState,
) -> Result<BackwardPass> {
    let n = stages.len();
    let blocky = dynamics.copies > 1
        && is_block_structured(terminal, true)
        && stages.iter().all(|e| is_block_structured(e, false));
    let mu = reg.mu_lm;
    let mut big_k = Vec::with_capacity(n);
    let mut small_k = Vec::with_capacity(n);
    let (mut dv1, mut dv2) = (0.0, 0.0);
    let (nx, nu) = (dynamics.block_state_dim(), dynamics.block_input_dim());
    let copies = dynamics.copies;
    if blocky {
        let mut kernel = StepKernel::new(&dynamics.a, &dynamics.b, 1);
        let mut vx = terminal.lx.as_slice().to_vec();
        let mut vxx = Vec::with_capacity(copies * nx * nx);
        match &terminal.lxx {
            BlockMatrix::Blocks(b) => b.iter().for_each(|m| vxx.extend_from_slice(m.as_slice())),
            BlockMatrix::Dense(_) => unreachable!(),
        }
        for k in (0..n).rev() {
            let e = &stages[k];
            let (lxx, luu) = match (&e.lxx, &e.luu) {
                (BlockMatrix::Blocks(x), BlockMatrix::Blocks(u)) => (x, u),
                _ => unreachable!(),
            };
            let mut kb = Vec::with_capacity(copies);
            let mut kf = DVector::zeros(nu * copies);
            for i in 0..copies {
                let xs = i * nx..(i + 1) * nx;
                let us = i * nu..(i + 1) * nu;
                let ms = i * nx * nx..(i + 1) * nx * nx;
                let (d1, d2) = kernel.step(
                    &e.lx.as_slice()[xs.clone()],
                    &e.lu.as_slice()[us.clone()],
                    lxx[i].as_slice(),
                    luu[i].as_slice(),
                    None,
                    &vx[xs.clone()],
                    &vxx[ms.clone()],
                    mu,
                    k,
                )?;
                kf.as_mut_slice()[us].copy_from_slice(&kernel.small_k);
                kb.push(DMatrix::from_column_slice(nu, nx, &kernel.big_k));
                vx[xs].copy_from_slice(&kernel.vx);
                vxx[ms].copy_from_slice(&kernel.vxx);
                dv1 += d1;
                dv2 += d2;
            }
            big_k.push(BlockMatrix::Blocks(kb));
            small_k.push(kf);
        }
    } else {
        let (sx, su) = (nx * copies, nu * copies);
        let mut kernel = StepKernel::new(&dynamics.a, &dynamics.b, copies);
        let mut vx = terminal.lx.as_slice().to_vec();
        let mut vxx = as_dense(&terminal.lxx, sx).as_slice().to_vec();
        for k in (0..n).rev() {
            let e = &stages[k];
            let lxx = as_dense(&e.lxx, sx);
            let luu = as_dense(&e.luu, su);
            let (d1, d2) = kernel.step(
                e.lx.as_slice(),
                e.lu.as_slice(),
                lxx.as_slice(),
                luu.as_slice(),
                e.lux.as_ref().map(|m| m.as_slice()),
                &vx,
                &vxx,
                mu,
                k,
            )?;
            std::mem::swap(&mut vx, &mut kernel.vx);
            std::mem::swap(&mut vxx, &mut kernel.vxx);
            big_k.push(BlockMatrix::Dense(DMatrix::from_column_slice(su, sx, &kernel.big_k)));
            small_k.push(DVector::from_column_slice(&kernel.small_k));
            dv1 += d1;
            dv2 += d2;
        }
    }
    big_k.reverse();
    small_k.reverse();
    Ok(BackwardPass {
        big_k,
        small_k,
        dv1,
        dv2,
    })
}

/// Rolls out controls from x0 and returns the states and total cost.
pub fn rollout(
    dynamics: &StackedDynamics,
    cost: &dyn TrajectoryCost,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, f64)> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    let mut total = 0.0;
    for (k, u) in controls.iter().enumerate() {
        total += cost.stage_value(k, &states[k], u)?;
        let next = dynamics.step(k, &states[k], u);
        states.push(next);
    }
    total += cost.terminal_value(&states[controls.len()])?;
    Ok((states, total))
}

/// New trajectory from x̂₀ = x₀, û_k = u_k + α k_k + K_k(x̂_k − x_k).
pub fn forward_pass(
    dynamics: &StackedDynamics,
    cost: &dyn TrajectoryCost,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    pass: &BackwardPass,
    alpha: f64,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> {
    let n = controls.len();
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n);
    xs.push(states[0].clone());
    let mut total = 0.0;
    for k in 0..n {
        let dx = &xs[k] - &states[k];
        let u = &controls[k] + &pass.small_k[k] * alpha + pass.big_k[k].mul_vec(&dx);
        total += cost.stage_value(k, &xs[k], &u)?;
        let next = dynamics.step(k, &xs[k], &u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("forward pass state at step {}", k + 1)));
        }
        xs.push(next);
        us.push(u);
    }
    total += cost.terminal_value(&xs[n])?;
    if !total.is_finite() {
        return Err(Error::NonFinite("forward pass cost".into()));
    }
    Ok((xs, us, total))
}

fn expansions(
    cost: &dyn TrajectoryCost,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> Result<(Vec<StageExpansion>, StageExpansion)> {
    let stages = controls
        .iter()
        .enumerate()
        .map(|(k, u)| cost.stage_expansion(k, &states[k], u))
        .collect::<Result<Vec<_>>>()?;
    let terminal = cost.terminal_expansion(&states[controls.len()])?;
    Ok((stages, terminal))
}

/// Iterative LQR on an arbitrary trajectory cost. `u_init` defaults to zero
/// controls.
pub fn ilqr_solve_with(
    dynamics: &StackedDynamics,
    cost: &dyn TrajectoryCost,
    x0: &DVector<f64>,
    u_init: Option<Vec<DVector<f64>>>,
    opts: &IlqrOptions,
) -> Result<IlqrSolution> {
    opts.validate()?;
    let n = cost.horizon();
    if n == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    if x0.len() != dynamics.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: dynamics.state_dim(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let mut controls = u_init.unwrap_or_else(|| vec![DVector::zeros(dynamics.input_dim()); n]);
    if controls.len() != n || controls.iter().any(|u| u.len() != dynamics.input_dim()) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: controls.len(),
        });
    }
    let (mut states, mut cost_now) = rollout(dynamics, cost, x0, &controls)?;
    let mut reg = RegState {
        mu_lm: opts.mu_init,
        mu_min: opts.mu_min,
        mu_scale: opts.mu_scale,
    };
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut last_pass: Option<BackwardPass> = None;
    let mut iterations = 0;
    let (mut stages, mut terminal) = expansions(cost, &states, &controls)?;
    'outer: for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let mut backward_passes = 0;
        let pass = loop {
            backward_passes += 1;
            match backward_pass(dynamics, &stages, &terminal, &reg) {
                Ok(p) => break p,
                Err(Error::NonPdFailure { .. }) => {
                    reg.increase();
                    if reg.mu_lm > opts.mu_max {
                        break 'outer;
                    }
                }
                Err(e) => return Err(e),
            }
        };
        // nothing left to gain along the Newton direction
        if -pass.expected_change(1.0) < opts.tol * (1.0 + cost_now.abs()) && pass.dv1 <= 0.0 {
            diagnostics.push(IlqrIterRecord {
                iter,
                cost: cost_now,
                mu: reg.mu_lm,
                alpha: 0.0,
                z: 0.0,
                expected: pass.expected_change(1.0),
                accepted: false,
                backward_passes,
            });
            last_pass = Some(pass);
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=opts.max_halvings {
            let expected = pass.expected_change(alpha);
            if expected < 0.0 {
                if let Ok((xs, us, j)) = forward_pass(dynamics, cost, &states, &controls, &pass, alpha) {
                    let z = (cost_now - j) / -expected;
                    if z > opts.c1 {
                        accepted = Some((xs, us, j, z, expected));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((xs, us, j, z, expected)) => {
                let dj = cost_now - j;
                let old = cost_now;
                states = xs;
                controls = us;
                cost_now = j;
                reg.decrease();
                diagnostics.push(IlqrIterRecord {
                    iter,
                    cost: j,
                    mu: reg.mu_lm,
                    alpha,
                    z,
                    expected,
                    accepted: true,
                    backward_passes,
                });
                last_pass = Some(pass);
                if dj.abs() < opts.tol * (1.0 + old.abs()) {
                    converged = true;
                    break;
                }
                let e = expansions(cost, &states, &controls)?;
                stages = e.0;
                terminal = e.1;
            }
            None => {
                reg.increase();
                diagnostics.push(IlqrIterRecord {
                    iter,
                    cost: cost_now,
                    mu: reg.mu_lm,
                    alpha: 0.0,
                    z: 0.0,
                    expected: pass.expected_change(1.0),
                    accepted: false,
                    backward_passes,
                });
                if last_pass.is_none() {
                    last_pass = Some(pass);
                }
                if reg.mu_lm > opts.mu_max {
                    break;
                }
            }
        }
    }
    let (gains_big_k, gains_small_k) = match last_pass {
        Some(p) => (p.big_k, p.small_k),
        None => (Vec::new(), Vec::new()),
    };
    Ok(IlqrSolution {
        states,
        controls,
        gains_big_k,
        gains_small_k,
        cost: cost_now,
        iterations,
        converged,
        diagnostics,
    })
}

/// Swarm trajectory problem: every component follows the same linear model
/// and the stage costs compare the stacked means with the desired intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct IlqrProblem {
    pub model: LinearModel,
    pub n_components: usize,
    pub horizon: usize,
    /// Stacked means, component-major.
    pub x0: DVector<f64>,
    /// One entry per step 0..horizon.
    pub stage_costs: Vec<StageCostModel>,
    pub terminal_cost: StageCostModel,
    /// State coordinates the distance is evaluated on.
    pub cost_dims: Vec<usize>,
}

/// [`TrajectoryCost`] of an [`IlqrProblem`] with all stages factored.
#[derive(Debug, Clone)]
pub struct SwarmCost {
    stages: Vec<PreparedStage>,
    terminal: PreparedStage,
    mode: HessianMode,
}

impl SwarmCost {
    pub fn new(
        stages: &[StageCostModel],
        terminal: &StageCostModel,
        n_x: usize,
        cost_dims: &[usize],
        mode: HessianMode,
    ) -> Result<Self> {
        Ok(Self {
            stages: stages
                .iter()
                .map(|s| s.prepare(n_x, cost_dims))
                .collect::<Result<_>>()?,
            terminal: terminal.prepare(n_x, cost_dims)?,
            mode,
        })
    }

    pub fn from_prepared(stages: Vec<PreparedStage>, terminal: PreparedStage, mode: HessianMode) -> Self {
        Self {
            stages,
            terminal,
            mode,
        }
    }
}

impl TrajectoryCost for SwarmCost {
    fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn stage_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.stages[k].stage_value(x, u)
    }

    fn terminal_value(&self, x: &DVector<f64>) -> Result<f64> {
        self.terminal.distance(x)
    }

    fn stage_expansion(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageExpansion> {
        self.stages[k].expansion(x, u, self.mode)
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> Result<StageExpansion> {
        self.terminal.distance_expansion(x, self.mode)
    }
}

impl IlqrProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        if self.stage_costs.len() != self.horizon {
            return Err(Error::DimensionMismatch {
                expected: self.horizon,
                got: self.stage_costs.len(),
            });
        }
        let n = self.model.state_dim() * self.n_components;
        if self.x0.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.x0.len(),
            });
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("x0".into()));
        }
        Ok(())
    }

    pub fn dynamics(&self) -> Result<StackedDynamics> {
        StackedDynamics::from_model(&self.model, self.n_components)
    }

    pub fn cost(&self, mode: HessianMode) -> Result<SwarmCost> {
        SwarmCost::new(
            &self.stage_costs,
            &self.terminal_cost,
            self.model.state_dim(),
            &self.cost_dims,
            mode,
        )
    }
}

/// Solves an [`IlqrProblem`] from zero initial controls.
pub fn ilqr_solve(problem: &IlqrProblem, opts: &IlqrOptions) -> Result<IlqrSolution> {
    problem.validate()?;
    let dynamics = problem.dynamics()?;
    let cost = problem.cost(opts.hessian_mode)?;
    ilqr_solve_with(&dynamics, &cost, &problem.x0, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_riccati_by_hand() {
        let dynamics = StackedDynamics::new(scalar(1.0), scalar(1.0), 1).unwrap();
        let cost = QuadraticCost::simple(scalar(1.0), scalar(1.0), scalar(1.0), 1);
        let sol = lqr_backward(&dynamics, &cost).unwrap();
        assert!((sol.s_mats[0][(0, 0)] - 1.5).abs() < 1e-15);
        assert!((sol.gains_k[0][(0, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_cost_gives_zero_gains() {
        let dynamics = StackedDynamics::new(DMatrix::identity(2, 2), DMatrix::identity(2, 1), 1).unwrap();
        let cost = QuadraticCost::simple(DMatrix::zeros(2, 2), scalar(1.0), DMatrix::zeros(2, 2), 5);
        let sol = lqr_backward(&dynamics, &cost).unwrap();
        assert!(sol.gains_k.iter().all(|k| k.amax() == 0.0));
        assert_eq!(sol.optimal_cost(&DVector::from_vec(vec![1.0, 2.0])), 0.0);
    }

    #[test]
    fn regularization_limits() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let lx = DVector::from_vec(vec![0.3, -0.2]);
        let lu = DVector::from_vec(vec![0.5]);
        let lxx = DMatrix::identity(2, 2);
        let luu = scalar(0.01);
        let vx = DVector::from_vec(vec![1.0, 2.0]);
        let vxx = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q0 = quadratize_stage(&lx, &lu, &lxx, &luu, None, &a, &b, &vx, &vxx, 0.0);
        assert_eq!(q0.quu, q0.quu_reg);
        // no control authority
        let q = quadratize_stage(&lx, &lu, &lxx, &luu, None, &a, &DMatrix::zeros(2, 1), &vx, &vxx, 3.0);
        assert_eq!(q.qu, lu);
        assert_eq!(q.quu_reg, luu);
        // huge μ: the feedback gain tends to −(BᵀB)⁻¹BᵀA and the feed-forward to 0
        let q = quadratize_stage(&lx, &lu, &lxx, &luu, None, &a, &b, &vx, &vxx, 1e12);
        let (bk, sk, ..) = gains_and_value(&q, 0).unwrap();
        let btb = (b.transpose() * &b)[(0, 0)];
        let lim = -(b.transpose() * &a) / btb;
        assert!((bk - lim).amax() < 1e-6);
        assert!(sk.amax() < 1e-9);
    }

    #[test]
    fn step_kernel_matches_reference() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05, 0.98]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let dynamics = StackedDynamics::new(a, b, 3).unwrap();
        let (af, bf) = (dynamics.a_full(), dynamics.b_full());
        let f = |i: usize, j: usize| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4;
        let g = DMatrix::from_fn(6, 6, f);
        let vxx = &g * g.transpose() + DMatrix::identity(6, 6);
        let lxx = DMatrix::from_fn(6, 6, |i, j| f(j, i) + f(i, j));
        let luu = DMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.1 });
        let lux = DMatrix::from_fn(3, 6, |i, j| f(i + 2, j));
        let lx = DVector::from_fn(6, |i, _| f(i, 1));
        let lu = DVector::from_fn(3, |i, _| f(i, 4));
        let vx = DVector::from_fn(6, |i, _| f(i, 5));
        for mu in [0.0, 0.7] {
            let q = quadratize_stage(&lx, &lu, &lxx, &luu, Some(&lux), &af, &bf, &vx, &vxx, mu);
            let (bk, sk, v1, v2, d1, d2) = gains_and_value(&q, 0).unwrap();
            let mut kernel = StepKernel::new(&dynamics.a, &dynamics.b, 3);
            let (e1, e2) = kernel
                .step(
                    lx.as_slice(),
                    lu.as_slice(),
                    lxx.as_slice(),
                    luu.as_slice(),
                    Some(lux.as_slice()),
                    vx.as_slice(),
                    vxx.as_slice(),
                    mu,
                    0,
                )
                .unwrap();
            let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12 * (1.0 + q.abs()));
            assert!(close(&kernel.big_k, bk.as_slice()));
            assert!(close(&kernel.small_k, sk.as_slice()));
            assert!(close(&kernel.vx, v1.as_slice()));
            assert!(close(&kernel.vxx, v2.as_slice()));
            assert!((e1 - d1).abs() < 1e-12 && (e2 - d2).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_control_hessian_reports_step() {
        let dynamics = StackedDynamics::new(scalar(1.0), scalar(1.0), 1).unwrap();
        let cost = QuadraticCost::simple(scalar(1.0), scalar(1.0), scalar(1.0), 4);
        let x0 = DVector::from_element(1, 1.0);
        let u = vec![DVector::zeros(1); 4];
        let (xs, _) = rollout(&dynamics, &cost, &x0, &u).unwrap();
        let (mut stages, terminal) = expansions(&cost, &xs, &u).unwrap();
        stages[2].luu = BlockMatrix::Dense(scalar(-10.0));
        let err = backward_pass(&dynamics, &stages, &terminal, &RegState::default()).unwrap_err();
        assert_eq!(err, Error::NonPdFailure { step: 2 });
    }

    #[test]
    fn zero_step_forward_pass_is_identity() {
        let dynamics = StackedDynamics::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 1).unwrap();
        let cost = QuadraticCost::simple(DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2), 3);
        let x0 = DVector::from_vec(vec![1.0, -1.0]);
        let u = vec![DVector::from_vec(vec![0.1, 0.2]); 3];
        let (xs, j) = rollout(&dynamics, &cost, &x0, &u).unwrap();
        let pass = BackwardPass {
            big_k: vec![BlockMatrix::Dense(DMatrix::zeros(2, 2)); 3],
            small_k: vec![DVector::from_vec(vec![5.0, 5.0]); 3],
            dv1: 0.0,
            dv2: 0.0,
        };
        let (xs2, us2, j2) = forward_pass(&dynamics, &cost, &xs, &u, &pass, 0.0).unwrap();
        assert_eq!(xs, xs2);
        assert_eq!(u, us2);
        assert_eq!(j, j2);
    }

    #[test]
    fn lq_problem_solved_in_one_iteration() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05, 0.98]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let mut dynamics = StackedDynamics::new(a, b, 1).unwrap();
        dynamics.offsets = vec![DVector::from_vec(vec![0.01, -0.02]); 20];
        let mut cost = QuadraticCost::simple(DMatrix::identity(2, 2), scalar(0.1), DMatrix::identity(2, 2) * 5.0, 20);
        cost.q_lin = DVector::from_vec(vec![0.1, 0.0]);
        cost.r_lin = DVector::from_vec(vec![-0.2]);
        cost.n_cross = DMatrix::from_row_slice(1, 2, &[0.05, 0.0]);
        let x0 = DVector::from_vec(vec![1.0, 0.5]);
        let lqr = lqr_backward(&dynamics, &cost).unwrap();
        let sol = ilqr_solve_with(&dynamics, &cost, &x0, None, &IlqrOptions::default()).unwrap();
        let first = sol.diagnostics.iter().find(|d| d.accepted).unwrap();
        assert_eq!(first.iter, 0);
        assert_eq!(first.alpha, 1.0);
        let opt = lqr.optimal_cost(&x0);
        assert!((first.cost - opt).abs() <= 1e-9 * opt.abs());
        assert!(sol.converged);
    }
}
