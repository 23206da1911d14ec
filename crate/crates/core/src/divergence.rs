//! Closed-form distances between Gaussian-mixture intensities and their
//! derivatives with respect to the means of the first (controlled) mixture.
//!
//! Every distance is assembled from three pairwise sums: the self terms
//! ⟨f,f⟩ and ⟨g,g⟩ and the cross term ⟨f,g⟩, each a weighted sum of
//! Gaussian cross-likelihoods N(m_a; m_b, P_a + P_b). The quadratic variant
//! adds −α Σ w_g w_f ln N(m_g; m_f, P_g + P_f).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmix::GaussianMixture;
use crate::linalg::{LN_2PI, PIVOT_RATIO_MIN};

pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceKind {
    CauchySchwarz,
    L2,
    L2Quadratic {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl DistanceKind {
    pub fn l2_quadratic(alpha: f64) -> Self {
        DistanceKind::L2Quadratic { alpha }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            DistanceKind::L2Quadratic { alpha } => *alpha,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistanceKind::L2Quadratic { alpha } if !(*alpha >= 0.0) || !alpha.is_finite() => Err(
                Error::invalid("alpha", format!("must be finite and >= 0, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Value, gradient and Hessian of a distance with respect to the stacked
/// means of the controlled mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct CostQuadratization {
    pub value: f64,
    pub grad_means: DVector<f64>,
    pub hess_means: DMatrix<f64>,
}

/// Value, gradient and the diagonal per-component blocks of the Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuadratization {
    pub value: f64,
    pub grad_means: DVector<f64>,
    pub hess_blocks: Vec<DMatrix<f64>>,
}

/// Where Hessian contributions go. Block storage drops every entry that
/// couples two different components.
enum HessSink<'a> {
    Dense { m: &'a mut DMatrix<f64>, d: usize },
    Blocks { b: &'a mut [DMatrix<f64>] },
}

impl HessSink<'_> {
    #[inline]
    fn add(&mut self, bi: usize, bj: usize, r: usize, c: usize, v: f64) {
        match self {
            HessSink::Dense { m, d } => m[(bi * *d + r, bj * *d + c)] += v,
            HessSink::Blocks { b } => {
                if bi == bj {
                    b[bi][(r, c)] += v;
                }
            }
        }
    }

    /// Adds `scale`·v·vᵀ.
    fn add_outer(&mut self, v: &DVector<f64>, scale: f64) {
        match self {
            HessSink::Dense { m, .. } => m.ger(scale, v, v, 1.0),
            HessSink::Blocks { b } => {
                let d = b.first().map_or(0, |m| m.nrows());
                for (i, blk) in b.iter_mut().enumerate() {
                    let vi = v.rows(i * d, d);
                    blk.ger(scale, &vi, &vi, 1.0);
                }
            }
        }
    }
}

/// Precomputed inverse and normalizer of a summed covariance.
#[derive(Debug, Clone)]
struct PairKernel {
    inv: Vec<f64>,
    /// −½ (d ln 2π + ln det S)
    log_norm: f64,
}

impl PairKernel {
    fn new(sum: &[f64], d: usize) -> Result<Self> {
        let (inv, log_det) = small_spd_inverse(sum, d)?;
        Ok(Self {
            inv,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    /// Returns (ln N(δ; 0, S), S⁻¹δ).
    #[inline]
    fn eval(&self, delta: &[f64], d: usize, g: &mut [f64]) -> f64 {
        let mut q = 0.0;
        for r in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += self.inv[r * d + c] * delta[c];
            }
            g[r] = s;
            q += s * delta[r];
        }
        self.log_norm - 0.5 * q
    }
}

/// Cholesky-based inverse of a small row-major SPD matrix, with the same
/// pivot-ratio rejection as [`crate::linalg::cholesky_checked`].
fn small_spd_inverse(a: &[f64], d: usize) -> Result<(Vec<f64>, f64)> {
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if !(s > 0.0) {
            return Err(Error::not_pd("summed covariance"));
        }
        let ljj = s.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    let pivots: Vec<f64> = (0..d).map(|i| l[i * d + i] * l[i * d + i]).collect();
    let hi = pivots.iter().cloned().fold(0.0, f64::max);
    let lo = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo < PIVOT_RATIO_MIN * hi {
        return Err(Error::not_pd("summed covariance"));
    }
    let log_det: f64 = pivots.iter().map(|p| p.ln()).sum();
    // invert L, then S⁻¹ = L⁻ᵀ L⁻¹
    let mut linv = vec![0.0; d * d];
    for i in 0..d {
        linv[i * d + i] = 1.0 / l[i * d + i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * d + k] * linv[k * d + j];
            }
            linv[i * d + j] = s / l[i * d + i];
        }
    }
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..d {
                s += linv[k * d + i] * linv[k * d + j];
            }
            inv[i * d + j] = s;
            inv[j * d + i] = s;
        }
    }
    Ok((inv, log_det))
}

fn flat_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let d = a.nrows();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(a[(i, j)] + b[(i, j)]);
        }
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A controlled mixture (weights and covariances fixed, means free) paired
/// with a fixed target mixture. All pairwise covariance factorizations are
/// done once at construction.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    d: usize,
    nf: usize,
    ng: usize,
    ln_wf: Vec<f64>,
    ln_wg: Vec<f64>,
    g_means: Vec<f64>,
    /// unordered f–f pairs i < j, row-major over i
    ff: Vec<PairKernel>,
    /// ln of the diagonal f–f terms w_i² N(0; 0, 2P_i)
    ff_diag: Vec<f64>,
    /// f–g pairs, index i * ng + j
    fg: Vec<PairKernel>,
    /// ln of each g–g term, all ordered pairs
    gg_terms: Vec<f64>,
    gg_sum: f64,
    ff_diag_sum: f64,
}

/// Raw pairwise quantities at a particular set of means.
struct Terms {
    /// ln of each ordered f–f term (diagonal included), used by the CS route
    ff_log: Vec<f64>,
    ff: f64,
    fg_log: Vec<f64>,
    fg: f64,
    /// Σ w_g w_f ln N
    log_sum: f64,
}

impl PreparedPair {
    pub fn new(f: &GaussianMixture, g: &GaussianMixture) -> Result<Self> {
        if f.dim() != g.dim() {
            return Err(Error::DimensionMismatch {
                expected: f.dim(),
                got: g.dim(),
            });
        }
        let d = f.dim();
        let fc = f.components();
        let gc = g.components();
        let nf = fc.len();
        let ng = gc.len();
        let mut ff = Vec::with_capacity(nf * nf.saturating_sub(1) / 2);
        let mut ff_diag = Vec::with_capacity(nf);
        for i in 0..nf {
            let k = PairKernel::new(&flat_sum(fc[i].covariance(), fc[i].covariance()), d)?;
            ff_diag.push(2.0 * fc[i].weight().ln() + k.log_norm);
            for j in (i + 1)..nf {
                ff.push(PairKernel::new(
                    &flat_sum(fc[i].covariance(), fc[j].covariance()),
                    d,
                )?);
            }
        }
        let mut fg = Vec::with_capacity(nf * ng);
        for fi in fc {
            for gj in gc {
                fg.push(PairKernel::new(&flat_sum(fi.covariance(), gj.covariance()), d)?);
            }
        }
        let mut gg_terms = Vec::with_capacity(ng * ng);
        let mut g_means = Vec::with_capacity(ng * d);
        let mut buf = vec![0.0; d];
        let mut delta = vec![0.0; d];
        for gi in gc {
            g_means.extend(gi.mean().iter());
            for gj in gc {
                let k = PairKernel::new(&flat_sum(gi.covariance(), gj.covariance()), d)?;
                for r in 0..d {
                    delta[r] = gi.mean()[r] - gj.mean()[r];
                }
                let ln = k.eval(&delta, d, &mut buf);
                gg_terms.push(gi.weight().ln() + gj.weight().ln() + ln);
            }
        }
        Ok(Self {
            d,
            nf,
            ng,
            ln_wf: fc.iter().map(|c| c.weight().ln()).collect(),
            ln_wg: gc.iter().map(|c| c.weight().ln()).collect(),
            g_means,
            ff,
            ff_diag_sum: ff_diag.iter().map(|t| t.exp()).sum(),
            ff_diag,
            fg,
            gg_sum: gg_terms.iter().map(|t| t.exp()).sum(),
            gg_terms,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_controlled(&self) -> usize {
        self.nf
    }

    /// ⟨g, g⟩, independent of the controlled means.
    pub fn gg(&self) -> f64 {
        self.gg_sum
    }

    fn check_means(&self, means: &[f64]) -> Result<()> {
        if means.len() != self.nf * self.d {
            return Err(Error::DimensionMismatch {
                expected: self.nf * self.d,
                got: means.len(),
            });
        }
        Ok(())
    }

    fn ff_index(&self, i: usize, j: usize) -> usize {
        // offset of row i in the packed upper triangle plus column offset
        i * self.nf - i * (i + 1) / 2 + (j - i - 1)
    }

    fn terms(&self, means: &[f64], want_logs: bool) -> Terms {
        let d = self.d;
        let mut delta = vec![0.0; d];
        let mut buf = vec![0.0; d];
        let mut ff_log = Vec::new();
        let mut ff = 0.0;
        if want_logs {
            ff_log.reserve(self.nf * self.nf);
        }
        for i in 0..self.nf {
            ff += self.ff_diag[i].exp();
            if want_logs {
                ff_log.push(self.ff_diag[i]);
            }
            for j in (i + 1)..self.nf {
                for r in 0..d {
                    delta[r] = means[i * d + r] - means[j * d + r];
                }
                let ln = self.ln_wf[i]
                    + self.ln_wf[j]
                    + self.ff[self.ff_index(i, j)].eval(&delta, d, &mut buf);
                ff += 2.0 * ln.exp();
                if want_logs {
                    ff_log.push(ln + std::f64::consts::LN_2);
                }
            }
        }
        let mut fg_log = Vec::with_capacity(if want_logs { self.nf * self.ng } else { 0 });
        let mut fg = 0.0;
        let mut log_sum = 0.0;
        for i in 0..self.nf {
            for j in 0..self.ng {
                for r in 0..d {
                    delta[r] = means[i * d + r] - self.g_means[j * d + r];
                }
                let ln_n = self.fg[i * self.ng + j].eval(&delta, d, &mut buf);
                let lw = self.ln_wf[i] + self.ln_wg[j];
                let ln = lw + ln_n;
                fg += ln.exp();
                let w = lw.exp();
                if w > 0.0 {
                    log_sum += w * ln_n;
                }
                if want_logs {
                    fg_log.push(ln);
                }
            }
        }
        Terms {
            ff_log,
            ff,
            fg_log,
            fg,
            log_sum,
        }
    }

    pub fn value(&self, kind: DistanceKind, means: &[f64]) -> Result<f64> {
        self.check_means(means)?;
        kind.validate()?;
        match kind {
            DistanceKind::CauchySchwarz => {
                let t = self.terms(means, true);
                cs_from_logs(
                    log_sum_exp(&t.ff_log),
                    log_sum_exp(&self.gg_terms),
                    log_sum_exp(&t.fg_log),
                )
            }
            DistanceKind::L2 => {
                let t = self.terms(means, false);
                Ok(t.ff + self.gg_sum - 2.0 * t.fg)
            }
            DistanceKind::L2Quadratic { alpha } => {
                let t = self.terms(means, false);
                Ok(t.ff + self.gg_sum - 2.0 * t.fg - alpha * t.log_sum)
            }
        }
    }

    /// Value, analytic gradient and Hessian with respect to the stacked means.
    pub fn quadratize(&self, kind: DistanceKind, means: &[f64]) -> Result<CostQuadratization> {
        let n = self.nf * self.d;
        let mut hess = DMatrix::zeros(n, n);
        let (value, grad) = self.quadratize_into(
            kind,
            means,
            &mut HessSink::Dense {
                m: &mut hess,
                d: self.d,
            },
        )?;
        crate::linalg::symmetrize(&mut hess);
        Ok(CostQuadratization {
            value,
            grad_means: grad,
            hess_means: hess,
        })
    }

    /// Like [`Self::quadratize`] but keeps only the per-component diagonal
    /// blocks of the Hessian. The gradient is exact.
    pub fn quadratize_blocks(
        &self,
        kind: DistanceKind,
        means: &[f64],
    ) -> Result<BlockQuadratization> {
        let mut blocks = vec![DMatrix::zeros(self.d, self.d); self.nf];
        let (value, grad) =
            self.quadratize_into(kind, means, &mut HessSink::Blocks { b: &mut blocks })?;
        for b in blocks.iter_mut() {
            crate::linalg::symmetrize(b);
        }
        Ok(BlockQuadratization {
            value,
            grad_means: grad,
            hess_blocks: blocks,
        })
    }

    fn quadratize_into(
        &self,
        kind: DistanceKind,
        means: &[f64],
        hess: &mut HessSink<'_>,
    ) -> Result<(f64, DVector<f64>)> {
        self.check_means(means)?;
        kind.validate()?;
        let n = self.nf * self.d;
        let mut grad = DVector::zeros(n);
        let value = match kind {
            DistanceKind::L2 | DistanceKind::L2Quadratic { .. } => {
                // ⟨f,f⟩ − 2⟨f,g⟩
                let ff = self.accumulate_ff(means, 0.0, 1.0, &mut grad, hess);
                let fg = self.accumulate_fg(means, 0.0, -2.0, &mut grad, hess);
                let alpha = kind.alpha();
                let log_sum = if alpha > 0.0 {
                    self.accumulate_log(means, alpha, &mut grad, hess)
                } else {
                    0.0
                };
                self.ff_diag_sum + ff + self.gg_sum - 2.0 * fg - alpha * log_sum
            }
            DistanceKind::CauchySchwarz => {
                // ½ ln⟨f,f⟩ − ln⟨f,g⟩; each log handled as softmax-weighted sums
                let t = self.terms(means, true);
                let lff = log_sum_exp(&t.ff_log);
                let lfg = log_sum_exp(&t.fg_log);
                if !lff.is_finite() || !lfg.is_finite() {
                    return Err(Error::Domain(
                        "Cauchy-Schwarz divergence needs positive inner products".into(),
                    ));
                }
                let mut g1 = DVector::zeros(n);
                self.accumulate_ff(means, lff, 0.5, &mut g1, hess);
                let mut g2 = DVector::zeros(n);
                self.accumulate_fg(means, lfg, -1.0, &mut g2, hess);
                // outer-product parts of the log Hessians, with g1 = ½∇ln⟨f,f⟩
                // and g2 = −∇ln⟨f,g⟩
                hess.add_outer(&g1, -2.0);
                hess.add_outer(&g2, 1.0);
                grad = g1 + g2;
                cs_from_logs(lff, log_sum_exp(&self.gg_terms), lfg)?
            }
        };
        Ok((value, grad))
    }

    /// Gradient only; cheaper than [`Self::quadratize`] for large mixtures.
    pub fn gradient(&self, kind: DistanceKind, means: &[f64]) -> Result<(f64, DVector<f64>)> {
        self.check_means(means)?;
        kind.validate()?;
        match kind {
            DistanceKind::CauchySchwarz => {
                let q = self.quadratize(kind, means)?;
                Ok((q.value, q.grad_means))
            }
            _ => {
                let n = self.nf * self.d;
                let mut grad = DVector::zeros(n);
                let ff = self.accumulate_ff_grad(means, &mut grad);
                let fg = self.accumulate_fg_grad(means, -2.0, &mut grad);
                let alpha = kind.alpha();
                let log_sum = if alpha > 0.0 {
                    self.accumulate_log_grad(means, alpha, &mut grad)
                } else {
                    0.0
                };
                Ok((self.ff_diag_sum + ff + self.gg_sum - 2.0 * fg - alpha * log_sum, grad))
            }
        }
    }

    /// Adds `scale`·∇ and `scale`·∇² of Σ_{ordered i≠j} exp(ln t_ij − offset)
    /// and returns the unscaled sum.
    fn accumulate_ff(
        &self,
        means: &[f64],
        offset: f64,
        scale: f64,
        grad: &mut DVector<f64>,
        hess: &mut HessSink<'_>,
    ) -> f64 {
        let d = self.d;
        let mut delta = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut sum = 0.0;
        for i in 0..self.nf {
            for j in (i + 1)..self.nf {
                for r in 0..d {
                    delta[r] = means[i * d + r] - means[j * d + r];
                }
                let k = &self.ff[self.ff_index(i, j)];
                let ln = self.ln_wf[i] + self.ln_wf[j] + k.eval(&delta, d, &mut g);
                let e = 2.0 * (ln - offset).exp();
                sum += e;
                let t = scale * e;
                if t == 0.0 {
                    continue;
                }
                // ∇_i = −t S⁻¹δ, ∇_j = +t S⁻¹δ
                for r in 0..d {
                    grad[i * d + r] -= t * g[r];
                    grad[j * d + r] += t * g[r];
                }
                for r in 0..d {
                    for c in 0..d {
                        let h = t * (g[r] * g[c] - k.inv[r * d + c]);
                        hess.add(i, i, r, c, h);
                        hess.add(j, j, r, c, h);
                        hess.add(i, j, r, c, -h);
                        hess.add(j, i, r, c, -h);
                    }
                }
            }
        }
        sum
    }

    fn accumulate_ff_grad(&self, means: &[f64], grad: &mut DVector<f64>) -> f64 {
        let d = self.d;
        let mut delta = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut sum = 0.0;
        for i in 0..self.nf {
            for j in (i + 1)..self.nf {
                for r in 0..d {
                    delta[r] = means[i * d + r] - means[j * d + r];
                }
                let k = &self.ff[self.ff_index(i, j)];
                let t = 2.0 * (self.ln_wf[i] + self.ln_wf[j] + k.eval(&delta, d, &mut g)).exp();
                sum += t;
                for r in 0..d {
                    grad[i * d + r] -= t * g[r];
                    grad[j * d + r] += t * g[r];
                }
            }
        }
        sum
    }

    fn accumulate_fg(
        &self,
        means: &[f64],
        offset: f64,
        scale: f64,
        grad: &mut DVector<f64>,
        hess: &mut HessSink<'_>,
    ) -> f64 {
        let d = self.d;
        let mut delta = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut sum = 0.0;
        for i in 0..self.nf {
            for j in 0..self.ng {
                for r in 0..d {
                    delta[r] = means[i * d + r] - self.g_means[j * d + r];
                }
                let k = &self.fg[i * self.ng + j];
                let ln = self.ln_wf[i] + self.ln_wg[j] + k.eval(&delta, d, &mut g);
                let e = (ln - offset).exp();
                sum += e;
                let t = scale * e;
                if t == 0.0 {
                    continue;
                }
                for r in 0..d {
                    grad[i * d + r] -= t * g[r];
                    for c in 0..d {
                        hess.add(i, i, r, c, t * (g[r] * g[c] - k.inv[r * d + c]));
                    }
                }
            }
        }
        sum
    }

    fn accumulate_fg_grad(&self, means: &[f64], scale: f64, grad: &mut DVector<f64>) -> f64 {
        let d = self.d;
        let mut delta = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut sum = 0.0;
        for i in 0..self.nf {
            for j in 0..self.ng {
                for r in 0..d {
                    delta[r] = means[i * d + r] - self.g_means[j * d + r];
                }
                let k = &self.fg[i * self.ng + j];
                let e = (self.ln_wf[i] + self.ln_wg[j] + k.eval(&delta, d, &mut g)).exp();
                sum += e;
                let t = scale * e;
                for r in 0..d {
                    grad[i * d + r] -= t * g[r];
                }
            }
        }
        sum
    }

    /// −α Σ w_g w_f ln N: gradient α w w S⁻¹δ, Hessian α w w S⁻¹. Returns
    /// Σ w_g w_f ln N.
    fn accumulate_log(
        &self,
        means: &[f64],
        alpha: f64,
        grad: &mut DVector<f64>,
        hess: &mut HessSink<'_>,
    ) -> f64 {
        let d = self.d;
        let log_sum = self.accumulate_log_grad(means, alpha, grad);
        for i in 0..self.nf {
            for j in 0..self.ng {
                let c = alpha * (self.ln_wf[i] + self.ln_wg[j]).exp();
                if c == 0.0 {
                    continue;
                }
                let k = &self.fg[i * self.ng + j];
                for r in 0..d {
                    for s in 0..d {
                        hess.add(i, i, r, s, c * k.inv[r * d + s]);
                    }
                }
            }
        }
        log_sum
    }

    fn accumulate_log_grad(&self, means: &[f64], alpha: f64, grad: &mut DVector<f64>) -> f64 {
        let d = self.d;
        let mut delta = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut log_sum = 0.0;
        for i in 0..self.nf {
            for j in 0..self.ng {
                let c = alpha * (self.ln_wf[i] + self.ln_wg[j]).exp();
                if c == 0.0 {
                    continue;
                }
                for r in 0..d {
                    delta[r] = means[i * d + r] - self.g_means[j * d + r];
                }
                let ln_n = self.fg[i * self.ng + j].eval(&delta, d, &mut g);
                log_sum += (self.ln_wf[i] + self.ln_wg[j]).exp() * ln_n;
                for r in 0..d {
                    grad[i * d + r] += c * g[r];
                }
            }
        }
        log_sum
    }
}

fn cs_from_logs(lff: f64, lgg: f64, lfg: f64) -> Result<f64> {
    if !lff.is_finite() || !lgg.is_finite() || !lfg.is_finite() {
        return Err(Error::Domain(
            "Cauchy-Schwarz divergence needs positive inner products".into(),
        ));
    }
    Ok(0.5 * lff + 0.5 * lgg - lfg)
}

/// Stacked means of a mixture, component-major.
pub fn stacked_means(f: &GaussianMixture) -> Vec<f64> {
    f.components()
        .iter()
        .flat_map(|c| c.mean().iter().copied())
        .collect()
}

/// ½ln⟨f,f⟩ + ½ln⟨g,g⟩ − ln⟨f,g⟩.
pub fn cs_divergence(f: &GaussianMixture, g: &GaussianMixture) -> Result<f64> {
    PreparedPair::new(f, g)?.value(DistanceKind::CauchySchwarz, &stacked_means(f))
}

/// ⟨f,f⟩ + ⟨g,g⟩ − 2⟨f,g⟩, i.e. ∫(f − g)².
pub fn l2_distance(f: &GaussianMixture, g: &GaussianMixture) -> Result<f64> {
    PreparedPair::new(f, g)?.value(DistanceKind::L2, &stacked_means(f))
}

/// L2² distance minus α Σ_j Σ_i w_g^j w_f^i ln N(m_g^j; m_f^i, P_g^j + P_f^i).
pub fn modified_l2(f: &GaussianMixture, g: &GaussianMixture, alpha: f64) -> Result<f64> {
    PreparedPair::new(f, g)?.value(DistanceKind::L2Quadratic { alpha }, &stacked_means(f))
}

pub fn distance(kind: DistanceKind, f: &GaussianMixture, g: &GaussianMixture) -> Result<f64> {
    PreparedPair::new(f, g)?.value(kind, &stacked_means(f))
}

/// Derivatives of the chosen distance with respect to the stacked f-means;
/// g, all covariances and all weights are held fixed.
pub fn quadratize(
    kind: DistanceKind,
    f: &GaussianMixture,
    g: &GaussianMixture,
) -> Result<CostQuadratization> {
    PreparedPair::new(f, g)?.quadratize(kind, &stacked_means(f))
}
