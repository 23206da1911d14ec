//! Receding-horizon control: minimize Σ uᵀRu + D over a short prediction
//! horizon with a dense BFGS solver, apply the first controls, shift, repeat.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilqr::StackedDynamics;
use crate::objective::PreparedStage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuasiNewtonOptions {
    /// Stop once ‖∇f‖_∞ falls to this value.
    pub grad_tol: f64,
    /// Stop once an accepted step lowers f by less than `f_tol`·(1 + |f|).
    pub f_tol: f64,
    pub max_fevals: usize,
    pub max_iters: usize,
    /// Sufficient-decrease constant of the Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            f_tol: 0.0,
            max_fevals: 200,
            max_iters: 200,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

impl QuasiNewtonOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::invalid("wolfe", "need 0 < c1 < c2 < 1"));
        }
        if !(self.grad_tol >= 0.0) || !(self.f_tol >= 0.0) {
            return Err(Error::invalid("grad_tol", "tolerances must be >= 0"));
        }
        if self.max_fevals == 0 {
            return Err(Error::invalid("max_fevals", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QnStatus {
    GradientTolerance,
    FunctionTolerance,
    BudgetExhausted,
    LineSearchFailed,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QnResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub status: QnStatus,
    pub iterations: usize,
    pub fevals: usize,
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>> Counted<F> {
    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.evals += 1;
        (self.f)(x)
    }
}

/// Minimizer of the cubic through (a, fa, da) and (b, fb, db), or the
/// bisection point when the cubic has no usable minimizer inside the bracket.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = 0.5 * (a + b);
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    // keep the trial point away from the bracket ends
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

struct LsPoint {
    f: f64,
    g: DVector<f64>,
    x: DVector<f64>,
}

/// Line search for the strong Wolfe conditions (bracketing then zoom).
fn strong_wolfe<F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>>(
    fun: &mut Counted<F>,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    p: &DVector<f64>,
    alpha_init: f64,
    opts: &QuasiNewtonOptions,
) -> Result<Option<LsPoint>> {
    let d0 = g0.dot(p);
    if !(d0 < 0.0) {
        return Ok(None);
    }
    let mut prev = (0.0, f0, d0);
    let mut alpha = alpha_init;
    let alpha_max = 1e10 * alpha_init.max(1.0);
    for i in 0..50 {
        if fun.evals >= opts.max_fevals {
            return Ok(None);
        }
        let xt = x + p * alpha;
        let (ft, gt) = fun.eval(&xt)?;
        if !ft.is_finite() {
            // step into a region where the objective breaks down; shrink
            alpha = 0.5 * (prev.0 + alpha);
            continue;
        }
        let dt = gt.dot(p);
        if ft > f0 + opts.c1 * alpha * d0 || (i > 0 && ft >= prev.1) {
            return zoom(fun, x, f0, d0, p, prev, (alpha, ft, dt), opts);
        }
        if dt.abs() <= -opts.c2 * d0 {
            return Ok(Some(LsPoint {
                f: ft,
                g: gt,
                x: xt,
            }));
        }
        if dt >= 0.0 {
            return zoom(fun, x, f0, d0, p, (alpha, ft, dt), prev, opts);
        }
        prev = (alpha, ft, dt);
        alpha = (alpha * 4.0).min(alpha_max);
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn zoom<F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>>(
    fun: &mut Counted<F>,
    x: &DVector<f64>,
    f0: f64,
    d0: f64,
    p: &DVector<f64>,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    opts: &QuasiNewtonOptions,
) -> Result<Option<LsPoint>> {
    let mut best: Option<LsPoint> = None;
    for _ in 0..40 {
        if fun.evals >= opts.max_fevals {
            break;
        }
        let alpha = cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        let xt = x + p * alpha;
        let (ft, gt) = fun.eval(&xt)?;
        let dt = gt.dot(p);
        if !ft.is_finite() || ft > f0 + opts.c1 * alpha * d0 || ft >= lo.1 {
            hi = (alpha, ft, dt);
        } else {
            if dt.abs() <= -opts.c2 * d0 {
                return Ok(Some(LsPoint {
                    f: ft,
                    g: gt,
                    x: xt,
                }));
            }
            if dt * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, ft, dt);
            best = Some(LsPoint {
                f: ft,
                g: gt,
                x: xt,
            });
        }
        if (hi.0 - lo.0).abs() <= 1e-14 * lo.0.abs().max(1e-300) {
            break;
        }
    }
    // a sufficient decrease without the curvature condition still makes progress
    Ok(best)
}

/// Dense BFGS on the inverse Hessian with a strong Wolfe line search.
pub fn quasi_newton_minimize<F>(objective: F, x0: &DVector<f64>, opts: &QuasiNewtonOptions) -> Result<QnResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    opts.validate()?;
    let n = x0.len();
    let mut fun = Counted { f: objective, evals: 0 };
    let (mut f, mut g) = fun.eval(x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let mut x = x0.clone();
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;
    let status = loop {
        if g.amax() <= opts.grad_tol {
            break QnStatus::GradientTolerance;
        }
        if iterations >= opts.max_iters || fun.evals >= opts.max_fevals {
            break QnStatus::BudgetExhausted;
        }
        let p = -(&h * &g);
        let alpha_init = if first { 1.0 / g.norm().max(1.0) } else { 1.0 };
        let point = match strong_wolfe(&mut fun, &x, f, &g, &p, alpha_init, opts)? {
            Some(pt) => pt,
            None => {
                if !first {
                    // the curvature model went stale; restart from steepest descent
                    h = DMatrix::identity(n, n);
                    first = true;
                    if fun.evals < opts.max_fevals {
                        continue;
                    }
                }
                break if fun.evals >= opts.max_fevals {
                    QnStatus::BudgetExhausted
                } else {
                    QnStatus::LineSearchFailed
                };
            }
        };
        iterations += 1;
        let s = &point.x - &x;
        let y = &point.g - &g;
        let df = f - point.f;
        let old_f = f;
        x = point.x;
        f = point.f;
        g = point.g;
        if g.iter().any(|v| !v.is_finite()) {
            break QnStatus::NonFinite;
        }
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ expanded
            h.ger(-rho, &hy, &s, 1.0);
            h.ger(-rho, &s, &hy, 1.0);
            h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        first = false;
        if opts.f_tol > 0.0 && df <= opts.f_tol * (1.0 + old_f.abs()) {
            break QnStatus::FunctionTolerance;
        }
    };
    Ok(QnResult {
        x,
        f,
        grad: g,
        status,
        iterations,
        fevals: fun.evals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction horizon in steps.
    pub t_p: usize,
    /// Steps applied before replanning.
    pub t_c: usize,
    pub qn_opts: QuasiNewtonOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            t_p: 3,
            t_c: 1,
            qn_opts: QuasiNewtonOptions::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_p == 0 {
            return Err(Error::invalid("t_p", "must be at least 1"));
        }
        if self.t_c == 0 || self.t_c > self.t_p {
            return Err(Error::invalid("t_c", "must satisfy 1 <= t_c <= t_p"));
        }
        self.qn_opts.validate()
    }
}

/// Horizon objective Σ_{j<t_p} u_jᵀRu_j + D_{j+1}(x_{j+1}) over the
/// stacked decision vector [u_0; …; u_{t_p−1}].
pub struct HorizonObjective<'a> {
    pub dynamics: &'a StackedDynamics,
    /// Cost of the state reached after each predicted step.
    pub stages: &'a [PreparedStage],
    pub x0: &'a DVector<f64>,
}

impl HorizonObjective<'_> {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn split(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        let nu = self.dynamics.input_dim();
        (0..self.horizon())
            .map(|j| u.rows(j * nu, nu).into_owned())
            .collect()
    }

    pub fn value(&self, u: &DVector<f64>) -> Result<f64> {
        let us = self.split(u);
        let mut x = self.x0.clone();
        let mut total = 0.0;
        for (j, uj) in us.iter().enumerate() {
            total += self.stages[j].control_cost(uj)?;
            x = self.dynamics.step(j, &x, uj);
            total += self.stages[j].distance(&x)?;
        }
        Ok(total)
    }

    /// Value and gradient by the adjoint recursion
    /// λ_{t_p} = ∇D(x_{t_p}), λ_j = ∇D(x_j) + Aᵀλ_{j+1}, ∂J/∂u_j = 2Ru_j + Bᵀλ_{j+1}.
    pub fn value_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let tp = self.horizon();
        let nu = self.dynamics.input_dim();
        let nxb = self.dynamics.block_state_dim();
        let nub = self.dynamics.block_input_dim();
        let us = self.split(u);
        let mut x = self.x0.clone();
        let mut total = 0.0;
        let mut dgrads = Vec::with_capacity(tp);
        let mut rgrads = Vec::with_capacity(tp);
        for (j, uj) in us.iter().enumerate() {
            total += self.stages[j].control_cost(uj)?;
            rgrads.push(self.stages[j].control_gradient(uj)?);
            x = self.dynamics.step(j, &x, uj);
            let (d, gd) = self.stages[j].distance_gradient(&x)?;
            total += d;
            dgrads.push(gd);
        }
        let at = self.dynamics.a.transpose();
        let bt = self.dynamics.b.transpose();
        let mut grad = DVector::zeros(tp * nu);
        let mut lambda = DVector::<f64>::zeros(self.dynamics.state_dim());
        for j in (0..tp).rev() {
            // λ_{j+1} = ∇D(x_{j+1}) + Aᵀλ_{j+2}
            let mut next = dgrads[j].clone();
            for i in 0..self.dynamics.copies {
                next.rows_mut(i * nxb, nxb)
                    .gemv(1.0, &at, &lambda.rows(i * nxb, nxb), 1.0);
            }
            lambda = next;
            let mut gj = grad.rows_mut(j * nu, nu);
            gj.copy_from(&rgrads[j]);
            for i in 0..self.dynamics.copies {
                gj.rows_mut(i * nub, nub)
                    .gemv(1.0, &bt, &lambda.rows(i * nxb, nxb), 1.0);
            }
        }
        Ok((total, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStepResult {
    /// The first t_c controls.
    pub controls: Vec<DVector<f64>>,
    /// The whole optimized horizon.
    pub plan: Vec<DVector<f64>>,
    pub cost: f64,
    pub inner_iters: usize,
    pub fevals: usize,
    pub status: QnStatus,
}

/// One receding-horizon solve from `x0`, warm-started from `warm` (the
/// previous plan already shifted) or zeros.
pub fn mpc_step(
    x0: &DVector<f64>,
    stages: &[PreparedStage],
    dynamics: &StackedDynamics,
    config: &MpcConfig,
    warm: Option<&[DVector<f64>]>,
) -> Result<MpcStepResult> {
    config.validate()?;
    if stages.len() != config.t_p {
        return Err(Error::DimensionMismatch {
            expected: config.t_p,
            got: stages.len(),
        });
    }
    let nu = dynamics.input_dim();
    let mut u0 = DVector::zeros(config.t_p * nu);
    if let Some(w) = warm {
        for (j, uj) in w.iter().take(config.t_p).enumerate() {
            if uj.len() != nu {
                return Err(Error::DimensionMismatch {
                    expected: nu,
                    got: uj.len(),
                });
            }
            u0.rows_mut(j * nu, nu).copy_from(uj);
        }
    }
    let obj = HorizonObjective {
        dynamics,
        stages,
        x0,
    };
    let res = quasi_newton_minimize(|u| obj.value_gradient(u), &u0, &config.qn_opts)?;
    let plan = obj.split(&res.x);
    Ok(MpcStepResult {
        controls: plan[..config.t_c].to_vec(),
        plan,
        cost: res.f,
        inner_iters: res.iterations,
        fevals: res.fevals,
        status: res.status,
    })
}

/// Drops the first `t_c` controls of a plan and pads with zeros.
pub fn shift_plan(plan: &[DVector<f64>], t_c: usize) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = plan.iter().skip(t_c).cloned().collect();
    if let Some(first) = plan.first() {
        while out.len() < plan.len() {
            out.push(DVector::zeros(first.len()));
        }
    }
    out
}

/// Per-step record of a receding-horizon run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcStepRecord {
    pub step: usize,
    pub inner_iters: usize,
    pub fevals: usize,
    pub cost: f64,
    pub wallclock_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ]);
        Ok((f, g))
    }

    #[test]
    fn quadratic_bowl() {
        let c = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let res = quasi_newton_minimize(
            |x| Ok(((x - &c).norm_squared(), (x - &c) * 2.0)),
            &DVector::from_vec(vec![10.0, 10.0, -7.0]),
            &QuasiNewtonOptions::default(),
        )
        .unwrap();
        assert!((res.x - c).amax() <= 1e-8);
    }

    #[test]
    fn rosenbrock_benchmark() {
        let res = quasi_newton_minimize(
            rosenbrock,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &QuasiNewtonOptions::default(),
        )
        .unwrap();
        assert!(res.fevals <= 200, "{} evaluations", res.fevals);
        assert!((res.x[0] - 1.0).abs() <= 1e-5 && (res.x[1] - 1.0).abs() <= 1e-5, "{:?}", res);
    }

    #[test]
    fn convex_quadratic_terminates_quickly() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        let res = quasi_newton_minimize(
            |x| Ok((0.5 * x.dot(&(&h * x)) - b.dot(x), &h * x - &b)),
            &DVector::zeros(3),
            &QuasiNewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, QnStatus::GradientTolerance);
        let exact = h.clone().lu().solve(&b).unwrap();
        assert!((res.x - exact).amax() < 1e-7);
    }

    #[test]
    fn config_validation() {
        let mut c = MpcConfig::default();
        assert!(c.validate().is_ok());
        c.t_c = 4;
        assert!(c.validate().is_err());
        c.t_c = 1;
        c.t_p = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shift_pads_with_zeros() {
        let plan = vec![
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0]),
            DVector::from_vec(vec![3.0]),
        ];
        let s = shift_plan(&plan, 1);
        assert_eq!(s, vec![DVector::from_vec(vec![2.0]), DVector::from_vec(vec![3.0]), DVector::zeros(1)]);
    }
}
