//! Small dense linear-algebra helpers shared by the filters and solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest accepted ratio between the smallest and largest Cholesky pivot.
pub const PIVOT_RATIO_MIN: f64 = 1e-10;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factorization that rejects near-singular matrices.
///
/// The pivots are the squared diagonal entries of the factor. A matrix whose
/// smallest pivot falls below `PIVOT_RATIO_MIN` times the largest is treated
/// as singular.
pub fn cholesky_checked(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    let chol = Cholesky::new(m.clone()).ok_or_else(|| Error::not_pd(context))?;
    let l = chol.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..m.nrows() {
        let p = l[(i, i)] * l[(i, i)];
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if m.nrows() > 0 && !(lo >= PIVOT_RATIO_MIN * hi && lo > 0.0) {
        return Err(Error::not_pd(context));
    }
    Ok(chol)
}

/// ln det of the factored matrix.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// δᵀ M⁻¹ δ using a factorization of M.
pub fn chol_quad_form(chol: &Cholesky<f64, Dyn>, delta: &DVector<f64>) -> f64 {
    let l = chol.l_dirty();
    let n = delta.len();
    // forward substitution on the lower factor only; l_dirty's upper part is garbage
    let mut y = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        let mut s = delta[i];
        for j in 0..i {
            s -= l[(i, j)] * y[j];
        }
        y[i] = s / l[(i, i)];
        acc += y[i] * y[i];
    }
    acc
}

/// Log of the Gaussian density N(x; m, Σ) given a factorization of Σ.
pub fn gaussian_log_density(chol: &Cholesky<f64, Dyn>, delta: &DVector<f64>) -> f64 {
    let d = delta.len() as f64;
    -0.5 * (d * LN_2PI + chol_log_det(chol) + chol_quad_form(chol, delta))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// True when `m` is square and symmetric to within `rel_tol` of its largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Block-diagonal matrix with `count` copies of `block`.
pub fn block_diag_repeat(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    (a - b).amax() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_near_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        assert!(cholesky_checked(&m, "t").is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-8]);
        assert!(cholesky_checked(&m, "t").is_ok());
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky_checked(&m, "t"),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn log_density_standard_normal() {
        let m = DMatrix::identity(1, 1);
        let chol = cholesky_checked(&m, "t").unwrap();
        let v = gaussian_log_density(&chol, &DVector::from_element(1, 0.0));
        assert!((v.exp() - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn quad_form_matches_inverse() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let d = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let chol = cholesky_checked(&m, "t").unwrap();
        let direct = (d.transpose() * m.clone().try_inverse().unwrap() * &d)[(0, 0)];
        assert!((chol_quad_form(&chol, &d) - direct).abs() < 1e-12);
    }
}
