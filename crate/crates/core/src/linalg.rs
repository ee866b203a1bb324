//! Small dense linear-algebra helpers over `Complex64`.
//!
//! Operators on `H^(k)` are stored as coefficient matrices in a (generally
//! non-orthonormal) basis with Gram matrix `gram[(m, i)] = <s_i, s_m>`.
//! Norms and adjoints are taken with respect to that inner product.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, C64};

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Cholesky factor `R` (upper triangular) with `gram = R^* R`.
pub fn gram_factor(gram: &CMatrix) -> Result<CMatrix> {
    let chol = gram
        .clone()
        .cholesky()
        .ok_or(Error::Singular("Gram matrix is not positive definite"))?;
    Ok(chol.l().adjoint())
}

/// Operator norm of `a` in the inner product `<c, d> = d^* gram c`.
pub fn operator_norm(a: &CMatrix, gram: &CMatrix) -> Result<f64> {
    let r = gram_factor(gram)?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("Cholesky factor"))?;
    let b = &r * a * r_inv;
    Ok(spectral_norm(&b))
}

/// Largest singular value.
pub fn spectral_norm(a: &CMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Adjoint of `a` with respect to the Gram inner product: `gram^{-1} a^* gram`.
pub fn gram_adjoint(a: &CMatrix, gram: &CMatrix, gram_inv: &CMatrix) -> CMatrix {
    gram_inv * a.adjoint() * gram
}

/// Eigenvalues of the Gram-self-adjoint part of `a`, ascending.
pub fn hermitian_eigenvalues(a: &CMatrix, gram: &CMatrix) -> Result<Vec<f64>> {
    let r = gram_factor(gram)?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("Cholesky factor"))?;
    let b = &r * a * r_inv;
    let herm = (&b + b.adjoint()) * C64::new(0.5, 0.0);
    let mut ev: Vec<f64> = herm.symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(ev)
}

pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Off-scalar defect `min_lambda ||a - lambda I|| / ||a||` (Frobenius), with
/// `lambda = tr(a) / dim`.
pub fn off_scalar_defect(a: &CMatrix) -> (C64, f64) {
    let n = a.nrows();
    let lambda = a.trace() / n as f64;
    let resid = a - CMatrix::identity(n, n) * lambda;
    (lambda, resid.norm() / a.norm().max(f64::MIN_POSITIVE))
}

/// Real least squares `min ||design * x - rhs||` via SVD; returns the solution
/// and the 2-norm condition number of `design`.
pub fn lstsq_real(design: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::RankDeficient(cond));
    }
    let x = svd
        .solve(rhs, smax * 1e-15)
        .map_err(|_| Error::RankDeficient(cond))?;
    Ok((x, cond))
}

/// Complex least squares; same contract as [`lstsq_real`].
pub fn lstsq_complex(design: &CMatrix, rhs: &CMatrix) -> Result<(CMatrix, f64)> {
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::IllConditioned(cond));
    }
    let x = svd
        .solve(rhs, smax * 1e-15)
        .map_err(|_| Error::IllConditioned(cond))?;
    Ok((x, cond))
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.abs().max(f64::MIN_POSITIVE).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
