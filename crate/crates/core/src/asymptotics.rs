//! Asymptotic expansions of k-indexed families: least-squares fits in powers of
//! `1/k` or `1/(2k+n)`, recovery of star-product coefficients from products of
//! Toeplitz operators, and reparametrization of the expansion parameter.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::fields::Function;
use crate::fourier::Fourier;
use crate::formal::{connection_operators, FormalFunction};
use crate::geometry::{Direction, KahlerModel, ModelKind};
use crate::hitchin::frame_matrix;
use crate::linalg::{gram_factor, loglog_slope, lstsq_complex, CMatrix, CVector};
use crate::quantization::{holomorphic_basis, toeplitz, SectionBasis};
use crate::sphere::Rational;
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum PowerBasis {
    /// Powers of `1/k`.
    InverseK,
    /// Powers of `1/(2k + n)`.
    InverseTwoKPlusN(i32),
}

impl PowerBasis {
    pub fn variable(&self, k: u32) -> f64 {
        match *self {
            Self::InverseK => 1.0 / k as f64,
            Self::InverseTwoKPlusN(n) => 1.0 / (2.0 * k as f64 + n as f64),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionFit {
    pub k_values: Vec<u32>,
    pub power_basis: PowerBasis,
    pub order: usize,
    /// `a_0 .. a_L`, each a vector with one entry per sampled component.
    #[serde(skip)]
    pub coefficients: Vec<CVector>,
    /// `|| sample_k - sum_{l <= L} a_l x_k^l ||` per k.
    pub residual_norms: Vec<f64>,
    /// Log-log decay rate of the residual between the two largest k.
    pub slope_estimate: f64,
    pub condition: f64,
    /// Total order used internally to absorb the first omitted terms.
    pub internal_order: usize,
}

impl ExpansionFit {
    /// Scalar coefficient `a_l` of a one-component fit.
    pub fn scalar(&self, l: usize) -> C64 {
        self.coefficients[l][0]
    }

    /// Least-squares slope of the residual over the upper half of the k range.
    pub fn upper_half_slope(&self) -> f64 {
        upper_half_slope(&self.k_values, &self.residual_norms)
    }
}

/// Log-log slope of `values` against `k` over the upper half of the k range.
pub fn upper_half_slope(k_values: &[u32], values: &[f64]) -> f64 {
    let start = k_values.len() / 2;
    let start = start.min(k_values.len().saturating_sub(2));
    let ks: Vec<f64> = k_values[start..].iter().map(|&k| k as f64).collect();
    loglog_slope(&ks, &values[start..])
}

/// Number of orders fitted beyond `L` to absorb the leading omitted terms.
pub const EXTRA_ORDERS: usize = 3;

/// Cap on the internal order: beyond it the split between kept and absorbed
/// orders loses more than 1e-12 to rounding.
pub const MAX_INTERNAL_ORDER: usize = 4;

pub fn fit_expansion(k_values: &[u32], samples: &[CVector], basis: PowerBasis, order: usize) -> Result<ExpansionFit> {
    let n = k_values.len();
    if n < order + 2 {
        return Err(Error::NotEnoughSamples { needed: order + 2, got: n });
    }
    if samples.len() != n || samples.iter().any(|s| s.len() != samples[0].len()) {
        return Err(Error::BadSamples);
    }
    let mut sorted = k_values.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n || k_values.contains(&0) {
        return Err(Error::BadSamples);
    }
    let internal = (order + EXTRA_ORDERS.min(n - order - 1)).min(MAX_INTERNAL_ORDER.max(order));
    let xs: Vec<f64> = k_values.iter().map(|&k| basis.variable(k)).collect();
    // fit in x / max x so the design columns are comparable in size
    let xmax = xs.iter().cloned().fold(0.0, f64::max);
    let design = CMatrix::from_fn(n, internal + 1, |r, c| C64::new((xs[r] / xmax).powi(c as i32), 0.0));
    let width = samples[0].len();
    let rhs = CMatrix::from_fn(n, width, |r, c| samples[r][c]);
    let (sol, condition) = lstsq_complex(&design, &rhs).map_err(|e| match e {
        Error::IllConditioned(c) => Error::RankDeficient(c),
        other => other,
    })?;
    let coefficients: Vec<CVector> = (0..=order)
        .map(|l| sol.row(l).transpose() * C64::new(xmax.powi(-(l as i32)), 0.0))
        .collect();
    let residual_norms: Vec<f64> = (0..n)
        .map(|r| {
            let mut resid = samples[r].clone();
            for (l, a) in coefficients.iter().enumerate() {
                resid -= a * C64::new(xs[r].powi(l as i32), 0.0);
            }
            resid.norm()
        })
        .collect();
    let (i1, i2) = {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by_key(|&i| k_values[i]);
        (idx[n - 2], idx[n - 1])
    };
    let slope_estimate = (residual_norms[i2].max(f64::MIN_POSITIVE) / residual_norms[i1].max(f64::MIN_POSITIVE)).ln()
        / (k_values[i2] as f64 / k_values[i1] as f64).ln();
    Ok(ExpansionFit {
        k_values: k_values.to_vec(),
        power_basis: basis,
        order,
        coefficients,
        residual_norms,
        slope_estimate,
        condition,
        internal_order: internal,
    })
}

/// Scalar convenience wrapper around [`fit_expansion`].
pub fn fit_scalar(k_values: &[u32], samples: &[f64], basis: PowerBasis, order: usize) -> Result<ExpansionFit> {
    let s: Vec<CVector> = samples.iter().map(|&v| CVector::from_element(1, C64::new(v, 0.0))).collect();
    fit_expansion(k_values, &s, basis, order)
}

/// Probe functions for symbol recovery: harmonic polynomials of degree <= 2 on
/// the sphere, Fourier modes with `|p_i| <= 1` on the torus.
pub fn symbol_space(kind: ModelKind) -> Vec<Function> {
    match kind {
        ModelKind::Sphere => {
            let (x1, x2, x3) = (Rational::x1(), Rational::x2(), Rational::x3());
            let one = Rational::constant(C64::new(1.0, 0.0));
            let mut out = vec![one, x1.clone(), x2.clone(), x3.clone()];
            out.push(&x1 * &x2);
            out.push(&x1 * &x3);
            out.push(&x2 * &x3);
            out.push(&(&x1 * &x1) - &(&x2 * &x2));
            out.push(&(&x3 * &x3).scale(C64::new(3.0, 0.0)) - &Rational::constant(C64::new(1.0, 0.0)));
            out.into_iter().map(Function::Sphere).collect()
        }
        ModelKind::Torus => {
            let mut out = Vec::new();
            for p1 in -1..=1 {
                for p2 in -1..=1 {
                    out.push(Function::Torus(Fourier::mode((p1, p2), C64::new(1.0, 0.0))));
                }
            }
            out
        }
    }
}

/// `R a R^{-1}` with `gram = R^* R`, flattened: the matrix in an orthonormal frame.
fn orthonormal_entries(a: &CMatrix, r: &CMatrix, r_inv: &CMatrix) -> CVector {
    let b = r * a * r_inv;
    CVector::from_iterator(b.len(), b.iter().cloned())
}

/// Least-squares symbol `sum alpha_p Y_p` whose Toeplitz operator is closest to
/// `a` in Hilbert-Schmidt norm. Returns the coefficients and condition number.
pub fn recover_symbol(basis: &SectionBasis, a: &CMatrix, space: &[Function]) -> Result<(CVector, f64)> {
    let r = gram_factor(&basis.gram)?;
    let r_inv = r.clone().try_inverse().ok_or(Error::Singular("Cholesky factor"))?;
    let cols: Vec<CVector> = space
        .iter()
        .map(|y| orthonormal_entries(&toeplitz(basis, y).matrix, &r, &r_inv))
        .collect();
    let design = CMatrix::from_fn(cols[0].len(), cols.len(), |i, j| cols[j][i]);
    let rhs = orthonormal_entries(a, &r, &r_inv);
    let rhs = CMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    let (x, cond) = lstsq_complex(&design, &rhs)?;
    Ok((x.column(0).into_owned(), cond))
}

/// Linear combination `sum alpha_p Y_p`.
pub fn combine(space: &[Function], alpha: &CVector) -> Result<Function> {
    let mut out = space[0].scale(alpha[0]);
    for (y, a) in space.iter().zip(alpha.iter()).skip(1) {
        out = out.add(&y.scale(*a))?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StarCoefficients {
    pub space: Vec<Function>,
    /// `c^(l)` as coefficient vectors over `space`.
    pub alpha: Vec<CVector>,
    pub functions: Vec<Function>,
    pub fit: ExpansionFit,
    /// Worst condition number of the per-k symbol recoveries.
    pub recovery_condition: f64,
    /// Worst Hilbert-Schmidt misfit of the per-k symbol recoveries.
    pub recovery_residual: f64,
}

/// Toeplitz product `T_f T_g` at level `k` on the default grid for `k`.
pub fn toeplitz_product(kind: ModelKind, sigma: C64, f: &Function, g: &Function, k: u32) -> Result<(SectionBasis, CMatrix)> {
    let model = KahlerModel::for_level(kind, k);
    let basis = holomorphic_basis(&model, sigma, k as i64)?;
    let m = toeplitz(&basis, f).matrix * toeplitz(&basis, g).matrix;
    Ok((basis, m))
}

/// Coefficients `c^(l)(f, g)` of `T_f T_g ~ sum_l T_{c^(l)} k^{-l}`.
pub fn star_coefficients(kind: ModelKind, sigma: C64, f: &Function, g: &Function, order: usize, k_values: &[u32]) -> Result<StarCoefficients> {
    let space = symbol_space(kind);
    let per_k: Vec<(CVector, f64, f64)> = k_values
        .par_iter()
        .map(|&k| {
            let (basis, prod) = toeplitz_product(kind, sigma, f, g, k)?;
            let (alpha, cond) = recover_symbol(&basis, &prod, &space)?;
            let back = space
                .iter()
                .zip(alpha.iter())
                .fold(CMatrix::zeros(basis.dim(), basis.dim()), |acc, (y, a)| acc + toeplitz(&basis, y).matrix * *a);
            let misfit = basis.operator_norm(&(back - &prod))?;
            Ok((alpha, cond, misfit))
        })
        .collect::<Result<_>>()?;
    let recovery_condition = per_k.iter().map(|r| r.1).fold(0.0, f64::max);
    let recovery_residual = per_k.iter().map(|r| r.2).fold(0.0, f64::max);
    let samples: Vec<CVector> = per_k.into_iter().map(|r| r.0).collect();
    let fit = fit_expansion(k_values, &samples, PowerBasis::InverseK, order)?;
    let alpha = fit.coefficients.clone();
    let functions = alpha.iter().map(|a| combine(&space, a)).collect::<Result<Vec<_>>>()?;
    Ok(StarCoefficients { space, alpha, functions, fit, recovery_condition, recovery_residual })
}

fn binomial(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Rewrite `sum c_l h^l` (with `h = 1/k`) in `h~ = phi(h) = h / (2 + n h)`,
/// i.e. `h~ = 1/(2k + n)`, truncated at the same order.
pub fn reparametrize_star(coeffs: &[CVector], n: i32) -> Vec<CVector> {
    // h = 2 h~ / (1 - n h~), so h^l = 2^l h~^l sum_m C(l+m-1, m) n^m h~^m
    let order = coeffs.len();
    let mut out: Vec<CVector> = coeffs.iter().map(|c| c * C64::new(0.0, 0.0)).collect();
    if order == 0 {
        return out;
    }
    out[0] = coeffs[0].clone();
    for (j, slot) in out.iter_mut().enumerate().skip(1) {
        for (l, c) in coeffs.iter().enumerate().take(j + 1).skip(1) {
            let w = 2f64.powi(l as i32) * binomial(j - 1, j - l) * (n as f64).powi((j - l) as i32);
            *slot += c * C64::new(w, 0.0);
        }
    }
    out
}

/// Real part of a design with one row per `k` for plotting tables.
pub fn fitted_values(fit: &ExpansionFit) -> Vec<f64> {
    fit.k_values
        .iter()
        .map(|&k| {
            let x = fit.power_basis.variable(k);
            fit.coefficients
                .iter()
                .enumerate()
                .map(|(l, a)| a[0] * x.powi(l as i32))
                .sum::<C64>()
                .re
        })
        .collect()
}

/// `|| T_f T_g - sum_{l <= L} k^{-l} T_{c^(l)} ||` for each k.
pub fn product_remainders(
    kind: ModelKind,
    sigma: C64,
    f: &Function,
    g: &Function,
    coeffs: &[Function],
    k_values: &[u32],
) -> Result<Vec<f64>> {
    k_values
        .par_iter()
        .map(|&k| {
            let (basis, prod) = toeplitz_product(kind, sigma, f, g, k)?;
            let mut approx = CMatrix::zeros(basis.dim(), basis.dim());
            for (l, c) in coeffs.iter().enumerate() {
                approx += toeplitz(&basis, c).matrix * C64::new((k as f64).powi(-(l as i32)), 0.0);
            }
            basis.operator_norm(&(prod - approx))
        })
        .collect()
}

/// Ratio statistics of `a / b` over grid points where `|b| > cut * max|b|`:
/// `(mean, relative standard deviation)`.
pub fn ratio_statistics(a: &[C64], b: &[C64], cut: f64) -> (C64, f64) {
    let bmax = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let ratios: Vec<C64> = a
        .iter()
        .zip(b)
        .filter(|(_, y)| y.norm() > cut * bmax)
        .map(|(x, y)| x / y)
        .collect();
    let n = ratios.len() as f64;
    let mean: C64 = ratios.iter().sum::<C64>() / n;
    let var = ratios.iter().map(|r| (r - mean).norm_sqr()).sum::<f64>() / n;
    (mean, var.sqrt() / mean.norm())
}

/// Remainders of the formal connection on the torus family: for each `k`,
/// `|| nabla^e_V T_f - sum_{l <= L} T_{D~^(l)_V f} (2k)^{-l} ||` for `L = 0..=order`,
/// with `nabla^e_V T_f` computed in the theta frame as a central difference in
/// sigma plus the commutator with the frame matrix.
#[derive(Clone, Debug, Serialize)]
pub struct ConnectionRemainders {
    pub k_values: Vec<u32>,
    /// `remainders[L][i]` at `k_values[i]`.
    pub remainders: Vec<Vec<f64>>,
    pub slopes: Vec<f64>,
}

pub fn connection_remainders(
    sigma: C64,
    v: Direction,
    f: &Fourier,
    order: usize,
    k_values: &[u32],
    fd_step: f64,
) -> Result<ConnectionRemainders> {
    if !(fd_step > 0.0) || fd_step >= sigma.im {
        return Err(Error::BadStep(fd_step));
    }
    let ops = connection_operators(sigma, v, order);
    let ff = FormalFunction::classical(f.clone(), 0);
    let terms: Vec<Fourier> = ops.iter().map(|m| ff.apply_multipliers(std::slice::from_ref(m)).coeffs[0].clone()).collect();
    let per_k: Vec<Vec<f64>> = k_values
        .par_iter()
        .map(|&k| {
            let model = KahlerModel::for_level(ModelKind::Torus, k);
            let t_at = |s: C64| -> Result<(SectionBasis, CMatrix)> {
                let b = holomorphic_basis(&model, s, k as i64)?;
                let m = toeplitz(&b, &Function::Torus(f.clone())).matrix;
                Ok((b, m))
            };
            let (basis, m0) = t_at(sigma)?;
            let (_, mp) = t_at(sigma + v * fd_step)?;
            let (_, mm) = t_at(sigma - v * fd_step)?;
            let gamma = frame_matrix(&model, sigma, k as i64)? * v;
            let nabla = (mp - mm) / C64::new(2.0 * fd_step, 0.0) + &gamma * &m0 - &m0 * &gamma;
            let mut approx = CMatrix::zeros(basis.dim(), basis.dim());
            let mut out = Vec::with_capacity(order + 1);
            for (l, term) in terms.iter().enumerate() {
                if l > 0 {
                    let w = (2.0 * k as f64).powi(-(l as i32));
                    approx += toeplitz(&basis, &Function::Torus(term.clone())).matrix * C64::new(w, 0.0);
                }
                out.push(basis.operator_norm(&(&nabla - &approx))?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let remainders: Vec<Vec<f64>> = (0..=order).map(|l| per_k.iter().map(|r| r[l]).collect()).collect();
    let slopes = remainders.iter().map(|r| upper_half_slope(k_values, r)).collect();
    Ok(ConnectionRemainders { k_values: k_values.to_vec(), remainders, slopes })
}

/// Real design helper used by the tests.
pub fn vandermonde(xs: &[f64], order: usize) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), order + 1, |r, c| xs[r].powi(c as i32))
}
