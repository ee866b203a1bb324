//! Holomorphic section bases, Gram matrices, the orthogonal projection onto
//! `H^(k)`, Toeplitz and prequantum operators, and the identities that reduce
//! first- and second-order differential operators to Toeplitz operators.
//!
//! Sampled sections are stored as grid value vectors. The pointwise pairing
//! weight folds quadrature weight and the bundle metric together, so
//! `<a, b> = sum_n pair_weight[n] a[n] conj(b[n])`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::fields::{theta_range, Function, SmoothSection, SphereSection, ThetaSection, VectorField, THETA_CUTOFF};
use crate::geometry::{check_sigma, KahlerModel, ModelKind, SPHERE_SIGMA};
use crate::linalg::{gram_adjoint, operator_norm, CMatrix, CVector};
use crate::{Error, Result, C64};

#[derive(Clone, Debug)]
pub struct Section {
    pub k: u32,
    pub values: Vec<C64>,
    pub coeffs: Option<CVector>,
}

#[derive(Clone, Debug)]
pub struct SectionBasis {
    pub k: u32,
    pub sigma: C64,
    pub model: KahlerModel,
    pub symbolic: Vec<SmoothSection>,
    /// Grid samples, one column per basis section.
    pub samples: CMatrix,
    pub pair_weight: Vec<f64>,
    pub gram: CMatrix,
    pub gram_inv: CMatrix,
    /// Gaussian weight below which theta lattice terms were dropped (torus).
    pub truncation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OperatorMatrix {
    pub k: u32,
    pub sigma: (f64, f64),
    #[serde(skip)]
    pub matrix: CMatrix,
    pub symbol: Option<String>,
}

impl OperatorMatrix {
    fn new(basis: &SectionBasis, matrix: CMatrix, symbol: Option<String>) -> Self {
        Self { k: basis.k, sigma: (basis.sigma.re, basis.sigma.im), matrix, symbol }
    }
}

pub fn dimension(kind: ModelKind, k: u32) -> usize {
    match kind {
        ModelKind::Torus => k as usize,
        ModelKind::Sphere => k as usize + 1,
    }
}

pub fn holomorphic_basis(model: &KahlerModel, sigma: C64, k: i64) -> Result<SectionBasis> {
    if k < 1 {
        return Err(Error::InvalidLevel { k, reason: "level must be at least 1" });
    }
    if 2 * k + model.chern_n as i64 == 0 {
        return Err(Error::InvalidLevel { k, reason: "2k + n vanishes" });
    }
    check_sigma(model.kind, sigma)?;
    let k = k as u32;
    let (sigma, symbolic): (C64, Vec<SmoothSection>) = match model.kind {
        ModelKind::Torus => (
            sigma,
            (0..k).map(|j| SmoothSection::Torus(ThetaSection::basis(k, sigma, j))).collect(),
        ),
        ModelKind::Sphere => (
            SPHERE_SIGMA,
            (0..=k).map(|j| SmoothSection::Sphere(SphereSection::basis(k, j))).collect(),
        ),
    };
    let pair_weight: Vec<f64> = model
        .points
        .iter()
        .map(|p| match model.kind {
            ModelKind::Torus => p.weight,
            ModelKind::Sphere => p.weight / (1.0 + p.x * p.x + p.y * p.y).powi(k as i32),
        })
        .collect();
    let columns: Vec<Vec<C64>> = symbolic.iter().map(|s| s.sample(model)).collect();
    let samples = CMatrix::from_fn(model.len(), columns.len(), |r, c| columns[c][r]);
    let mut basis = SectionBasis {
        k,
        sigma,
        model: model.clone(),
        symbolic,
        samples,
        pair_weight,
        gram: CMatrix::zeros(0, 0),
        gram_inv: CMatrix::zeros(0, 0),
        truncation: THETA_CUTOFF,
    };
    basis.gram = gram(model, &basis);
    basis.gram_inv = basis
        .gram
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("Gram matrix"))?;
    Ok(basis)
}

/// Gram matrix `gram[(m, i)] = <s_i, s_m>` by quadrature on `model`.
pub fn gram(model: &KahlerModel, basis: &SectionBasis) -> CMatrix {
    let _ = model;
    basis.pairing(&basis.samples, None)
}

impl SectionBasis {
    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind
    }

    /// Moments `out[(i, c)] = <f * columns[:, c], s_i>` with optional pointwise factor `f`.
    pub fn pairing(&self, columns: &CMatrix, f: Option<&[C64]>) -> CMatrix {
        let mut weighted = columns.clone();
        for (r, mut row) in weighted.row_iter_mut().enumerate() {
            let w = match f {
                Some(f) => f[r] * self.pair_weight[r],
                None => C64::new(self.pair_weight[r], 0.0),
            };
            row *= w;
        }
        self.samples.adjoint() * weighted
    }

    pub fn inner(&self, a: &[C64], b: &[C64]) -> C64 {
        a.iter()
            .zip(b)
            .zip(&self.pair_weight)
            .map(|((x, y), w)| x * y.conj() * *w)
            .sum()
    }

    pub fn norm(&self, a: &[C64]) -> f64 {
        self.inner(a, a).re.max(0.0).sqrt()
    }

    /// Coefficients in the basis of the projections of the given columns.
    pub fn project_columns(&self, columns: &CMatrix) -> CMatrix {
        &self.gram_inv * self.pairing(columns, None)
    }

    pub fn project_values(&self, values: &[C64]) -> CVector {
        let col = CMatrix::from_column_slice(values.len(), 1, values);
        self.project_columns(&col).column(0).into_owned()
    }

    pub fn synthesize(&self, coeffs: &CVector) -> Vec<C64> {
        (&self.samples * coeffs).iter().cloned().collect()
    }

    /// Norm of a coefficient vector in `H^(k)`.
    pub fn coeff_norm(&self, c: &CVector) -> f64 {
        (c.adjoint() * &self.gram * c)[(0, 0)].re.max(0.0).sqrt()
    }

    pub fn sample_sections(&self, sections: &[SmoothSection]) -> Result<CMatrix> {
        let mut cols = Vec::with_capacity(sections.len());
        for s in sections {
            if s.k() != self.k {
                return Err(Error::LevelMismatch { expected: self.k, found: s.k() });
            }
            cols.push(s.sample(&self.model));
        }
        Ok(CMatrix::from_fn(self.model.len(), cols.len(), |r, c| cols[c][r]))
    }

    /// Matrix of `s -> pi(A s)` on `H^(k)` given the images `A s_j`.
    pub fn operator_from_images(&self, images: &[SmoothSection]) -> Result<CMatrix> {
        Ok(self.project_columns(&self.sample_sections(images)?))
    }

    /// Apply `A` to every basis section.
    pub fn map_basis<F>(&self, f: F) -> Result<Vec<SmoothSection>>
    where
        F: Fn(&SmoothSection) -> Result<SmoothSection>,
    {
        self.symbolic.iter().map(f).collect()
    }

    /// Largest `|nabla_{d/dzbar} s_j|` over the grid.
    pub fn dbar_residual(&self) -> f64 {
        self.symbolic
            .iter()
            .flat_map(|s| s.nabla_zbar().sample(&self.model))
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn operator_norm(&self, a: &CMatrix) -> Result<f64> {
        operator_norm(a, &self.gram)
    }

    /// Adjoint with respect to the `H^(k)` inner product.
    pub fn adjoint(&self, a: &CMatrix) -> CMatrix {
        gram_adjoint(a, &self.gram, &self.gram_inv)
    }

    /// Lattice ranges used for each theta basis element.
    pub fn theta_ranges(&self) -> Vec<(i64, i64)> {
        match self.kind() {
            ModelKind::Torus => (0..self.k).map(|j| theta_range(self.k, self.sigma, j)).collect(),
            ModelKind::Sphere => Vec::new(),
        }
    }
}

pub fn project(basis: &SectionBasis, section: &Section) -> Result<Section> {
    if section.k != basis.k {
        return Err(Error::LevelMismatch { expected: basis.k, found: section.k });
    }
    let coeffs = basis.project_values(&section.values);
    Ok(Section { k: basis.k, values: basis.synthesize(&coeffs), coeffs: Some(coeffs) })
}

/// Toeplitz matrix of a sampled function.
pub fn toeplitz_sampled(basis: &SectionBasis, f: &[C64]) -> CMatrix {
    &basis.gram_inv * basis.pairing(&basis.samples, Some(f))
}

pub fn toeplitz(basis: &SectionBasis, f: &Function) -> OperatorMatrix {
    let m = toeplitz_sampled(basis, &f.sample(&basis.model));
    OperatorMatrix::new(basis, m, Some(format!("{f:?}")))
}

/// `pi o (-(1/k) nabla_{X_f} + i f)` on `H^(k)`.
pub fn prequantum(basis: &SectionBasis, f: &Function) -> Result<OperatorMatrix> {
    let xf = f.hamiltonian_field(basis.sigma);
    let k = basis.k as f64;
    let images = basis.map_basis(|s| {
        s.nabla(&xf)?
            .scale(C64::new(-1.0 / k, 0.0))
            .add(&s.mul(&f.scale(C64::new(0.0, 1.0)))?)
    })?;
    Ok(OperatorMatrix::new(basis, basis.operator_from_images(&images)?, None))
}

/// `|| pi P_f - i T_{f - Delta f / 2k} ||`.
pub fn tuynman_residual(basis: &SectionBasis, f: &Function) -> Result<f64> {
    let p = prequantum(basis, f)?.matrix;
    let corr = f.sub(&f.laplacian(basis.sigma).scale(C64::new(0.5 / basis.k as f64, 0.0)))?;
    let t = toeplitz(basis, &corr).matrix * C64::new(0.0, 1.0);
    basis.operator_norm(&(p - t))
}

#[derive(Clone, Debug)]
pub struct FirstOrder {
    /// `pi nabla_X` on `H^(k)`.
    pub nabla: CMatrix,
    pub f_x: Function,
    pub toeplitz: CMatrix,
    pub residual: f64,
}

pub fn reduce_first_order(basis: &SectionBasis, x: &VectorField) -> Result<FirstOrder> {
    let f_x = x.divergence_symbol(basis.sigma)?;
    let images = basis.map_basis(|s| s.nabla(x))?;
    let nabla = basis.operator_from_images(&images)?;
    let toeplitz = toeplitz(basis, &f_x).matrix;
    let residual = basis.operator_norm(&(&nabla - &toeplitz))?;
    Ok(FirstOrder { nabla, f_x, toeplitz, residual })
}

#[derive(Clone, Debug)]
pub struct SecondOrder {
    /// Symbol `f_{X2} f_{X1} - X2(f_{X1})` of `pi nabla_{X1} nabla_{X2}`.
    pub symbol: Function,
    pub residual: f64,
    /// Symbol `conj(f_X)` of `pi (nabla_X)^* pi` for `X = X1`.
    pub adjoint_symbol: Function,
    pub adjoint_residual: f64,
    /// Five-term symbol of `pi (nabla_{X1})^* (nabla_{X2})^* h pi`.
    pub double_adjoint_symbol: Function,
    pub double_adjoint_residual: f64,
}

/// Check the second-order reduction identities on `H^(k)` for sections
/// `X1, X2` of `T_sigma` and a function `h`.
///
/// Adjoints are evaluated independently of the symbols by moving the
/// operators across the inner product: `<(nabla_X)^* a, b> = <a, nabla_X b>`.
pub fn reduce_second_order(basis: &SectionBasis, x1: &VectorField, x2: &VectorField, h: &Function) -> Result<SecondOrder> {
    let sigma = basis.sigma;
    let f1 = x1.divergence_symbol(sigma)?;
    let f2 = x2.divergence_symbol(sigma)?;
    let symbol = f2.mul(&f1)?.sub(&x2.apply(&f1, sigma)?)?;
    let images = basis.map_basis(|s| s.nabla(x2)?.nabla(x1))?;
    let direct = basis.operator_from_images(&images)?;
    let residual = basis.operator_norm(&(&direct - toeplitz(basis, &symbol).matrix))?;

    // <(nabla_X)^* s_j, s_i> = <s_j, nabla_X s_i>
    let adjoint_symbol = f1.conj();
    let moved = basis.sample_sections(&basis.map_basis(|s| s.nabla(x1))?)?;
    let adj = &basis.gram_inv * adjoint_moments(basis, &moved, None);
    let adjoint_residual = basis.operator_norm(&(&adj - toeplitz(basis, &adjoint_symbol).matrix))?;

    // <(nabla_1)^* (nabla_2)^* h s_j, s_i> = <h s_j, nabla_2 nabla_1 s_i>
    let (xb1, xb2) = (x1.conj(), x2.conj());
    let (fb1, fb2) = (f1.conj(), f2.conj());
    let terms = [
        xb1.apply(&xb2.apply(h, sigma)?, sigma)?,
        xb1.apply(&fb2, sigma)?.mul(h)?.scale(C64::new(-1.0, 0.0)),
        fb2.mul(&xb1.apply(h, sigma)?)?.scale(C64::new(-1.0, 0.0)),
        fb1.mul(&xb2.apply(h, sigma)?)?.scale(C64::new(-1.0, 0.0)),
        fb1.mul(&fb2)?.mul(h)?,
    ];
    let mut double_adjoint_symbol = terms[0].clone();
    for t in &terms[1..] {
        double_adjoint_symbol = double_adjoint_symbol.add(t)?;
    }
    let moved = basis.sample_sections(&basis.map_basis(|s| s.nabla(x1)?.nabla(x2))?)?;
    let hv = h.sample(&basis.model);
    let dadj = &basis.gram_inv * adjoint_moments(basis, &moved, Some(&hv));
    let double_adjoint_residual =
        basis.operator_norm(&(&dadj - toeplitz(basis, &double_adjoint_symbol).matrix))?;

    Ok(SecondOrder { symbol, residual, adjoint_symbol, adjoint_residual, double_adjoint_symbol, double_adjoint_residual })
}

/// `out[(i, j)] = <f s_j, moved_i>`.
fn adjoint_moments(basis: &SectionBasis, moved: &CMatrix, f: Option<&[C64]>) -> CMatrix {
    let mut weighted = basis.samples.clone();
    for (r, mut row) in weighted.row_iter_mut().enumerate() {
        let w = match f {
            Some(f) => f[r] * basis.pair_weight[r],
            None => C64::new(basis.pair_weight[r], 0.0),
        };
        row *= w;
    }
    moved.adjoint() * weighted
}

/// Sample matrix of `f` over a list of functions, `out[(n, c)] = f_c(x_n)`.
pub fn sample_functions(model: &KahlerModel, fs: &[Function]) -> DMatrix<C64> {
    let cols: Vec<Vec<C64>> = fs.iter().map(|f| f.sample(model)).collect();
    DMatrix::from_fn(model.len(), cols.len(), |r, c| cols[c][r])
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::fourier::Fourier;
    use crate::linalg::max_abs;
    use crate::sphere::Rational;

    fn torus_basis(sigma: C64, k: i64) -> SectionBasis {
        holomorphic_basis(&KahlerModel::for_level(ModelKind::Torus, k as u32), sigma, k).unwrap()
    }

    fn sphere_basis(k: i64) -> SectionBasis {
        holomorphic_basis(&KahlerModel::for_level(ModelKind::Sphere, k as u32), SPHERE_SIGMA, k).unwrap()
    }

    fn factorial(n: u32) -> f64 {
        (1..=n).map(|v| v as f64).product()
    }

    #[test]
    fn dimensions_and_errors() {
        assert_eq!(torus_basis(C64::new(0.0, 1.0), 3).dim(), 3);
        assert_eq!(sphere_basis(4).dim(), 5);
        let t = KahlerModel::torus(16).unwrap();
        assert!(matches!(holomorphic_basis(&t, C64::new(0.0, 1.0), 0), Err(Error::InvalidLevel { .. })));
    }

    #[test]
    fn sphere_gram_beta_integrals() {
        let b = sphere_basis(4);
        for a in 0..5 {
            for c in 0..5 {
                if a != c {
                    assert!(b.gram[(a, c)].norm() < 1e-13);
                }
            }
            let ratio = b.gram[(a, a)].re / b.gram[(0, 0)].re;
            let beta = factorial(a as u32) * factorial(4 - a as u32) / factorial(4);
            assert!((ratio - beta).abs() < 1e-12);
        }
        // <1, 1> = int (1+|z|^2)^{-k} omega = 2 pi / (k + 1)
        assert!((b.gram[(0, 0)].re - 2.0 * PI / 5.0).abs() < 1e-12);
    }

    #[test]
    fn torus_gram_gaussian_integrals() {
        // <theta_i, theta_j> = delta_ij 2 pi int exp(-2 pi k b t^2) dt
        for (sigma, k) in [(C64::new(0.0, 1.0), 2), (C64::new(0.4, 0.7), 5)] {
            let b = torus_basis(sigma, k);
            let expected = 2.0 * PI / (2.0 * k as f64 * sigma.im).sqrt();
            let diag = CMatrix::identity(k as usize, k as usize) * C64::new(expected, 0.0);
            assert!(max_abs(&(&b.gram - diag)) < 1e-12);
        }
    }

    #[test]
    fn theta_basis_passes_discrete_dbar_check() {
        let b = torus_basis(C64::new(0.2, 1.3), 3);
        assert!(b.dbar_residual() == 0.0);
        // centered differences of the sampled sections, independent of the symbolic rules
        let sigma = b.sigma;
        let h = 1e-5;
        for s in &b.symbolic {
            for (x, y) in [(0.25, 0.5), (0.9, 0.05)] {
                let ev = |x: f64, y: f64| s.eval(&crate::geometry::GridPoint { x, y, weight: 0.0 });
                let dx = (ev(x + h, y) - ev(x - h, y)) / (2.0 * h) + C64::new(0.0, 2.0 * PI * 3.0 * y) * ev(x, y);
                let dy = (ev(x, y + h) - ev(x, y - h)) / (2.0 * h);
                let dzb = (sigma * dx - dy) / C64::new(0.0, 2.0 * sigma.im);
                assert!(dzb.norm() < 1e-8 * (1.0 + dx.norm() + dy.norm()), "{dzb}");
            }
        }
    }

    #[test]
    fn gram_inverse_and_projection() {
        let b = torus_basis(C64::new(0.0, 1.0), 4);
        let id = &b.gram * &b.gram_inv;
        assert!(max_abs(&(id - CMatrix::identity(4, 4))) < 1e-10);
        let s0 = Section { k: 4, values: b.samples.column(0).iter().cloned().collect(), coeffs: None };
        let p = project(&b, &s0).unwrap();
        let c = p.coeffs.clone().unwrap();
        assert!((c[0] - 1.0).norm() < 1e-12 && c.iter().skip(1).all(|v| v.norm() < 1e-12));
        let f = Function::Torus(Fourier::mode((1, 0), C64::new(1.0, 0.0)));
        let fs: Vec<C64> = f.sample(&b.model).iter().zip(&s0.values).map(|(a, b)| a * b).collect();
        let once = project(&b, &Section { k: 4, values: fs, coeffs: None }).unwrap();
        let twice = project(&b, &once).unwrap();
        let d = once.coeffs.unwrap() - twice.coeffs.unwrap();
        assert!(d.norm() < 1e-10);
        assert!(project(&b, &Section { k: 3, values: vec![], coeffs: None }).is_err());
    }

    #[test]
    fn projection_matches_dense_least_squares() {
        // minimize ||f s_0 - sum c_j s_j|| over c with a weighted QR solve
        let b = torus_basis(C64::new(0.3, 1.2), 3);
        let f = Function::Torus(Fourier::mode((1, 0), C64::new(1.0, 0.0)));
        let target: Vec<C64> = f.sample(&b.model).iter().zip(b.samples.column(0).iter()).map(|(a, s)| a * s).collect();
        let sq: Vec<f64> = b.pair_weight.iter().map(|w| w.sqrt()).collect();
        let a = CMatrix::from_fn(b.model.len(), 3, |r, c| b.samples[(r, c)] * sq[r]);
        let rhs = CMatrix::from_fn(b.model.len(), 1, |r, _| target[r] * sq[r]);
        let (x, _) = crate::linalg::lstsq_complex(&a, &rhs).unwrap();
        let c = b.project_values(&target);
        assert!((x.column(0) - c).norm() < 1e-10);
    }

    #[test]
    fn toeplitz_of_one_and_height_function() {
        let b = sphere_basis(6);
        let one = toeplitz(&b, &Function::Sphere(Rational::constant(C64::new(1.0, 0.0)))).matrix;
        assert!(max_abs(&(one - CMatrix::identity(7, 7))) < 1e-12);
        let t = toeplitz(&b, &Function::Sphere(Rational::x3())).matrix;
        for j in 0..7 {
            for i in 0..7 {
                let expected = if i == j { (6.0 - 2.0 * j as f64) / 8.0 } else { 0.0 };
                assert!((t[(i, j)] - expected).norm() < 1e-12);
            }
        }
        assert!((b.operator_norm(&t).unwrap() - 6.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn torus_shift_matrix_from_gaussian_overlaps() {
        // e^{2 pi i x} raises the x frequency by one, so <e_x theta_j, theta_i>
        // vanishes unless i = j + 1 (mod k), where it is a Gaussian overlap
        // 2 pi int exp(pi i k sigma t^2 - pi i k conj(sigma) (t + 1/k)^2) dt.
        let sigma = C64::new(0.25, 0.9);
        let k = 3;
        let b = torus_basis(sigma, k);
        let t = toeplitz(&b, &Function::Torus(Fourier::mode((1, 0), C64::new(1.0, 0.0)))).matrix;
        let kk = k as f64;
        // brute-force quadrature of the Gaussian overlap on a fine line grid
        let mut overlap = C64::default();
        let m = 20000;
        let (lo, hi) = (-6.0, 6.0);
        let dt = (hi - lo) / m as f64;
        for i in 0..m {
            let tt = lo + (i as f64 + 0.5) * dt;
            let a = C64::new(0.0, PI * kk) * sigma * tt * tt;
            let s = tt + 1.0 / kk;
            let bb = C64::new(0.0, -PI * kk) * sigma.conj() * s * s;
            overlap += (a + bb).exp() * dt;
        }
        let norm = 2.0 * PI / (2.0 * kk * sigma.im).sqrt();
        let expected = overlap * 2.0 * PI / norm;
        for j in 0..k as usize {
            for i in 0..k as usize {
                if i == (j + 1) % k as usize {
                    assert!((t[(i, j)] - expected).norm() < 1e-9, "{} vs {}", t[(i, j)], expected);
                } else {
                    assert!(t[(i, j)].norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn prequantum_of_constant() {
        let b = torus_basis(C64::new(0.0, 1.0), 3);
        let p = prequantum(&b, &Function::Torus(Fourier::constant(C64::new(2.5, 0.0)))).unwrap();
        assert!(max_abs(&(p.matrix - CMatrix::identity(3, 3) * C64::new(0.0, 2.5))) < 1e-12);
    }

    #[test]
    fn tuynman_on_both_models() {
        let b = sphere_basis(5);
        assert!(tuynman_residual(&b, &Function::Sphere(Rational::x3())).unwrap() < 1e-10);
        let f = Function::Sphere(&Rational::x1() * &Rational::x3());
        assert!(tuynman_residual(&b, &f).unwrap() < 1e-10);
        let b = torus_basis(C64::new(0.4, 1.1), 4);
        assert!(tuynman_residual(&b, &Function::Torus(Fourier::cos((1, 0)))).unwrap() < 1e-10);
        let f = Function::Torus(&Fourier::sin((1, 1)) + &Fourier::cos((0, 2)));
        assert!(tuynman_residual(&b, &f).unwrap() < 1e-10);
    }

    #[test]
    fn first_order_reduction() {
        let b = torus_basis(C64::new(0.0, 1.0), 3);
        let x = VectorField::holomorphic_type(Function::Torus(Fourier::constant(C64::new(1.0, 0.0))));
        let r = reduce_first_order(&b, &x).unwrap();
        assert!(r.f_x == Function::Torus(Fourier::zero()));
        assert!(max_abs(&r.nabla) < 1e-10);
        let x = VectorField::holomorphic_type(Function::Torus(Fourier::mode((1, -1), C64::new(0.7, 0.2))));
        let r = reduce_first_order(&b, &x).unwrap();
        assert!(r.residual < 1e-8);
        let s = sphere_basis(4);
        let rot = VectorField::holomorphic_type(Function::Sphere(Rational::monomial(C64::new(0.0, 1.0), 1, 0, 0)));
        let r = reduce_first_order(&s, &rot).unwrap();
        assert!(r.f_x.sup_norm(&s.model) > 0.5);
        assert!(r.residual < 1e-8);
    }

    #[test]
    fn second_order_reduction() {
        let b = torus_basis(C64::new(0.3, 0.9), 3);
        let x1 = VectorField::holomorphic_type(Function::Torus(Fourier::mode((1, 0), C64::new(1.0, 0.0))));
        let x2 = VectorField::holomorphic_type(Function::Torus(Fourier::cos((0, 1))));
        let h = Function::Torus(Fourier::sin((1, 1)));
        let r = reduce_second_order(&b, &x1, &x2, &h).unwrap();
        assert!(r.residual < 1e-8 && r.adjoint_residual < 1e-8 && r.double_adjoint_residual < 1e-8);
        let c = VectorField::holomorphic_type(Function::Torus(Fourier::constant(C64::new(1.0, 0.0))));
        let r = reduce_second_order(&b, &c, &c, &h).unwrap();
        assert!(r.symbol == Function::Torus(Fourier::zero()) && r.residual < 1e-8);
        let s = sphere_basis(4);
        let rot = VectorField::holomorphic_type(Function::Sphere(Rational::monomial(C64::new(0.0, 1.0), 1, 0, 0)));
        let one = Function::Sphere(Rational::constant(C64::new(1.0, 0.0)));
        let r = reduce_second_order(&s, &rot, &rot, &one).unwrap();
        assert!(r.residual < 1e-7 && r.adjoint_residual < 1e-7 && r.double_adjoint_residual < 1e-7);
    }

    #[test]
    fn adjoint_by_direct_quadrature() {
        // <nabla_X s1, s2> = <f_X s1, s2> - <s1, nabla_{conj X} s2> for smooth s1, s2
        let b = torus_basis(C64::new(0.1, 1.0), 2);
        let x = VectorField::holomorphic_type(Function::Torus(Fourier::mode((0, 1), C64::new(0.5, 0.5))));
        let s1 = b.symbolic[0].mul(&Function::Torus(Fourier::cos((1, 0)))).unwrap();
        let s2 = b.symbolic[1].mul(&Function::Torus(Fourier::sin((0, 1)))).unwrap();
        let fx = x.divergence_symbol(b.sigma).unwrap();
        let lhs = b.inner(&s1.nabla(&x).unwrap().sample(&b.model), &s2.sample(&b.model));
        let rhs = b.inner(&s1.mul(&fx).unwrap().sample(&b.model), &s2.sample(&b.model))
            - b.inner(&s1.sample(&b.model), &s2.nabla(&x.conj()).unwrap().sample(&b.model));
        assert!((lhs - rhs).norm() < 1e-8);
    }
}
