//! Symbolic functions, vector fields and sections of `L^k` on the two models.
//!
//! Everything here is exact symbolic data that can be differentiated without
//! discretization error and sampled on a model grid afterwards.
//!
//! Torus sections are finite sums of terms `e_p(x, y) * theta_j[P]` where
//! `e_p = exp(2 pi i (p1 x + p2 y))` and
//!
//! ```text
//! theta_j[P](x, y) = sum_n P(t) exp(pi i k sigma t^2) exp(2 pi i k (n + j/k) x),
//! t = y + n + j/k,
//! ```
//!
//! written in the unitary trivialization with connection `d + 2 pi i k y dx`.
//! `theta_j[1]` is the holomorphic theta basis.
//!
//! Sphere sections of `O(k)` are [`Rational`] fields in the trivialization
//! over the stereographic chart, with pointwise norm `|s|^2 / (1 + |z|^2)^k`.

use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI};

use rayon::prelude::*;

use crate::fourier::{zeta, Fourier, Mode};
use crate::geometry::{GridPoint, KahlerModel, ModelKind};
use crate::sphere::Rational;
use crate::{Error, Result, C64};

/// Gaussian weight below which theta-series lattice terms are dropped.
pub const THETA_CUTOFF: f64 = 1e-18;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Coefficients of a polynomial in `t`, lowest degree first.
pub type Poly = Vec<C64>;

fn poly_add_into(acc: &mut Poly, p: &[C64], scale: C64) {
    if acc.len() < p.len() {
        acc.resize(p.len(), C64::default());
    }
    for (a, b) in acc.iter_mut().zip(p) {
        *a += b * scale;
    }
}

fn poly_deriv(p: &[C64]) -> Poly {
    p.iter().enumerate().skip(1).map(|(i, a)| a * i as f64).collect()
}

/// Multiply by `t^m`.
fn poly_shift(p: &[C64], m: usize) -> Poly {
    let mut out = vec![C64::default(); m];
    out.extend_from_slice(p);
    out
}

fn poly_eval(p: &[C64], t: f64) -> C64 {
    p.iter().rev().fold(C64::default(), |acc, a| acc * t + a)
}

fn poly_is_zero(p: &[C64]) -> bool {
    p.iter().all(|a| a.norm() == 0.0)
}

/// Lattice range `n` such that every `t = y + n + j/k` with `y in [0, 1)` and
/// Gaussian weight above [`THETA_CUTOFF`] is included.
pub fn theta_range(k: u32, sigma: C64, j: u32) -> (i64, i64) {
    let tmax = (-THETA_CUTOFF.log10() * LN_10 / (PI * k as f64 * sigma.im)).sqrt() + 0.5;
    let shift = j as f64 / k as f64;
    ((-tmax - shift - 1.0).floor() as i64, (tmax - shift).ceil() as i64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaSection {
    pub k: u32,
    pub sigma: C64,
    /// `(p, j) -> P` encodes `e_p theta_j[P]`.
    pub terms: BTreeMap<(Mode, u32), Poly>,
}

impl ThetaSection {
    pub fn zero(k: u32, sigma: C64) -> Self {
        Self { k, sigma, terms: BTreeMap::new() }
    }

    /// The holomorphic basis element `theta_j[1]`.
    pub fn basis(k: u32, sigma: C64, j: u32) -> Self {
        let mut s = Self::zero(k, sigma);
        s.terms.insert(((0, 0), j % k), vec![c(1.0, 0.0)]);
        s
    }

    fn insert(&mut self, key: (Mode, u32), p: &[C64], scale: C64) {
        let acc = self.terms.entry(key).or_default();
        poly_add_into(acc, p, scale);
        if poly_is_zero(acc) {
            self.terms.remove(&key);
        }
    }

    fn map_terms<F: Fn(Mode, &[C64]) -> Poly>(&self, f: F) -> Self {
        let mut out = Self::zero(self.k, self.sigma);
        for (&(p, j), poly) in &self.terms {
            out.insert((p, j), &f(p, poly), c(1.0, 0.0));
        }
        out
    }

    pub fn scale(&self, s: C64) -> Self {
        self.map_terms(|_, p| p.iter().map(|a| a * s).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (&key, p) in &other.terms {
            out.insert(key, p, c(1.0, 0.0));
        }
        out
    }

    pub fn mul_fourier(&self, f: &Fourier) -> Self {
        let mut out = Self::zero(self.k, self.sigma);
        for (&(p, j), poly) in &self.terms {
            for (&q, &a) in &f.modes {
                out.insert(((p.0 + q.0, p.1 + q.1), j), poly, a);
            }
        }
        out
    }

    /// `nabla_{d/dz}`.
    pub fn nabla_z(&self) -> Self {
        let two_ib = c(0.0, 2.0 * self.sigma.im);
        let kk = c(0.0, 2.0 * PI * self.k as f64);
        let sigma = self.sigma;
        self.map_terms(|p, poly| {
            let mut out: Poly = poly.iter().map(|a| a * c(0.0, 2.0 * PI) * zeta(p, sigma)).collect();
            poly_add_into(&mut out, &poly_deriv(poly), 1.0 / two_ib);
            poly_add_into(&mut out, &poly_shift(poly, 1), kk);
            out
        })
    }

    /// `nabla_{d/dzbar}`.
    pub fn nabla_zbar(&self) -> Self {
        let two_ib = c(0.0, 2.0 * self.sigma.im);
        let sigma = self.sigma;
        self.map_terms(|p, poly| {
            let mut out: Poly = poly.iter().map(|a| a * c(0.0, 2.0 * PI) * zeta(p, sigma).conj()).collect();
            poly_add_into(&mut out, &poly_deriv(poly), -1.0 / two_ib);
            out
        })
    }

    /// Derivative in `sigma` of the frame, keeping the symbolic coefficients
    /// fixed. On the basis this is the term-wise derivative of the theta series.
    pub fn d_sigma(&self) -> Self {
        let f = c(0.0, PI * self.k as f64);
        self.map_terms(|_, poly| poly_shift(poly, 2).iter().map(|a| a * f).collect())
    }

    /// Re-read the same symbolic data at another `sigma`.
    pub fn at_sigma(&self, sigma: C64) -> Self {
        Self { sigma, ..self.clone() }
    }

    pub fn eval(&self, x: f64, y: f64) -> C64 {
        let k = self.k as f64;
        let mut acc = C64::default();
        for (&(p, j), poly) in &self.terms {
            let (lo, hi) = theta_range(self.k, self.sigma, j);
            let mut s = C64::default();
            for n in lo..=hi {
                let m = n as f64 + j as f64 / k;
                let t = y + m;
                let phase = c(0.0, PI * k) * self.sigma * t * t + c(0.0, 2.0 * PI * k * m * x);
                s += poly_eval(poly, t) * phase.exp();
            }
            let ep = C64::from_polar(1.0, 2.0 * PI * (p.0 as f64 * x + p.1 as f64 * y));
            acc += s * ep;
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphereSection {
    pub k: u32,
    pub field: Rational,
}

impl SphereSection {
    pub fn basis(k: u32, j: u32) -> Self {
        Self { k, field: Rational::monomial(c(1.0, 0.0), j, 0, 0) }
    }

    pub fn nabla_z(&self) -> Self {
        let conn = self.field.times_connection_form().scale(c(self.k as f64, 0.0));
        Self { k: self.k, field: &self.field.d_z() - &conn }
    }

    pub fn nabla_zbar(&self) -> Self {
        Self { k: self.k, field: self.field.d_zbar() }
    }
}

/// A smooth function on one of the models.
#[derive(Clone, Debug, PartialEq)]
pub enum Function {
    Torus(Fourier),
    Sphere(Rational),
}

impl Function {
    pub fn constant(kind: ModelKind, v: C64) -> Self {
        match kind {
            ModelKind::Torus => Self::Torus(Fourier::constant(v)),
            ModelKind::Sphere => Self::Sphere(Rational::constant(v)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Torus(_) => ModelKind::Torus,
            Self::Sphere(_) => ModelKind::Sphere,
        }
    }

    pub fn eval(&self, p: &GridPoint) -> C64 {
        match self {
            Self::Torus(f) => f.eval(p.x, p.y),
            Self::Sphere(f) => f.eval(p.z()),
        }
    }

    pub fn sample(&self, model: &KahlerModel) -> Vec<C64> {
        model.points.par_iter().map(|p| self.eval(p)).collect()
    }

    pub fn sup_norm(&self, model: &KahlerModel) -> f64 {
        self.sample(model).iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: C64) -> Self {
        match self {
            Self::Torus(f) => Self::Torus(f.scale(s)),
            Self::Sphere(f) => Self::Sphere(f.scale(s)),
        }
    }

    pub fn conj(&self) -> Self {
        match self {
            Self::Torus(f) => Self::Torus(f.conj()),
            Self::Sphere(f) => Self::Sphere(f.conj()),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        match (self, other) {
            (Self::Torus(a), Self::Torus(b)) => Ok(Self::Torus(a + b)),
            (Self::Sphere(a), Self::Sphere(b)) => Ok(Self::Sphere(a + b)),
            _ => Err(Error::ModelMismatch("functions live on different models")),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(c(-1.0, 0.0)))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        match (self, other) {
            (Self::Torus(a), Self::Torus(b)) => Ok(Self::Torus(a * b)),
            (Self::Sphere(a), Self::Sphere(b)) => Ok(Self::Sphere(a * b)),
            _ => Err(Error::ModelMismatch("functions live on different models")),
        }
    }

    pub fn d_z(&self, sigma: C64) -> Self {
        match self {
            Self::Torus(f) => Self::Torus(f.d_z(sigma)),
            Self::Sphere(f) => Self::Sphere(f.d_z()),
        }
    }

    pub fn d_zbar(&self, sigma: C64) -> Self {
        match self {
            Self::Torus(f) => Self::Torus(f.d_zbar(sigma)),
            Self::Sphere(f) => Self::Sphere(f.d_zbar()),
        }
    }

    /// Multiply by `1 / rho`, where `omega = i rho dz ^ dzbar`.
    pub fn div_density(&self, sigma: C64) -> Self {
        match self {
            Self::Torus(f) => Self::Torus(f.scale(c(sigma.im / PI, 0.0))),
            Self::Sphere(f) => Self::Sphere(f.times_weight(2)),
        }
    }

    /// Laplace-Beltrami operator of the Kähler metric, `(2 / rho) d_z d_zbar`
    /// (non-positive spectrum).
    pub fn laplacian(&self, sigma: C64) -> Self {
        self.d_z(sigma).d_zbar(sigma).div_density(sigma).scale(c(2.0, 0.0))
    }

    /// Hamiltonian vector field `X_f` with `omega(X_f, .) = df`.
    pub fn hamiltonian_field(&self, sigma: C64) -> VectorField {
        VectorField {
            alpha: self.d_zbar(sigma).div_density(sigma).scale(c(0.0, -1.0)),
            beta: self.d_z(sigma).div_density(sigma).scale(c(0.0, 1.0)),
        }
    }

    /// Poisson bracket `{f, g} = omega(X_f, X_g)`.
    pub fn poisson(&self, other: &Self, sigma: C64) -> Result<Self> {
        // omega(X_f, X_g) = df(X_g) = f_z alpha_g + f_zbar beta_g
        let xg = other.hamiltonian_field(sigma);
        self.d_z(sigma).mul(&xg.alpha)?.add(&self.d_zbar(sigma).mul(&xg.beta)?)
    }
}

/// A complex vector field `alpha d/dz + beta d/dzbar`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub alpha: Function,
    pub beta: Function,
}

impl VectorField {
    /// A section `alpha d/dz` of `T_sigma`.
    pub fn holomorphic_type(alpha: Function) -> Self {
        let kind = alpha.kind();
        Self { alpha, beta: Function::constant(kind, C64::default()) }
    }

    pub fn conj(&self) -> Self {
        Self { alpha: self.beta.conj(), beta: self.alpha.conj() }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { alpha: self.alpha.scale(s), beta: self.beta.scale(s) }
    }

    /// `X[f]`.
    pub fn apply(&self, f: &Function, sigma: C64) -> Result<Function> {
        self.alpha.mul(&f.d_z(sigma))?.add(&self.beta.mul(&f.d_zbar(sigma))?)
    }

    /// `f_X = -Lambda d(i_X omega)`, i.e. minus the symplectic divergence.
    pub fn divergence_symbol(&self, sigma: C64) -> Result<Function> {
        let div = match (&self.alpha, &self.beta) {
            (Function::Torus(a), Function::Torus(b)) => {
                Function::Torus(&a.d_z(sigma) + &b.d_zbar(sigma))
            }
            (Function::Sphere(a), Function::Sphere(b)) => {
                // (1/rho) d_z(rho a) = a_z - 2 a zbar / (1 + |z|^2)
                let da = &a.d_z() - &a.times_connection_form().scale(c(2.0, 0.0));
                let db = &b.d_zbar() - &b.conj().times_connection_form().conj().scale(c(2.0, 0.0));
                Function::Sphere(&da + &db)
            }
            _ => return Err(Error::ModelMismatch("vector field components")),
        };
        Ok(div.scale(c(-1.0, 0.0)))
    }
}

/// A smooth section of `L^k` on one of the models.
#[derive(Clone, Debug, PartialEq)]
pub enum SmoothSection {
    Torus(ThetaSection),
    Sphere(SphereSection),
}

impl SmoothSection {
    pub fn k(&self) -> u32 {
        match self {
            Self::Torus(s) => s.k,
            Self::Sphere(s) => s.k,
        }
    }

    pub fn eval(&self, p: &GridPoint) -> C64 {
        match self {
            Self::Torus(s) => s.eval(p.x, p.y),
            Self::Sphere(s) => s.field.eval(p.z()),
        }
    }

    pub fn sample(&self, model: &KahlerModel) -> Vec<C64> {
        model.points.par_iter().map(|p| self.eval(p)).collect()
    }

    pub fn scale(&self, a: C64) -> Self {
        match self {
            Self::Torus(s) => Self::Torus(s.scale(a)),
            Self::Sphere(s) => Self::Sphere(SphereSection { k: s.k, field: s.field.scale(a) }),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.k() != other.k() {
            return Err(Error::LevelMismatch { expected: self.k(), found: other.k() });
        }
        match (self, other) {
            (Self::Torus(a), Self::Torus(b)) => Ok(Self::Torus(a.add(b))),
            (Self::Sphere(a), Self::Sphere(b)) => {
                Ok(Self::Sphere(SphereSection { k: a.k, field: &a.field + &b.field }))
            }
            _ => Err(Error::ModelMismatch("sections live on different models")),
        }
    }

    pub fn mul(&self, f: &Function) -> Result<Self> {
        match (self, f) {
            (Self::Torus(s), Function::Torus(f)) => Ok(Self::Torus(s.mul_fourier(f))),
            (Self::Sphere(s), Function::Sphere(f)) => {
                Ok(Self::Sphere(SphereSection { k: s.k, field: &s.field * f }))
            }
            _ => Err(Error::ModelMismatch("function and section live on different models")),
        }
    }

    pub fn nabla_z(&self) -> Self {
        match self {
            Self::Torus(s) => Self::Torus(s.nabla_z()),
            Self::Sphere(s) => Self::Sphere(s.nabla_z()),
        }
    }

    pub fn nabla_zbar(&self) -> Self {
        match self {
            Self::Torus(s) => Self::Torus(s.nabla_zbar()),
            Self::Sphere(s) => Self::Sphere(s.nabla_zbar()),
        }
    }

    /// `nabla_X s`.
    pub fn nabla(&self, x: &VectorField) -> Result<Self> {
        self.nabla_z().mul(&x.alpha)?.add(&self.nabla_zbar().mul(&x.beta)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIGMA: C64 = C64 { re: 0.3, im: 1.1 };

    fn covariant_fd(s: &ThetaSection, x: f64, y: f64) -> (C64, C64) {
        // nabla_x = d_x + 2 pi i k y, nabla_y = d_y
        let h = 1e-5;
        let dx = (s.eval(x + h, y) - s.eval(x - h, y)) / (2.0 * h);
        let dy = (s.eval(x, y + h) - s.eval(x, y - h)) / (2.0 * h);
        let nx = dx + c(0.0, 2.0 * PI * s.k as f64 * y) * s.eval(x, y);
        let two_ib = c(0.0, 2.0 * SIGMA.im);
        ((dy - SIGMA.conj() * nx) / two_ib, (SIGMA * nx - dy) / two_ib)
    }

    #[test]
    fn theta_basis_is_holomorphic() {
        let s = ThetaSection::basis(3, SIGMA, 1);
        let (_, dzb) = covariant_fd(&s, 0.31, 0.62);
        assert!(dzb.norm() < 1e-7 * s.eval(0.31, 0.62).norm().max(1.0));
        assert!(s.nabla_zbar().terms.is_empty());
    }

    #[test]
    fn symbolic_derivatives_match_finite_differences() {
        let s = ThetaSection::basis(2, SIGMA, 1)
            .mul_fourier(&Fourier::from_modes([((1, 0), c(0.5, 0.1)), ((0, -2), c(0.2, 0.0))]));
        let s = s.add(&s.nabla_z().scale(c(0.01, 0.0)));
        for (x, y) in [(0.1, 0.2), (0.77, 0.45)] {
            let (dz, dzb) = covariant_fd(&s, x, y);
            assert!((s.nabla_z().eval(x, y) - dz).norm() < 1e-6);
            assert!((s.nabla_zbar().eval(x, y) - dzb).norm() < 1e-6);
        }
    }

    #[test]
    fn theta_obeys_transition_rule() {
        let s = ThetaSection::basis(3, SIGMA, 2);
        let (x, y) = (0.4, 0.3);
        let shifted = s.eval(x, y + 1.0);
        let expected = s.eval(x, y) * C64::from_polar(1.0, -2.0 * PI * 3.0 * x);
        assert!((shifted - expected).norm() < 1e-12);
        assert!((s.eval(x + 1.0, y) - s.eval(x, y)).norm() < 1e-12);
    }

    #[test]
    fn sigma_derivative_matches_finite_difference() {
        let s = ThetaSection::basis(2, SIGMA, 0);
        let h = 1e-6;
        let fd = (s.at_sigma(SIGMA + h).eval(0.2, 0.7) - s.at_sigma(SIGMA - h).eval(0.2, 0.7)) / (2.0 * h);
        assert!((s.d_sigma().eval(0.2, 0.7) - fd).norm() < 1e-6);
    }

    #[test]
    fn sphere_basis_is_holomorphic_and_rotation_symbol() {
        let s = SphereSection::basis(4, 2);
        assert!(s.nabla_zbar().field.is_zero());
        // i z d/dz generates the rotation about the x3 axis; f_{z d/dz} = -x3
        let x = VectorField::holomorphic_type(Function::Sphere(Rational::monomial(c(1.0, 0.0), 1, 0, 0)));
        let f = x.divergence_symbol(C64::new(0.0, 1.0)).unwrap();
        let z = C64::new(0.3, -0.8);
        let f = match f {
            Function::Sphere(r) => r.eval(z),
            _ => unreachable!(),
        };
        assert!((f + Rational::x3().eval(z)).norm() < 1e-13);
    }

    #[test]
    fn hamiltonian_field_contracts_to_differential() {
        let sigma = C64::new(0.0, 1.0);
        for f in [
            Function::Sphere(&Rational::x3() * &Rational::x1()),
            Function::Torus(&Fourier::cos((1, 0)) + &Fourier::sin((1, 2))),
        ] {
            let xf = f.hamiltonian_field(sigma);
            // omega(X_f, Y) = df(Y) with Y = d/dz: omega(X, d/dz) = -i rho beta
            let p = GridPoint { x: 0.21, y: 0.37, weight: 1.0 };
            let rho = match f {
                Function::Torus(_) => PI / sigma.im,
                Function::Sphere(_) => 1.0 / (1.0 + p.z().norm_sqr()).powi(2),
            };
            let lhs = c(0.0, -rho) * xf.beta.eval(&p);
            assert!((lhs - f.d_z(sigma).eval(&p)).norm() < 1e-12);
            let bracket = f.poisson(&f, sigma).unwrap();
            assert!(bracket.eval(&p).norm() < 1e-12);
        }
    }

    #[test]
    fn flat_laplacian_on_modes() {
        // at sigma = i the metric is 2 pi (dx^2 + dy^2)
        let f = Function::Torus(Fourier::cos((1, 2)));
        let lap = f.laplacian(C64::new(0.0, 1.0));
        let p = GridPoint { x: 0.3, y: 0.1, weight: 1.0 };
        let expected = -4.0 * PI * PI * 5.0 / (2.0 * PI) * f.eval(&p);
        assert!((lap.eval(&p) - expected).norm() < 1e-12);
    }
}
