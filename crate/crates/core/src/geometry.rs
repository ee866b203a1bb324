//! The two built-in Kähler models and their families of complex structures.
//!
//! Torus: `[0,1)^2` with `omega = 2 pi dx ^ dy`, complex coordinate
//! `z = x + sigma y` for `sigma` in the upper half-plane.
//!
//! Sphere: the stereographic chart `z = u + i v` with
//! `omega = i dz ^ dzbar / (1 + |z|^2)^2`, i.e. half the round area form.
//! Both have total symplectic volume `2 pi`, the prequantum unit.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

pub const MIN_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Torus,
    Sphere,
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "torus" => Ok(Self::Torus),
            "sphere" => Ok(Self::Sphere),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Torus => write!(f, "torus"),
            Self::Sphere => write!(f, "sphere"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grid {
    /// `n x n` uniform nodes.
    Torus { n: usize },
    /// Gauss-Legendre in `cos(theta)` times uniform in `phi`.
    Sphere { n_theta: usize, n_phi: usize },
}

/// A quadrature node in real chart coordinates; `weight` already contains the
/// symplectic density, so `sum weight * f ~ int f omega`.
#[derive(Clone, Copy, Debug)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

impl GridPoint {
    /// Stereographic coordinate of a sphere node.
    pub fn z(&self) -> C64 {
        C64::new(self.x, self.y)
    }
}

#[derive(Clone, Debug)]
pub struct KahlerModel {
    pub kind: ModelKind,
    /// Coefficient `c` in `omega = c dx^dy` (torus) or
    /// `omega = c du^dv / (1+u^2+v^2)^2` (sphere).
    pub omega_scale: f64,
    pub grid: Grid,
    pub chern_n: i32,
    pub points: Vec<GridPoint>,
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = x;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

pub fn build_model(kind: ModelKind, grid: Grid) -> Result<KahlerModel> {
    match (kind, grid) {
        (ModelKind::Torus, Grid::Torus { n }) => {
            if n < MIN_GRID {
                return Err(Error::GridTooSmall { name: "n", value: n });
            }
            let omega_scale = 2.0 * PI;
            let w = omega_scale / (n * n) as f64;
            let points = (0..n)
                .flat_map(|iy| {
                    (0..n).map(move |ix| GridPoint {
                        x: ix as f64 / n as f64,
                        y: iy as f64 / n as f64,
                        weight: w,
                    })
                })
                .collect();
            Ok(KahlerModel { kind, omega_scale, grid, chern_n: 0, points })
        }
        (ModelKind::Sphere, Grid::Sphere { n_theta, n_phi }) => {
            if n_theta < MIN_GRID {
                return Err(Error::GridTooSmall { name: "n_theta", value: n_theta });
            }
            if n_phi < MIN_GRID {
                return Err(Error::GridTooSmall { name: "n_phi", value: n_phi });
            }
            let (nodes, weights) = gauss_legendre(n_theta);
            let mut points = Vec::with_capacity(n_theta * n_phi);
            for (c, wc) in nodes.iter().zip(&weights) {
                let r = ((1.0 - c) / (1.0 + c)).sqrt();
                for ip in 0..n_phi {
                    let phi = 2.0 * PI * ip as f64 / n_phi as f64;
                    points.push(GridPoint {
                        x: r * phi.cos(),
                        y: r * phi.sin(),
                        // omega = dA / 2 and dA = d(cos theta) d phi
                        weight: 0.5 * wc * 2.0 * PI / n_phi as f64,
                    });
                }
            }
            Ok(KahlerModel { kind, omega_scale: 2.0, grid, chern_n: 2, points })
        }
        _ => Err(Error::ModelMismatch("grid descriptor does not match model kind")),
    }
}

impl KahlerModel {
    pub fn torus(n: usize) -> Result<Self> {
        build_model(ModelKind::Torus, Grid::Torus { n })
    }

    pub fn sphere(n_theta: usize, n_phi: usize) -> Result<Self> {
        build_model(ModelKind::Sphere, Grid::Sphere { n_theta, n_phi })
    }

    /// A grid that integrates every level-`k` quantity used here to near
    /// machine precision.
    pub fn for_level(kind: ModelKind, k: u32) -> Self {
        let k = k as usize;
        match kind {
            ModelKind::Torus => Self::torus((4 * k + 16).max(32)).unwrap(),
            ModelKind::Sphere => Self::sphere(k + 8, 2 * k + 16).unwrap(),
        }
    }

    pub fn volume(&self) -> f64 {
        self.points.iter().map(|p| p.weight).sum()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `int f omega` for grid samples `f`.
    pub fn integrate(&self, f: &[C64]) -> C64 {
        self.points.iter().zip(f).map(|(p, v)| *v * p.weight).sum()
    }

    /// Symplectic form as a 2x2 antisymmetric matrix at a node:
    /// `omega(X, Y) = X^T W Y` in chart coordinates.
    pub fn omega_matrix(&self, p: &GridPoint) -> Matrix2<f64> {
        let c = match self.kind {
            ModelKind::Torus => self.omega_scale,
            ModelKind::Sphere => self.omega_scale / (1.0 + p.x * p.x + p.y * p.y).powi(2),
        };
        Matrix2::new(0.0, c, -c, 0.0)
    }

    /// `rho` with `omega = i rho dz ^ dzbar` in the complex coordinate of `sigma`.
    pub fn density(&self, sigma: C64, z: C64) -> f64 {
        match self.kind {
            ModelKind::Torus => PI / sigma.im,
            ModelKind::Sphere => 1.0 / (1.0 + z.norm_sqr()).powi(2),
        }
    }
}

pub fn check_sigma(kind: ModelKind, sigma: C64) -> Result<()> {
    if kind == ModelKind::Torus && (sigma.im <= 0.0 || !sigma.im.is_finite() || !sigma.re.is_finite()) {
        return Err(Error::LowerHalfPlane(format!("{sigma}")));
    }
    Ok(())
}

/// Parameter used for the sphere, whose Teichmüller space is a point.
pub const SPHERE_SIGMA: C64 = C64 { re: 0.0, im: 1.0 };

/// Almost-complex structure of the torus family in `(x, y)` coordinates,
/// characterized by `dz o I = i dz` for `z = x + sigma y`.
pub fn torus_i_matrix(sigma: C64) -> Matrix2<f64> {
    let (a, b) = (sigma.re, sigma.im);
    Matrix2::new(-a / b, -(a * a + b * b) / b, 1.0 / b, a / b)
}

/// `d I / d(Re sigma)` and `d I / d(Im sigma)`.
pub fn torus_i_derivatives(sigma: C64) -> (Matrix2<f64>, Matrix2<f64>) {
    let (a, b) = (sigma.re, sigma.im);
    let da = Matrix2::new(-1.0 / b, -2.0 * a / b, 0.0, 1.0 / b);
    let db = Matrix2::new(a / (b * b), a * a / (b * b) - 1.0, -1.0 / (b * b), -a / (b * b));
    (da, db)
}

#[derive(Clone, Debug)]
pub struct ComplexStructurePoint {
    pub sigma: C64,
    pub i_matrix: Vec<Matrix2<f64>>,
    pub metric: Vec<Matrix2<f64>>,
    /// `(dz(e_1), dz(e_2))` in chart coordinates.
    pub dz_frame: [C64; 2],
}

pub fn complex_structure(model: &KahlerModel, sigma: C64) -> Result<ComplexStructurePoint> {
    check_sigma(model.kind, sigma)?;
    let (sigma, i_const, dz_frame) = match model.kind {
        ModelKind::Torus => (sigma, torus_i_matrix(sigma), [C64::new(1.0, 0.0), sigma]),
        ModelKind::Sphere => (
            SPHERE_SIGMA,
            Matrix2::new(0.0, -1.0, 1.0, 0.0),
            [C64::new(1.0, 0.0), C64::new(0.0, 1.0)],
        ),
    };
    let i_matrix = vec![i_const; model.len()];
    let metric = model
        .points
        .iter()
        .map(|p| model.omega_matrix(p) * i_const)
        .collect();
    Ok(ComplexStructurePoint { sigma, i_matrix, metric, dz_frame })
}

/// A real tangent vector `V = re d/d(Re sigma) + im d/d(Im sigma)` to the
/// upper half-plane, stored as a complex number. Its `(1,0)` part is
/// `V' = v d/dsigma` with `v` equal to the same complex number.
pub type Direction = C64;

#[derive(Clone, Debug)]
pub struct FamilyVariation {
    pub direction: Direction,
    /// `V[I]` pointwise.
    pub vi: Vec<Matrix2<f64>>,
    /// `G(V) = g d/dz (x) d/dz`; the coefficient `g` at each node.
    pub g_coeff: Vec<C64>,
    /// `G~(V) = G + conj(G)` as a real symmetric tensor in chart coordinates.
    pub gtilde: Vec<Matrix2<f64>>,
}

/// Components of `d/dz` in chart coordinates for the torus family.
pub fn torus_dz_vector(sigma: C64) -> [C64; 2] {
    let two_ib = C64::new(0.0, 2.0 * sigma.im);
    [-sigma.conj() / two_ib, C64::new(1.0, 0.0) / two_ib]
}

pub fn variation(model: &KahlerModel, sigma: C64, v: Direction) -> Result<FamilyVariation> {
    check_sigma(model.kind, sigma)?;
    let n = model.len();
    if model.kind == ModelKind::Sphere {
        return Ok(FamilyVariation {
            direction: v,
            vi: vec![Matrix2::zeros(); n],
            g_coeff: vec![C64::new(0.0, 0.0); n],
            gtilde: vec![Matrix2::zeros(); n],
        });
    }
    let (da, db) = torus_i_derivatives(sigma);
    let vi = da * v.re + db * v.im;
    // V'[I] = v dI/dsigma, dI/dsigma = (dI/da - i dI/db) / 2
    let d_sigma = |i: usize, j: usize| C64::new(da[(i, j)], -db[(i, j)]) * 0.5;
    let dz = torus_dz_vector(sigma);
    let dzb = [dz[0].conj(), dz[1].conj()];
    // (G omega)(X) = g omega(X, d/dz) d/dz, so g = dz(V'[I] dzbar) / omega(dzbar, dz)
    let mut vi_dzb = [C64::new(0.0, 0.0); 2];
    for (i, out) in vi_dzb.iter_mut().enumerate() {
        for (j, c) in dzb.iter().enumerate() {
            *out += v * d_sigma(i, j) * c;
        }
    }
    let dz_of = |w: [C64; 2]| w[0] + sigma * w[1];
    let w = model.omega_matrix(&model.points[0]);
    let omega_c = |a: [C64; 2], b: [C64; 2]| {
        let mut s = C64::new(0.0, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                s += a[i] * w[(i, j)] * b[j];
            }
        }
        s
    };
    let g = dz_of(vi_dzb) / omega_c(dzb, dz);
    let mut gt = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            gt[(i, j)] = 2.0 * (g * dz[i] * dz[j]).re;
        }
    }
    Ok(FamilyVariation {
        direction: v,
        vi: vec![vi; n],
        g_coeff: vec![g; n],
        gtilde: vec![gt; n],
    })
}

/// Closed form of the coefficient of `G(V)` on the torus: `g = -i v / pi`.
pub fn torus_g_coeff(v: Direction) -> C64 {
    C64::new(0.0, -1.0) * v / PI
}

/// `||dbar_sigma G(V)||_inf` over the grid via central differences of the
/// coefficient field along the grid axes.
pub fn rigidity_residual(model: &KahlerModel, sigma: C64, v: Direction) -> Result<f64> {
    let var = variation(model, sigma, v)?;
    let Grid::Torus { n } = model.grid else {
        return Ok(0.0);
    };
    let h = 1.0 / n as f64;
    let idx = |ix: usize, iy: usize| (iy % n) * n + (ix % n);
    let mut worst: f64 = 0.0;
    for iy in 0..n {
        for ix in 0..n {
            let gx = (var.g_coeff[idx(ix + 1, iy)] - var.g_coeff[idx(ix + n - 1, iy)]) / (2.0 * h);
            let gy = (var.g_coeff[idx(ix, iy + 1)] - var.g_coeff[idx(ix, iy + n - 1)]) / (2.0 * h);
            // d/dzbar = (sigma d/dx - d/dy) / (sigma - conj sigma)
            let dzb = (sigma * gx - gy) / (sigma - sigma.conj());
            worst = worst.max(dzb.norm());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct RicciData {
    /// Ricci potential, mean zero.
    pub potential: Vec<f64>,
    /// Ricci form as a multiple of the symplectic density at each node.
    pub ricci_form: Vec<f64>,
    pub chern_n: i32,
}

pub fn ricci_data(model: &KahlerModel, sigma: C64) -> Result<RicciData> {
    check_sigma(model.kind, sigma)?;
    let n = model.len();
    Ok(RicciData {
        potential: vec![0.0; n],
        ricci_form: vec![model.chern_n as f64; n],
        chern_n: model.chern_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: &Matrix2<f64>) -> f64 {
        m.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn build_rejects_small_grid() {
        assert!(matches!(KahlerModel::torus(2), Err(Error::GridTooSmall { .. })));
        assert!(KahlerModel::sphere(3, 8).is_err());
        assert!("klein".parse::<ModelKind>().is_err());
    }

    #[test]
    fn volumes_are_prequantum_unit() {
        let t = KahlerModel::torus(32).unwrap();
        assert!((t.volume() - 2.0 * PI).abs() < 1e-12);
        let s = KahlerModel::sphere(24, 48).unwrap();
        assert!((s.volume() - 2.0 * PI).abs() < 1e-12);
        assert_eq!(s.chern_n, 2);
        assert_eq!(t.chern_n, 0);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(7);
        let int: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert!((int - 2.0 / 13.0).abs() < 1e-14);
    }

    #[test]
    fn complex_structure_at_i_is_standard() {
        let t = KahlerModel::torus(8).unwrap();
        let cs = complex_structure(&t, C64::new(0.0, 1.0)).unwrap();
        assert!(max_abs(&(cs.i_matrix[5] - Matrix2::new(0.0, -1.0, 1.0, 0.0))) < 1e-15);
        assert!(complex_structure(&t, C64::new(0.0, -1.0)).is_err());
    }

    #[test]
    fn complex_structure_solves_dz_equation() {
        // dz o I = i dz, solved as a linear system for the rows of I
        let sigma = C64::new(0.7, 1.3);
        let i = torus_i_matrix(sigma);
        for col in 0..2 {
            let dz_ie = C64::new(i[(0, col)], 0.0) + sigma * i[(1, col)];
            let dz_e = if col == 0 { C64::new(1.0, 0.0) } else { sigma };
            assert!((dz_ie - C64::i() * dz_e).norm() < 1e-14);
        }
        assert!(max_abs(&(i * i + Matrix2::identity())) < 1e-12);
    }

    #[test]
    fn metric_is_positive_and_omega_is_invariant() {
        for model in [KahlerModel::torus(8).unwrap(), KahlerModel::sphere(6, 8).unwrap()] {
            let cs = complex_structure(&model, C64::new(-0.4, 0.8)).unwrap();
            for (p, (i, g)) in model.points.iter().zip(cs.i_matrix.iter().zip(&cs.metric)) {
                assert!((g - g.transpose()).norm() < 1e-12);
                assert!(g[(0, 0)] > 0.0 && g.determinant() > 0.0);
                let w = model.omega_matrix(p);
                assert!(max_abs(&(i.transpose() * w * i - w)) < 1e-12 * w.norm());
            }
        }
    }

    #[test]
    fn variation_matches_finite_difference() {
        let t = KahlerModel::torus(4).unwrap();
        let var = variation(&t, C64::new(0.0, 1.0), C64::new(0.0, 1.0)).unwrap();
        assert!(max_abs(&(var.vi[0] - Matrix2::new(0.0, -1.0, -1.0, 0.0))) < 1e-12);
        let h = 1e-6;
        let fd = (torus_i_matrix(C64::new(0.0, 1.0 + h)) - torus_i_matrix(C64::new(0.0, 1.0 - h))) / (2.0 * h);
        assert!(max_abs(&(fd - var.vi[0])) < 1e-8);
    }

    #[test]
    fn g_coefficient_closed_form() {
        let t = KahlerModel::torus(4).unwrap();
        for v in [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.3, -2.0)] {
            let var = variation(&t, C64::new(0.5, 1.5), v).unwrap();
            assert!((var.g_coeff[0] - torus_g_coeff(v)).norm() < 1e-13);
        }
    }

    #[test]
    fn sphere_and_zero_direction_give_zero_variation() {
        let s = KahlerModel::sphere(6, 8).unwrap();
        let var = variation(&s, SPHERE_SIGMA, C64::new(1.0, 1.0)).unwrap();
        assert!(var.vi.iter().all(|m| max_abs(m) == 0.0));
        let t = KahlerModel::torus(4).unwrap();
        let var = variation(&t, C64::new(0.0, 1.0), C64::new(0.0, 0.0)).unwrap();
        assert!(var.vi.iter().all(|m| max_abs(m) == 0.0));
    }

    #[test]
    fn rigidity_and_ricci() {
        let t = KahlerModel::torus(16).unwrap();
        for s in [C64::new(0.0, 1.0), C64::new(0.0, 2.0)] {
            assert!(rigidity_residual(&t, s, C64::new(1.0, 0.0)).unwrap() <= 1e-12);
        }
        let s = KahlerModel::sphere(6, 8).unwrap();
        assert_eq!(rigidity_residual(&s, SPHERE_SIGMA, C64::new(1.0, 0.0)).unwrap(), 0.0);
        let r = ricci_data(&s, SPHERE_SIGMA).unwrap();
        assert!(r.ricci_form.iter().all(|&v| v == 2.0));
        let f: Vec<C64> = r.potential.iter().map(|&v| C64::new(v, 0.0)).collect();
        assert!(s.integrate(&f).norm() <= 1e-10);
        let r = ricci_data(&t, C64::new(1.0, 2.0)).unwrap();
        assert!(r.potential.iter().chain(&r.ricci_form).all(|&v| v == 0.0));
    }
}
