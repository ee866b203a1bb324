//! The Hitchin connection `nabla_V = V - u(V)` in the bundle `H^(k)` over the
//! family of complex structures, its defining holomorphicity condition, parallel
//! transport, and the derivative of the projection.
//!
//! For the torus family `G(V) = g d/dz (x) d/dz` with constant `g = -i v / pi`,
//! the Ricci potential vanishes and `n = 0`, so `u(V) = (1/4k) Delta_{G(V)}`.

use nalgebra::Matrix2;

use crate::fields::{Function, SmoothSection, VectorField};
use crate::fourier::Fourier;
use crate::geometry::{check_sigma, torus_dz_vector, torus_i_derivatives, variation, Direction, KahlerModel, ModelKind};
use crate::linalg::{off_scalar_defect, CMatrix};
use crate::quantization::{holomorphic_basis, SectionBasis};
use crate::{Error, Result, C64};

/// `Delta_G = nabla_X nabla_Y + nabla_Z` with one global pair on the torus.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub x: VectorField,
    pub y: VectorField,
    pub z: VectorField,
}

#[derive(Clone, Debug)]
pub struct HitchinForm {
    pub sigma: C64,
    pub v: Direction,
    pub k: u32,
    /// `pi (1/2) Delta_{G(V)}` on `H^(k)`.
    pub laplace_part: CMatrix,
    /// `pi nabla_{G(V) dF}`.
    pub gradient_part: CMatrix,
    /// `pi V'[F]`.
    pub potential_part: CMatrix,
    pub u_matrix: CMatrix,
    /// Same assembly through the one-form/field decomposition.
    pub u_matrix_decomposed: CMatrix,
    pub decomposition: Decomposition,
    /// Coefficient `g` of `G(V)`.
    pub g: C64,
}

fn const_fn(kind: ModelKind, v: C64) -> Function {
    Function::constant(kind, v)
}

/// Coefficient `g` of `G(V)`; zero on the sphere.
fn g_coefficient(model: &KahlerModel, sigma: C64, v: Direction) -> Result<C64> {
    let var = variation(model, sigma, v)?;
    Ok(var.g_coeff.first().copied().unwrap_or_default())
}

/// `(1/2) Delta_G s = (1/2) tr nabla (G . nabla^{1,0} s)`: take `nabla_z s`, raise
/// with `G`, differentiate again and trace. The frame `d/dz` is parallel on
/// the flat torus.
fn half_laplace_chain(s: &SmoothSection, g: C64) -> Result<SmoothSection> {
    let kind = match s {
        SmoothSection::Torus(_) => ModelKind::Torus,
        SmoothSection::Sphere(_) => ModelKind::Sphere,
    };
    let raised = s.nabla_z().mul(&const_fn(kind, g))?;
    Ok(raised.nabla_z().scale(C64::new(0.5, 0.0)))
}

/// `u(V) s` for a smooth section `s` at level `k`.
pub fn apply_u(model: &KahlerModel, sigma: C64, v: Direction, s: &SmoothSection) -> Result<SmoothSection> {
    let g = g_coefficient(model, sigma, v)?;
    let k = s.k() as f64;
    let lap = half_laplace_chain(s, g)?;
    Ok(lap.scale(C64::new(1.0 / (2.0 * k + model.chern_n as f64), 0.0)))
}

fn decomposition(kind: ModelKind, g: C64) -> Decomposition {
    Decomposition {
        x: VectorField::holomorphic_type(const_fn(kind, g * 0.5)),
        y: VectorField::holomorphic_type(const_fn(kind, C64::new(1.0, 0.0))),
        z: VectorField::holomorphic_type(const_fn(kind, C64::default())),
    }
}

pub fn hitchin_form(model: &KahlerModel, sigma: C64, v: Direction, k: i64) -> Result<HitchinForm> {
    let basis = holomorphic_basis(model, sigma, k)?;
    hitchin_form_on(&basis, v)
}

pub fn hitchin_form_on(basis: &SectionBasis, v: Direction) -> Result<HitchinForm> {
    let model = &basis.model;
    let sigma = basis.sigma;
    let g = g_coefficient(model, sigma, v)?;
    let dim = basis.dim();
    let k = basis.k;
    let scale = 1.0 / (2.0 * k as f64 + model.chern_n as f64);

    let lap_images = basis.map_basis(|s| half_laplace_chain(s, g))?;
    let laplace_part = basis.operator_from_images(&lap_images)?;
    // F = 0 for both built-in models
    let gradient_part = CMatrix::zeros(dim, dim);
    let potential_part = CMatrix::zeros(dim, dim);
    let u_matrix = (&laplace_part - &gradient_part + &potential_part * C64::new(2.0 * k as f64, 0.0))
        * C64::new(scale, 0.0);

    let decomposition = decomposition(model.kind, g);
    let dec_images = basis.map_basis(|s| {
        s.nabla(&decomposition.y)?.nabla(&decomposition.x)?.add(&s.nabla(&decomposition.z)?)
    })?;
    let u_matrix_decomposed = basis.operator_from_images(&dec_images)? * C64::new(scale, 0.0);

    Ok(HitchinForm {
        sigma,
        v,
        k,
        laplace_part,
        gradient_part,
        potential_part,
        u_matrix,
        u_matrix_decomposed,
        decomposition,
        g,
    })
}

/// `dz(M d/dzbar)` for a complex 2x2 matrix `M` acting on chart vectors.
fn dz_of_image_of_dzbar(sigma: C64, m: &Matrix2<C64>) -> C64 {
    let dz = torus_dz_vector(sigma);
    let dzb = [dz[0].conj(), dz[1].conj()];
    let img = [m[(0, 0)] * dzb[0] + m[(0, 1)] * dzb[1], m[(1, 0)] * dzb[0] + m[(1, 1)] * dzb[1]];
    img[0] + sigma * img[1]
}

/// Residual of `(i/2) V[I] nabla^{1,0} s + nabla^{0,1} (u(V) s) = 0` for a
/// direction with `(1,0)` part `v1 d/dsigma` and `(0,1)` part `v2 d/dsigmabar`.
/// `u` only sees the `(1,0)` part. Returns the sup over basis sections and grid,
/// relative to the larger of the two terms.
pub fn eqcond_residual_split(model: &KahlerModel, sigma: C64, v1: C64, v2: C64, k: i64) -> Result<f64> {
    check_sigma(model.kind, sigma)?;
    let basis = holomorphic_basis(model, sigma, k)?;
    if model.kind == ModelKind::Sphere {
        return Ok(0.0);
    }
    let (da, db) = torus_i_derivatives(sigma);
    let to_c = |m: Matrix2<f64>| m.map(|x| C64::new(x, 0.0));
    let d_sigma = (to_c(da) - to_c(db) * C64::i()) * C64::new(0.5, 0.0);
    let d_sigmabar = (to_c(da) + to_c(db) * C64::i()) * C64::new(0.5, 0.0);
    let vi = d_sigma * v1 + d_sigmabar * v2;
    // the 1-form (i/2) V[I] nabla^{1,0} s = (i/2) nabla_z s (dz o V[I]), whose dzbar part is
    let coef = C64::new(0.0, 0.5) * dz_of_image_of_dzbar(sigma, &vi);
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for s in &basis.symbolic {
        let a = s.nabla_z().scale(coef).sample(model);
        let b = apply_u(model, sigma, v1, s)?.nabla_zbar().sample(model);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x + y).norm());
            scale = scale.max(x.norm()).max(y.norm());
        }
    }
    Ok(if scale == 0.0 { 0.0 } else { worst / scale })
}

/// [`eqcond_residual_split`] for a real direction `V`.
pub fn eqcond_residual(model: &KahlerModel, sigma: C64, v: Direction, k: i64) -> Result<f64> {
    eqcond_residual_split(model, sigma, v, v.conj(), k)
}

/// Matrix `A(sigma)` of `s_j -> pi (d/dsigma - u(d/dsigma)) s_j` in the moving
/// theta frame. Along a path the coefficients of a parallel section obey
/// `c' = -sigma'(t) A(sigma) c`.
pub fn frame_matrix(model: &KahlerModel, sigma: C64, k: i64) -> Result<CMatrix> {
    let basis = holomorphic_basis(model, sigma, k)?;
    let one = C64::new(1.0, 0.0);
    let images = basis.map_basis(|s| {
        let ds = match s {
            SmoothSection::Torus(t) => SmoothSection::Torus(t.d_sigma()),
            SmoothSection::Sphere(_) => s.scale(C64::default()),
        };
        ds.add(&apply_u(model, sigma, one, s)?.scale(C64::new(-1.0, 0.0)))
    })?;
    basis.operator_from_images(&images)
}

#[derive(Clone, Debug)]
pub struct TransportResult {
    pub path: Vec<C64>,
    pub k: u32,
    pub propagator: CMatrix,
    pub step_count: usize,
    pub local_error_estimate: f64,
}

fn check_path(model: &KahlerModel, path: &[C64]) -> Result<()> {
    if path.is_empty() {
        return Err(Error::PathLeavesDomain("empty path".into()));
    }
    for &s in path {
        if model.kind == ModelKind::Torus && !(s.im > 0.0) {
            return Err(Error::PathLeavesDomain(format!("vertex {s} is not in the upper half-plane")));
        }
    }
    Ok(())
}

fn segment_counts(path: &[C64], step: f64) -> Vec<usize> {
    path.windows(2)
        .map(|w| ((w[1] - w[0]).norm() / step).ceil().max(1.0) as usize)
        .collect()
}

/// RK4 along the polyline `path` with `counts[i]` uniform substeps on segment `i`.
fn integrate(model: &KahlerModel, path: &[C64], k: i64, counts: &[usize]) -> Result<(CMatrix, usize)> {
    let dim = crate::quantization::dimension(model.kind, k as u32);
    let mut c = CMatrix::identity(dim, dim);
    let mut steps = 0;
    for (w, &n) in path.windows(2).zip(counts) {
        let (a, b) = (w[0], w[1]);
        if a == b {
            continue;
        }
        let vel = b - a;
        let h = 1.0 / n as f64;
        let rhs = |t: f64, c: &CMatrix| -> Result<CMatrix> {
            let m = frame_matrix(model, a + vel * t, k)? * vel;
            Ok(-(m * c))
        };
        for i in 0..n {
            let t = i as f64 * h;
            let k1 = rhs(t, &c)?;
            let k2 = rhs(t + h / 2.0, &(&c + &k1 * C64::new(h / 2.0, 0.0)))?;
            let k3 = rhs(t + h / 2.0, &(&c + &k2 * C64::new(h / 2.0, 0.0)))?;
            let k4 = rhs(t + h, &(&c + &k3 * C64::new(h, 0.0)))?;
            c += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0);
            steps += 1;
        }
    }
    Ok((c, steps))
}

fn doubled(counts: &[usize], times: u32) -> Vec<usize> {
    counts.iter().map(|n| n << times).collect()
}

/// Parallel transport of `H^(k)` along the polyline `path` (coefficients in the
/// theta frame at the start to coefficients in the theta frame at the end).
/// The error estimate is the Richardson difference against half the step.
pub fn transport(model: &KahlerModel, path: &[C64], k: i64, step: f64) -> Result<TransportResult> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::BadStep(step));
    }
    check_path(model, path)?;
    let counts = segment_counts(path, step);
    let (coarse, _) = integrate(model, path, k, &counts)?;
    let (fine, step_count) = integrate(model, path, k, &doubled(&counts, 1))?;
    let defect = (&coarse - &fine).norm() / 15.0;
    if defect > 1e-2 {
        return Err(Error::StepTooLarge { step, defect });
    }
    Ok(TransportResult {
        path: path.to_vec(),
        k: k as u32,
        propagator: fine,
        step_count,
        local_error_estimate: defect,
    })
}

/// Off-scalar defect and scalar of a loop propagator.
pub fn holonomy(model: &KahlerModel, path: &[C64], k: i64, step: f64) -> Result<(C64, f64)> {
    let t = transport(model, path, k, step)?;
    Ok(off_scalar_defect(&t.propagator))
}

/// Richardson defects `||P_h - P_{h/2}||` for `h = base_step / 2^i`,
/// `i < levels`, plus their log-log slope against `h`.
pub fn step_order(model: &KahlerModel, path: &[C64], k: i64, base_step: f64, levels: u32) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    check_path(model, path)?;
    let counts = segment_counts(path, base_step);
    let mut steps = Vec::new();
    let mut defects = Vec::new();
    let mut prev = integrate(model, path, k, &counts)?.0;
    for i in 0..levels {
        let next = integrate(model, path, k, &doubled(&counts, i + 1))?.0;
        steps.push(base_step / f64::from(1u32 << i));
        defects.push((&prev - &next).norm());
        prev = next;
    }
    let slope = crate::linalg::loglog_slope(&steps, &defects);
    Ok((steps, defects, slope))
}

#[derive(Clone, Debug)]
pub struct ProjectionDerivative {
    pub residual: f64,
    /// Rounding noise amplified by the difference quotient.
    pub cancellation: f64,
}

/// Probe sections: the holomorphic basis and a few of its non-holomorphic
/// multiples, all frozen at `sigma`.
pub fn default_probes(basis: &SectionBasis) -> Result<Vec<SmoothSection>> {
    let mut out = basis.symbolic.clone();
    if basis.kind() == ModelKind::Torus {
        for (p, amp) in [((1, 0), C64::new(1.0, 0.0)), ((0, 1), C64::new(0.5, -0.5)), ((1, -1), C64::new(0.0, 1.0))] {
            let f = Function::Torus(Fourier::mode(p, amp));
            out.push(basis.symbolic[0].mul(&f)?);
        }
    }
    Ok(out)
}

/// Compare `pi V[pi] s` (central differences of the projection at
/// `sigma +- fd_step v`) with `pi u(V)^* s - pi u(V)^* pi s` for fixed probes.
pub fn projection_derivative_residual(
    model: &KahlerModel,
    sigma: C64,
    v: Direction,
    k: i64,
    fd_step: f64,
    probes: Option<&[SmoothSection]>,
) -> Result<ProjectionDerivative> {
    if !(fd_step > 0.0) {
        return Err(Error::BadStep(fd_step));
    }
    let basis = holomorphic_basis(model, sigma, k)?;
    let owned;
    let probes = match probes {
        Some(p) => p,
        None => {
            owned = default_probes(&basis)?;
            &owned
        }
    };
    let values = basis.sample_sections(probes)?;
    if v == C64::default() {
        return Ok(ProjectionDerivative { residual: 0.0, cancellation: 0.0 });
    }
    let plus = holomorphic_basis(model, sigma + v * fd_step, k)?;
    let minus = holomorphic_basis(model, sigma - v * fd_step, k)?;
    let proj_p = &plus.samples * plus.project_columns(&values);
    let proj_m = &minus.samples * minus.project_columns(&values);
    let dpi = (proj_p - proj_m) * C64::new(0.5 / fd_step, 0.0);
    let lhs = basis.project_columns(&dpi);

    // <u^* w, s_i> = <w, u s_i>
    let us = basis.sample_sections(&basis.map_basis(|s| apply_u(model, basis.sigma, v, s))?)?;
    let adj = |w: &CMatrix| -> CMatrix {
        let mut weighted = w.clone();
        for (r, mut row) in weighted.row_iter_mut().enumerate() {
            row *= C64::new(basis.pair_weight[r], 0.0);
        }
        &basis.gram_inv * (us.adjoint() * weighted)
    };
    let pi_values = &basis.samples * basis.project_columns(&values);
    let rhs = adj(&values) - adj(&pi_values);

    let mut residual: f64 = 0.0;
    let mut probe_scale: f64 = 0.0;
    for j in 0..probes.len() {
        let d = lhs.column(j) - rhs.column(j);
        let norm = basis.norm(values.column(j).as_slice());
        residual = residual.max(basis.coeff_norm(&d.into_owned()) / norm);
        probe_scale = probe_scale.max(norm);
    }
    Ok(ProjectionDerivative { residual, cancellation: f64::EPSILON / fd_step })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::linalg::max_abs;

    fn torus(k: u32) -> KahlerModel {
        KahlerModel::for_level(ModelKind::Torus, k)
    }

    const RE: C64 = C64 { re: 1.0, im: 0.0 };
    const IM: C64 = C64 { re: 0.0, im: 1.0 };

    #[test]
    fn level_one_form_is_scalar() {
        let h = hitchin_form(&torus(1), IM, IM, 1).unwrap();
        assert_eq!(h.u_matrix.shape(), (1, 1));
        assert!(max_abs(&h.gradient_part) == 0.0 && max_abs(&h.potential_part) == 0.0);
        // u(V) theta = v d_sigma theta - (i v / 4b) theta and the Gaussian second
        // moment gives pi(d_sigma theta) = (i / 4b) theta, so the compression vanishes
        assert!(h.u_matrix[(0, 0)].norm() < 1e-12, "{}", h.u_matrix[(0, 0)]);
    }

    #[test]
    fn u_matches_sigma_derivative_of_theta_series() {
        let sigma = IM;
        let model = torus(3);
        let basis = holomorphic_basis(&model, sigma, 3).unwrap();
        for s in &basis.symbolic {
            let u = apply_u(&model, sigma, RE, s).unwrap().sample(&model);
            // term-wise derivative by finite differences of the truncated series
            let h = 1e-6;
            let SmoothSection::Torus(t) = s else { unreachable!() };
            let sp = SmoothSection::Torus(t.at_sigma(sigma + h)).sample(&model);
            let sm = SmoothSection::Torus(t.at_sigma(sigma - h)).sample(&model);
            let val = s.sample(&model);
            for i in (0..val.len()).step_by(37) {
                let ds = (sp[i] - sm[i]) / (2.0 * h);
                let expected = ds - C64::new(0.0, 0.25 / sigma.im) * val[i];
                assert!((u[i] - expected).norm() < 1e-6 * (1.0 + expected.norm()));
            }
        }
    }

    #[test]
    fn assembly_and_linearity() {
        let model = torus(3);
        let sigma = C64::new(0.3, 1.4);
        let h1 = hitchin_form(&model, sigma, RE, 3).unwrap();
        let h2 = hitchin_form(&model, sigma, IM, 3).unwrap();
        assert!(max_abs(&(&h1.u_matrix - &h1.u_matrix_decomposed)) < 1e-10);
        let (a, b) = (0.7, -1.9);
        let h = hitchin_form(&model, sigma, RE * a + IM * b, 3).unwrap();
        let lin = &h1.u_matrix * C64::new(a, 0.0) + &h2.u_matrix * C64::new(b, 0.0);
        assert!(max_abs(&(h.u_matrix - lin)) < 1e-10);
        assert!((h1.g - C64::new(0.0, -1.0 / PI)).norm() < 1e-12);
    }

    #[test]
    fn eqcond_holds() {
        for sigma in [IM, C64::new(1.0, 2.0)] {
            for v in [RE, IM] {
                for k in [1, 2, 5] {
                    let r = eqcond_residual(&torus(k), sigma, v, k as i64).unwrap();
                    assert!(r < 1e-12, "{sigma} {v} {k}: {r}");
                }
            }
        }
        assert_eq!(eqcond_residual(&torus(2), IM, C64::default(), 2).unwrap(), 0.0);
        let anti = eqcond_residual_split(&torus(2), IM, C64::default(), C64::new(1.0, 0.0), 2).unwrap();
        assert!(anti <= 1e-8);
    }

    #[test]
    fn eqcond_detects_wrong_operator() {
        // dropping the Laplacian term leaves a residual of order one
        let model = torus(2);
        let r = eqcond_residual_split(&model, IM, C64::default(), C64::default(), 2).unwrap();
        assert_eq!(r, 0.0);
        let basis = holomorphic_basis(&model, IM, 2).unwrap();
        let s = &basis.symbolic[0];
        let only_first = s.nabla_z().scale(C64::new(0.5, 0.0)).sample(&model);
        assert!(only_first.iter().any(|v| v.norm() > 1e-3));
    }

    #[test]
    fn constant_path_and_vertical_segment() {
        let model = torus(2);
        let t = transport(&model, &[IM, IM], 2, 0.1).unwrap();
        assert!(max_abs(&(t.propagator - CMatrix::identity(2, 2))) < 1e-14);
        // theta_j(sigma) solves the heat equation, so transport from i to 2i is
        // (b1/b0)^{1/4} times the identity in the theta frame
        let t = transport(&model, &[IM, IM * 2.0], 2, 0.05).unwrap();
        let expected = CMatrix::identity(2, 2) * C64::new(2f64.powf(0.25), 0.0);
        assert!(max_abs(&(t.propagator - expected)) < 1e-8);
    }

    #[test]
    fn rectangle_loop_is_projectively_flat() {
        let model = torus(3);
        let path = [IM, C64::new(1.0, 1.0), C64::new(1.0, 2.0), IM * 2.0, IM];
        let (lambda, defect) = holonomy(&model, &path, 3, 0.05).unwrap();
        assert!(defect < 1e-5);
        // exp(-int i dsigma / (4 Im sigma)) around the rectangle
        let expected = C64::new(0.0, -0.25 * (1.0 - 0.5)).exp();
        assert!((lambda - expected).norm() < 1e-6, "{lambda} vs {expected}");
    }

    #[test]
    fn step_order_is_four() {
        let model = torus(2);
        let path = [IM, C64::new(0.5, 1.5), C64::new(-0.3, 0.8)];
        let (_, defects, slope) = step_order(&model, &path, 2, 0.4, 3).unwrap();
        assert!((slope - 4.0).abs() < 0.3, "slope {slope} {defects:?}");
    }

    #[test]
    fn transport_rejects_bad_input() {
        let model = torus(2);
        assert!(transport(&model, &[IM, C64::new(0.0, -1.0)], 2, 0.1).is_err());
        assert!(transport(&model, &[IM, IM * 2.0], 2, 0.0).is_err());
    }

    #[test]
    fn projection_derivative_identity() {
        for k in [2, 3] {
            let model = torus(k);
            let r = projection_derivative_residual(&model, IM, IM, k as i64, 1e-4, None).unwrap();
            assert!(r.residual < 1e-5, "k={k}: {}", r.residual);
        }
        let model = torus(2);
        let r = projection_derivative_residual(&model, IM, C64::default(), 2, 1e-4, None).unwrap();
        assert_eq!(r.residual, 0.0);
    }
}
