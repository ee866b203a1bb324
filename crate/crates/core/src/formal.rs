//! Formal power series in `h` with torus Fourier coefficients: the
//! Berezin-Toeplitz star product of the flat torus, the formal Hitchin
//! connection, its formal trivialization and the resulting sigma-independent
//! star product.
//!
//! Every operator here is translation invariant, so it acts on a mode `e_p` by
//! a scalar multiplier. With `a_p = p2 - sigma p1` and `b = Im sigma`:
//!
//! * product kernel `e_p * e_q = exp(h K(p, q)) e_{p+q}`, `K = 4 pi b zeta_p conj(zeta_q)`
//!   for `h = 1/k`, and twice that for the tilde product in `h = 1/(2k)`;
//! * `E(V) = (g/2) d_z^2 + (conj g / 2) d_zbar^2` with multiplier
//!   `2 pi i (v zeta_p^2 - conj(v) conj(zeta_p)^2)`, which equals `V[Phi_p]` for
//!   `Phi_p = -pi |a_p|^2 / b`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fourier::{zeta, Fourier, Mode};
use crate::geometry::Direction;
use crate::{Error, Result, C64};

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

const TWO_PI_I: C64 = C64 { re: 0.0, im: 2.0 * std::f64::consts::PI };

/// A truncated series `f_0 + f_1 h + ... + f_L h^L`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FormalFunction {
    pub coeffs: Vec<Fourier>,
}

impl FormalFunction {
    pub fn zero(order: usize) -> Self {
        Self { coeffs: vec![Fourier::zero(); order + 1] }
    }

    /// A classical function, constant in `h`.
    pub fn classical(f: Fourier, order: usize) -> Self {
        let mut out = Self::zero(order);
        out.coeffs[0] = f;
        out
    }

    pub fn order(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.coeffs.iter().all(|f| f.is_real(tol))
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        let z = Fourier::zero();
        Self {
            coeffs: (0..n)
                .map(|l| self.coeffs.get(l).unwrap_or(&z) + other.coeffs.get(l).unwrap_or(&z))
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(c(-1.0, 0.0)))
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { coeffs: self.coeffs.iter().map(|f| f.scale(s)).collect() }
    }

    /// Multiply by `h` and drop the term beyond the current order.
    pub fn shift(&self) -> Self {
        let mut coeffs = vec![Fourier::zero()];
        coeffs.extend(self.coeffs.iter().take(self.order()).cloned());
        Self { coeffs }
    }

    /// Largest coefficient modulus over all orders and modes.
    pub fn max_coeff(&self) -> f64 {
        self.coeffs.iter().map(|f| f.max_coeff()).fold(0.0, f64::max)
    }

    /// Apply a mode multiplier series `m_0 + m_1 h + ...` (order-by-order product).
    pub fn apply_multipliers(&self, m: &[Poly2]) -> Self {
        let order = self.order();
        let mut out = Self::zero(order);
        for (l, f) in self.coeffs.iter().enumerate() {
            for (r, poly) in m.iter().enumerate() {
                if l + r > order {
                    break;
                }
                let term = f.map_modes(|p| poly.eval(p));
                out.coeffs[l + r] = &out.coeffs[l + r] + &term;
            }
        }
        out
    }
}

/// A polynomial in the mode vector `(p1, p2)`; `(i, j) -> c` encodes `c p1^i p2^j`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly2 {
    pub terms: BTreeMap<(u32, u32), C64>,
}

impl Poly2 {
    pub fn constant(v: C64) -> Self {
        let mut terms = BTreeMap::new();
        if v.norm() > 0.0 {
            terms.insert((0, 0), v);
        }
        Self { terms }
    }

    /// `alpha p1 + beta p2`.
    pub fn linear(alpha: C64, beta: C64) -> Self {
        let mut out = Self::default();
        out.terms.insert((1, 0), alpha);
        out.terms.insert((0, 1), beta);
        out.prune();
        out
    }

    fn prune(&mut self) {
        self.terms.retain(|_, v| v.norm() > 0.0);
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|(i, j)| i + j).max().unwrap_or(0)
    }

    pub fn eval(&self, p: Mode) -> C64 {
        let (x, y) = (p.0 as f64, p.1 as f64);
        self.terms.iter().map(|(&(i, j), &v)| v * x.powi(i as i32) * y.powi(j as i32)).sum()
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = self.clone();
        for (&k, &v) in &o.terms {
            *out.terms.entry(k).or_default() += v;
        }
        out.prune();
        out
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut out = Self { terms: self.terms.iter().map(|(&k, &v)| (k, v * s)).collect() };
        out.prune();
        out
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut out = Self::default();
        for (&(i, j), &a) in &self.terms {
            for (&(k, l), &b) in &o.terms {
                *out.terms.entry((i + k, j + l)).or_default() += a * b;
            }
        }
        out.prune();
        out
    }

    /// Conjugate the coefficients (the modes are real).
    pub fn conj(&self) -> Self {
        Self { terms: self.terms.iter().map(|(&k, &v)| (k, v.conj())).collect() }
    }

    pub fn max_coeff(&self) -> f64 {
        self.terms.values().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// `zeta_p` as a linear form in `p`.
fn zeta_poly(sigma: C64) -> Poly2 {
    let two_ib = c(0.0, 2.0 * sigma.im);
    Poly2::linear(-sigma.conj() / two_ib, c(1.0, 0.0) / two_ib)
}

/// Derivative of `zeta_p` along the real direction `w` of the upper half-plane.
fn zeta_poly_derivative(sigma: C64, w: Direction) -> Poly2 {
    let b = sigma.im;
    let two_ib = c(0.0, 2.0 * b);
    // d_a zeta = -p1 / (2ib), d_b zeta = p1 / (2b) - zeta / b
    let da = Poly2::linear(c(-1.0, 0.0) / two_ib, C64::default());
    let db = Poly2::linear(c(0.5 / b, 0.0), C64::default()).add(&zeta_poly(sigma).scale(c(-1.0 / b, 0.0)));
    da.scale(c(w.re, 0.0)).add(&db.scale(c(w.im, 0.0)))
}

/// Multiplier of `E(V)` for the real direction `V` (as the complex number `v`).
pub fn e_multiplier(sigma: C64, v: Direction) -> Poly2 {
    let z = zeta_poly(sigma);
    let zb = z.conj();
    z.mul(&z).scale(TWO_PI_I * v).add(&zb.mul(&zb).scale(-TWO_PI_I * v.conj()))
}

/// `W[E(V)]` for constant real directions `V, W`.
pub fn e_multiplier_derivative(sigma: C64, v: Direction, w: Direction) -> Poly2 {
    let z = zeta_poly(sigma);
    let dz = zeta_poly_derivative(sigma, w);
    let zz = z.mul(&dz).scale(c(2.0, 0.0));
    zz.scale(TWO_PI_I * v).add(&zz.conj().scale(-TWO_PI_I * v.conj()))
}

/// `Phi_p = -pi |p2 - sigma p1|^2 / Im sigma`, a potential with `V[Phi] = E(V)`.
pub fn potential(sigma: C64, p: Mode) -> f64 {
    let a = c(p.1 as f64, 0.0) - sigma * p.0 as f64;
    -std::f64::consts::PI * a.norm_sqr() / sigma.im
}

/// Which expansion parameter the product is written in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameter {
    /// `h = 1/k`.
    InverseK,
    /// `h = 1/(2k + n)` with `n = 0`.
    Tilde,
}

impl Parameter {
    fn factor(self) -> f64 {
        match self {
            Self::InverseK => 4.0 * std::f64::consts::PI,
            Self::Tilde => 8.0 * std::f64::consts::PI,
        }
    }
}

/// Product kernel `K(p, q)`.
pub fn kernel(sigma: C64, p: Mode, q: Mode, param: Parameter) -> C64 {
    zeta(p, sigma) * zeta(q, sigma).conj() * (param.factor() * sigma.im)
}

/// `V[K(p, q)]`.
pub fn kernel_derivative(sigma: C64, p: Mode, q: Mode, v: Direction, param: Parameter) -> C64 {
    let zp = zeta(p, sigma);
    let zq = zeta(q, sigma).conj();
    let dzp = zeta_poly_derivative(sigma, v).eval(p);
    let dzq = zeta_poly_derivative(sigma, v).conj().eval(q);
    (zp * zq * v.im + sigma.im * (dzp * zq + zp * dzq)) * param.factor()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Bilinear series product with kernel weights `w(l, p, q)` multiplying `h^l`.
fn star_with<W: Fn(usize, Mode, Mode) -> C64>(f: &FormalFunction, g: &FormalFunction, order: usize, w: W) -> FormalFunction {
    let mut acc: Vec<BTreeMap<Mode, C64>> = vec![BTreeMap::new(); order + 1];
    for (l1, fc) in f.coeffs.iter().enumerate().take(order + 1) {
        for (l2, gc) in g.coeffs.iter().enumerate().take(order + 1 - l1) {
            for (&p, &a) in &fc.modes {
                for (&q, &b) in &gc.modes {
                    for l in 0..=(order - l1 - l2) {
                        let weight = w(l, p, q);
                        if weight == C64::default() {
                            continue;
                        }
                        *acc[l1 + l2 + l].entry((p.0 + q.0, p.1 + q.1)).or_default() += a * b * weight;
                    }
                }
            }
        }
    }
    FormalFunction { coeffs: acc.into_iter().map(Fourier::from_modes).collect() }
}

/// Star product of the given parameter truncated at `order`.
pub fn star(sigma: C64, f: &FormalFunction, g: &FormalFunction, order: usize, param: Parameter) -> FormalFunction {
    star_with(f, g, order, |l, p, q| kernel(sigma, p, q, param).powi(l as i32) / factorial(l))
}

/// Berezin-Toeplitz star product in `h = 1/k`: `T_f T_g ~ T_{f * g}`.
pub fn bt_star(sigma: C64, f: &FormalFunction, g: &FormalFunction, order: usize) -> FormalFunction {
    star(sigma, f, g, order, Parameter::InverseK)
}

/// `V[f *~ g]` for sigma-independent `f, g` (tilde product).
fn star_derivative(sigma: C64, v: Direction, f: &FormalFunction, g: &FormalFunction, order: usize) -> FormalFunction {
    star_with(f, g, order, |l, p, q| {
        if l == 0 {
            return C64::default();
        }
        kernel(sigma, p, q, Parameter::Tilde).powi(l as i32 - 1) / factorial(l - 1)
            * kernel_derivative(sigma, p, q, v, Parameter::Tilde)
    })
}

/// `D_V f = V[f] + h E(V) f` in `h = 1/(2k)`; `df` is `V[f]` for a
/// sigma-dependent `f` (zero when absent).
pub fn formal_connection(sigma: C64, v: Direction, f: &FormalFunction, df: Option<&FormalFunction>) -> FormalFunction {
    let e = e_multiplier(sigma, v);
    let tail = f.apply_multipliers(&[e]).shift();
    match df {
        Some(d) => d.add(&tail),
        None => tail,
    }
}

/// Operator coefficients `D~^(0), D~^(1), ...` of the formal connection as
/// mode multipliers; `D~^(0) = 0` on the flat torus.
pub fn connection_operators(sigma: C64, v: Direction, order: usize) -> Vec<Poly2> {
    let mut out = vec![Poly2::default(); order + 1];
    if order >= 1 {
        out[1] = e_multiplier(sigma, v);
    }
    out
}

/// `D_V(f *~ g) - D_V(f) *~ g - f *~ D_V(g)` for sigma-independent `f, g`.
pub fn derivation_residual(sigma: C64, v: Direction, f: &FormalFunction, g: &FormalFunction, order: usize) -> FormalFunction {
    let fg = star(sigma, f, g, order, Parameter::Tilde);
    let d_fg = formal_connection(sigma, v, &fg, Some(&star_derivative(sigma, v, f, g, order)));
    let df = formal_connection(sigma, v, f, None);
    let dg = formal_connection(sigma, v, g, None);
    d_fg.sub(&star(sigma, &df, g, order, Parameter::Tilde))
        .sub(&star(sigma, f, &dg, order, Parameter::Tilde))
}

/// `([D_{V1}, D_{V2}] - D_{[V1, V2]}) f` for constant directions (so the
/// bracket vanishes) and sigma-independent `f`.
pub fn flatness_residual(sigma: C64, v1: Direction, v2: Direction, f: &FormalFunction) -> FormalFunction {
    let d2 = formal_connection(sigma, v2, f, None);
    let d1 = formal_connection(sigma, v1, f, None);
    // V1[D_{V2} f] = h V1[E(V2)] f
    let d1_of_d2 = formal_connection(sigma, v1, &d2, Some(&f.apply_multipliers(&[e_multiplier_derivative(sigma, v2, v1)]).shift()));
    let d2_of_d1 = formal_connection(sigma, v2, &d1, Some(&f.apply_multipliers(&[e_multiplier_derivative(sigma, v1, v2)]).shift()));
    d1_of_d2.sub(&d2_of_d1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathRule {
    /// `sigma_0 -> Re sigma + i Im sigma_0 -> sigma`.
    HorizontalFirst,
    /// `sigma_0 -> Re sigma_0 + i Im sigma -> sigma`.
    VerticalFirst,
}

#[derive(Clone, Debug)]
pub struct FormalTrivialization {
    pub order: usize,
    pub base: C64,
    pub sigma: C64,
    pub path_rule: PathRule,
    pub steps: usize,
    /// `P_0 = 1, P_1, ..., P_L` as mode multipliers at `sigma`.
    pub p: Vec<Poly2>,
    /// `d_a P_l` and `d_b P_l` at `sigma`.
    pub dp: [Vec<Poly2>; 2],
    /// Largest coefficient of `d alpha_l (d_a, d_b)` at `sigma`.
    pub closedness: f64,
}

type State = Vec<Poly2>;

fn axpy(a: &State, b: &State, s: f64) -> State {
    a.iter().zip(b).map(|(x, y)| x.add(&y.scale(c(s, 0.0)))).collect()
}

/// RK4 for `d/dt (P, Q) = F(t, P, Q)` with polynomial states.
fn rk4<F>(mut p: State, mut q: State, steps: usize, rhs: F) -> (State, State)
where
    F: Fn(f64, &State, &State) -> (State, State),
{
    let h = 1.0 / steps as f64;
    for i in 0..steps {
        let t = i as f64 * h;
        let (k1p, k1q) = rhs(t, &p, &q);
        let (k2p, k2q) = rhs(t + h / 2.0, &axpy(&p, &k1p, h / 2.0), &axpy(&q, &k1q, h / 2.0));
        let (k3p, k3q) = rhs(t + h / 2.0, &axpy(&p, &k2p, h / 2.0), &axpy(&q, &k2q, h / 2.0));
        let (k4p, k4q) = rhs(t + h, &axpy(&p, &k3p, h), &axpy(&q, &k3q, h));
        for l in 0..p.len() {
            let dp = k1p[l].add(&k2p[l].scale(c(2.0, 0.0))).add(&k3p[l].scale(c(2.0, 0.0))).add(&k4p[l]);
            let dq = k1q[l].add(&k2q[l].scale(c(2.0, 0.0))).add(&k3q[l].scale(c(2.0, 0.0))).add(&k4q[l]);
            p[l] = p[l].add(&dp.scale(c(h / 6.0, 0.0)));
            q[l] = q[l].add(&dq.scale(c(h / 6.0, 0.0)));
        }
    }
    (p, q)
}

/// `alpha_l(V) = -E(V) P_{l-1}` for every `l` (zero for `l = 0`).
fn alpha(sigma: C64, v: Direction, p: &State) -> State {
    let e = e_multiplier(sigma, v);
    let mut out = vec![Poly2::default(); p.len()];
    for l in 1..p.len() {
        out[l] = e.mul(&p[l - 1]).scale(c(-1.0, 0.0));
    }
    out
}

/// Build `P = 1 + h P_1 + ...` with `V[P_l] = -sum_r D~^(r)(V) P_{l-r}` so that
/// `D_V(P f) = 0` for sigma-independent `f`, integrating from `base` to `sigma`
/// along an axis-parallel path with `steps` RK4 steps per leg.
pub fn trivialize(base: C64, sigma: C64, order: usize, path_rule: PathRule, steps: usize) -> Result<FormalTrivialization> {
    for s in [base, sigma] {
        if !(s.im > 0.0) {
            return Err(Error::PathLeavesDomain(format!("{s}")));
        }
    }
    if steps == 0 {
        return Err(Error::BadStep(0.0));
    }
    let n = order + 1;
    let mut p0 = vec![Poly2::default(); n];
    p0[0] = Poly2::constant(c(1.0, 0.0));
    let (d1, d2, corner) = match path_rule {
        PathRule::HorizontalFirst => (c(1.0, 0.0), c(0.0, 1.0), c(sigma.re, base.im)),
        PathRule::VerticalFirst => (c(0.0, 1.0), c(1.0, 0.0), c(base.re, sigma.im)),
    };
    let len1 = if d1.re != 0.0 { corner.re - base.re } else { corner.im - base.im };
    let len2 = if d2.re != 0.0 { sigma.re - corner.re } else { sigma.im - corner.im };

    // first leg: P only
    let zero = vec![Poly2::default(); n];
    let (p_corner, _) = rk4(p0, zero, steps, |t, p, _| {
        let s = base + d1 * (t * len1);
        (alpha(s, d1, p).iter().map(|a| a.scale(c(len1, 0.0))).collect(), vec![Poly2::default(); n])
    });
    // second leg: P together with Q = d_{d1} P (tangent-linear)
    let q_corner = alpha(corner, d1, &p_corner);
    let (p_end, q_end) = rk4(p_corner, q_corner, steps, |t, p, q| {
        let s = corner + d2 * (t * len2);
        let dp = alpha(s, d2, p);
        let e = e_multiplier(s, d2);
        let de = e_multiplier_derivative(s, d2, d1);
        let mut dq = vec![Poly2::default(); n];
        for l in 1..n {
            dq[l] = de.mul(&p[l - 1]).add(&e.mul(&q[l - 1])).scale(c(-1.0, 0.0));
        }
        (
            dp.iter().map(|a| a.scale(c(len2, 0.0))).collect(),
            dq.iter().map(|a| a.scale(c(len2, 0.0))).collect(),
        )
    });
    let d_along_2 = alpha(sigma, d2, &p_end);
    let (dp_a, dp_b) = match path_rule {
        PathRule::HorizontalFirst => (q_end, d_along_2),
        PathRule::VerticalFirst => (d_along_2, q_end),
    };
    // d alpha_l(d_a, d_b) = d_a(alpha_l(d_b)) - d_b(alpha_l(d_a))
    let (ea, eb) = (e_multiplier(sigma, c(1.0, 0.0)), e_multiplier(sigma, c(0.0, 1.0)));
    let curl_e = e_multiplier_derivative(sigma, c(0.0, 1.0), c(1.0, 0.0))
        .add(&e_multiplier_derivative(sigma, c(1.0, 0.0), c(0.0, 1.0)).scale(c(-1.0, 0.0)));
    let mut closedness: f64 = 0.0;
    for l in 1..n {
        let r = curl_e
            .mul(&p_end[l - 1])
            .add(&eb.mul(&dp_a[l - 1]))
            .add(&ea.mul(&dp_b[l - 1]).scale(c(-1.0, 0.0)));
        closedness = closedness.max(r.max_coeff());
    }
    let scale = p_end.iter().map(Poly2::max_coeff).fold(1.0, f64::max);
    if closedness > CLOSEDNESS_TOL * scale {
        return Err(Error::NotClosed(closedness));
    }
    Ok(FormalTrivialization {
        order,
        base,
        sigma,
        path_rule,
        steps,
        p: p_end,
        dp: [dp_a, dp_b],
        closedness,
    })
}

/// Relative tolerance on `d alpha_l`; exceeding it signals an upstream bug.
pub const CLOSEDNESS_TOL: f64 = 1e-10;

/// Default integration resolution per path leg.
pub const TRIVIALIZATION_STEPS: usize = 4000;

impl FormalTrivialization {
    /// `P(f)`.
    pub fn apply(&self, f: &FormalFunction) -> FormalFunction {
        f.apply_multipliers(&self.p)
    }

    /// `P^{-1}(f)` via the inverse multiplier series.
    pub fn apply_inverse(&self, f: &FormalFunction) -> FormalFunction {
        f.apply_multipliers(&self.inverse())
    }

    /// Multipliers of `P^{-1}`: `Q_0 = 1`, `Q_l = -sum_{r=1..l} P_r Q_{l-r}`.
    pub fn inverse(&self) -> Vec<Poly2> {
        let mut q: Vec<Poly2> = vec![Poly2::constant(c(1.0, 0.0))];
        for l in 1..self.p.len() {
            let mut acc = Poly2::default();
            for r in 1..=l {
                acc = acc.add(&self.p[r].mul(&q[l - r]));
            }
            q.push(acc.scale(c(-1.0, 0.0)));
        }
        q
    }

    /// `D_V(P(f))` for a sigma-independent `f` and real direction `V`.
    pub fn connection_residual(&self, v: Direction, f: &FormalFunction) -> FormalFunction {
        let dp: Vec<Poly2> = self.dp[0]
            .iter()
            .zip(&self.dp[1])
            .map(|(a, b)| a.scale(c(v.re, 0.0)).add(&b.scale(c(v.im, 0.0))))
            .collect();
        formal_connection(self.sigma, v, &self.apply(f), Some(&f.apply_multipliers(&dp)))
    }

    /// `P^{-1}(P f *~ P g)` at this trivialization's `sigma`.
    pub fn invariant_star(&self, f: &FormalFunction, g: &FormalFunction) -> FormalFunction {
        let prod = star(self.sigma, &self.apply(f), &self.apply(g), self.order, Parameter::Tilde);
        self.apply_inverse(&prod)
    }
}

/// Difference of the invariant products built at `sigma1` and `sigma2` from the
/// same base point.
pub fn invariant_star(base: C64, sigma1: C64, sigma2: C64, f: &FormalFunction, g: &FormalFunction, order: usize) -> Result<FormalFunction> {
    let t1 = trivialize(base, sigma1, order, PathRule::HorizontalFirst, TRIVIALIZATION_STEPS)?;
    let t2 = trivialize(base, sigma2, order, PathRule::HorizontalFirst, TRIVIALIZATION_STEPS)?;
    Ok(t1.invariant_star(f, g).sub(&t2.invariant_star(f, g)))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;

    use super::*;

    const I: C64 = C64 { re: 0.0, im: 1.0 };

    fn e(p: Mode) -> FormalFunction {
        FormalFunction::classical(Fourier::mode(p, c(1.0, 0.0)), 2)
    }

    fn one() -> FormalFunction {
        FormalFunction::classical(Fourier::constant(c(1.0, 0.0)), 2)
    }

    #[test]
    fn unit_and_leading_term() {
        let sigma = c(0.3, 1.2);
        let f = FormalFunction::classical(&Fourier::cos((1, 0)) + &Fourier::sin((1, 2)), 2);
        assert_eq!(bt_star(sigma, &f, &one(), 2), f);
        assert_eq!(bt_star(sigma, &one(), &f, 2), f);
        let g = FormalFunction::classical(Fourier::cos((0, 1)), 2);
        let fg = bt_star(sigma, &f, &g, 2);
        assert!((&fg.coeffs[0] - &(&f.coeffs[0] * &g.coeffs[0])).max_coeff() < 1e-15);
    }

    #[test]
    fn commutator_is_poisson_multiple() {
        let sigma = c(0.4, 0.9);
        let mut ratios = Vec::new();
        for (p, q) in [((1, 0), (0, 1)), ((2, -1), (1, 3)), ((1, 1), (-2, 1))] {
            let pq = bt_star(sigma, &e(p), &e(q), 1);
            let qp = bt_star(sigma, &e(q), &e(p), 1);
            let comm = pq.coeffs[1].coeff((p.0 + q.0, p.1 + q.1)) - qp.coeffs[1].coeff((p.0 + q.0, p.1 + q.1));
            // {e_p, e_q} = omega(X_p, X_q) = -(2 pi)^2 (p1 q2 - p2 q1) / (2 pi) e_{p+q}
            let bracket = -2.0 * PI * (p.0 * q.1 - p.1 * q.0) as f64;
            ratios.push(comm / bracket);
        }
        for r in &ratios {
            assert!((r - ratios[0]).norm() < 1e-12);
        }
        assert!(ratios[0].norm() > 0.1);
    }

    #[test]
    fn connection_has_no_order_zero_part() {
        let ops = connection_operators(c(0.2, 1.1), c(1.0, 0.0), 2);
        assert!(ops[0].terms.is_empty());
        let d = formal_connection(I, c(0.0, 1.0), &one(), None);
        assert!(d.max_coeff() == 0.0);
    }

    #[test]
    fn e_multiplier_is_gradient_of_potential() {
        let sigma = c(0.7, 1.3);
        let h = 1e-6;
        for p in [(1, 0), (2, -3), (0, 1)] {
            for v in [c(1.0, 0.0), c(0.0, 1.0)] {
                let fd = (potential(sigma + v * h, p) - potential(sigma - v * h, p)) / (2.0 * h);
                assert!((e_multiplier(sigma, v).eval(p) - fd).norm() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn derivation_examples() {
        let r = derivation_residual(I, c(0.0, 1.0), &e((1, 0)), &e((-1, 0)), 2);
        assert!(r.max_coeff() <= 1e-12);
        let r = derivation_residual(I, c(1.0, 0.0), &one(), &e((1, 2)), 2);
        assert!(r.max_coeff() == 0.0);
    }

    #[test]
    fn flatness_examples() {
        let f = e((1, 0));
        assert!(flatness_residual(c(0.5, 1.5), c(1.0, 0.0), c(1.0, 0.0), &f).max_coeff() == 0.0);
        assert!(flatness_residual(I, c(1.0, 0.0), c(0.0, 1.0), &f).max_coeff() <= 1e-10);
        assert!(flatness_residual(I, c(1.0, 0.0), c(0.0, 1.0), &one()).max_coeff() == 0.0);
    }

    #[test]
    fn trivialization_properties() {
        let t0 = trivialize(I, c(1.0, 2.0), 0, PathRule::HorizontalFirst, 100).unwrap();
        assert_eq!(t0.p, vec![Poly2::constant(c(1.0, 0.0))]);
        let h = trivialize(I, c(1.0, 2.0), 2, PathRule::HorizontalFirst, TRIVIALIZATION_STEPS).unwrap();
        let v = trivialize(I, c(1.0, 2.0), 2, PathRule::VerticalFirst, TRIVIALIZATION_STEPS).unwrap();
        assert!(h.p[1].add(&v.p[1].scale(c(-1.0, 0.0))).max_coeff() <= 1e-10);
        assert!(h.closedness <= 1e-10);
        for (l, p) in h.p.iter().enumerate() {
            assert!(p.degree() <= 2 * l as u32);
        }
        let f = FormalFunction::classical(Fourier::mode((0, 1), c(1.0, 0.0)), 2);
        for dir in [c(1.0, 0.0), c(0.0, 1.0)] {
            assert!(h.connection_residual(dir, &f).max_coeff() <= 1e-10);
            assert!(v.connection_residual(dir, &f).max_coeff() <= 1e-10);
        }
        // P_1 = -(Phi(sigma) - Phi(base))
        for p in [(1, 0), (1, 1), (-2, 3)] {
            let exact = -(potential(c(1.0, 2.0), p) - potential(I, p));
            assert!((h.p[1].eval(p) - exact).norm() < 1e-10);
        }
        assert!(trivialize(I, c(1.0, -1.0), 1, PathRule::HorizontalFirst, 10).is_err());
    }

    #[test]
    fn invariant_product_examples() {
        let (f, g) = (e((1, 0)), e((0, 1)));
        let d = invariant_star(I, I, I, &f, &g, 2).unwrap();
        assert!(d.max_coeff() == 0.0);
        let d = invariant_star(I, I, c(1.0, 2.0), &f, &g, 2).unwrap();
        assert!(d.max_coeff() <= 1e-10);
        let d = invariant_star(I, I, c(1.0, 2.0), &one(), &g, 2).unwrap();
        assert!(d.max_coeff() <= 1e-10);
    }

    fn small_function() -> impl Strategy<Value = Fourier> {
        prop::collection::vec(((-2i64..=2, -2i64..=2), -1.0f64..1.0, -1.0f64..1.0), 1..4)
            .prop_map(|v| Fourier::from_modes(v.into_iter().map(|(p, a, b)| (p, c(a, b)))))
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 10, ..ProptestConfig::default() })]

        #[test]
        fn associativity(f in small_function(), g in small_function(), h in small_function(), a in -1.0f64..1.0, b in 0.5f64..2.0) {
            let sigma = c(a, b);
            let (f, g, h) = (FormalFunction::classical(f, 2), FormalFunction::classical(g, 2), FormalFunction::classical(h, 2));
            let left = bt_star(sigma, &bt_star(sigma, &f, &g, 2), &h, 2);
            let right = bt_star(sigma, &f, &bt_star(sigma, &g, &h, 2), 2);
            let scale = f.max_coeff() * g.max_coeff() * h.max_coeff();
            prop_assert!(left.sub(&right).max_coeff() <= 1e-12 * (1.0 + scale) * 1e3);
        }

        #[test]
        fn derivation_on_random_inputs(f in small_function(), g in small_function(), a in -1.0f64..1.0, b in 0.5f64..2.0, t in 0.0f64..6.3) {
            let v = c(t.cos(), t.sin());
            let (f, g) = (FormalFunction::classical(f, 2), FormalFunction::classical(g, 2));
            prop_assert!(derivation_residual(c(a, b), v, &f, &g, 2).max_coeff() <= 1e-12 * 1e3);
        }
    }
}
