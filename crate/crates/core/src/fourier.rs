//! Trigonometric polynomials on the torus `R^2 / Z^2`.
//!
//! A function is a finite map from integer modes `(p1, p2)` to amplitudes,
//! `f(x, y) = sum a_p exp(2 pi i (p1 x + p2 y))`. Derivatives along the
//! complex coordinate `z = x + sigma y` act diagonally on modes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::C64;

pub type Mode = (i64, i64);

/// `zeta_p` with `d/dz e_p = 2 pi i zeta_p e_p` for `z = x + sigma y`.
pub fn zeta(p: Mode, sigma: C64) -> C64 {
    let two_ib = C64::new(0.0, 2.0 * sigma.im);
    (C64::new(p.1 as f64, 0.0) - sigma.conj() * p.0 as f64) / two_ib
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fourier {
    pub modes: BTreeMap<Mode, C64>,
}

impl Fourier {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: C64) -> Self {
        Self::mode((0, 0), c)
    }

    pub fn mode(p: Mode, amp: C64) -> Self {
        let mut modes = BTreeMap::new();
        if amp != C64::new(0.0, 0.0) {
            modes.insert(p, amp);
        }
        Self { modes }
    }

    pub fn from_modes<I: IntoIterator<Item = (Mode, C64)>>(it: I) -> Self {
        let mut f = Self::zero();
        for (p, a) in it {
            *f.modes.entry(p).or_insert(C64::new(0.0, 0.0)) += a;
        }
        f.prune(0.0);
        f
    }

    /// `cos(2 pi (p1 x + p2 y))`.
    pub fn cos(p: Mode) -> Self {
        Self::from_modes([(p, C64::new(0.5, 0.0)), ((-p.0, -p.1), C64::new(0.5, 0.0))])
    }

    /// `sin(2 pi (p1 x + p2 y))`.
    pub fn sin(p: Mode) -> Self {
        Self::from_modes([(p, C64::new(0.0, -0.5)), ((-p.0, -p.1), C64::new(0.0, 0.5))])
    }

    pub fn prune(&mut self, tol: f64) {
        self.modes.retain(|_, a| a.norm() > tol);
    }

    pub fn is_zero(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn coeff(&self, p: Mode) -> C64 {
        self.modes.get(&p).copied().unwrap_or_default()
    }

    pub fn eval(&self, x: f64, y: f64) -> C64 {
        self.modes
            .iter()
            .map(|(&(p1, p2), &a)| a * C64::from_polar(1.0, 2.0 * PI * (p1 as f64 * x + p2 as f64 * y)))
            .sum()
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = Self {
            modes: self.modes.iter().map(|(&p, &a)| (p, a * c)).collect(),
        };
        out.prune(0.0);
        out
    }

    pub fn conj(&self) -> Self {
        Self {
            modes: self.modes.iter().map(|(&(p1, p2), &a)| ((-p1, -p2), a.conj())).collect(),
        }
    }

    /// Hermitian symmetry `a_{-p} = conj(a_p)` up to `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        self.modes
            .iter()
            .all(|(&(p1, p2), &a)| (self.coeff((-p1, -p2)) - a.conj()).norm() <= tol)
    }

    /// Apply a diagonal multiplier `m(p)`.
    pub fn map_modes<F: Fn(Mode) -> C64>(&self, m: F) -> Self {
        let mut out = Self {
            modes: self.modes.iter().map(|(&p, &a)| (p, a * m(p))).collect(),
        };
        out.prune(0.0);
        out
    }

    pub fn d_x(&self) -> Self {
        self.map_modes(|p| C64::new(0.0, 2.0 * PI * p.0 as f64))
    }

    pub fn d_y(&self) -> Self {
        self.map_modes(|p| C64::new(0.0, 2.0 * PI * p.1 as f64))
    }

    pub fn d_z(&self, sigma: C64) -> Self {
        self.map_modes(|p| C64::new(0.0, 2.0 * PI) * zeta(p, sigma))
    }

    pub fn d_zbar(&self, sigma: C64) -> Self {
        self.map_modes(|p| C64::new(0.0, 2.0 * PI) * zeta(p, sigma).conj())
    }

    /// Sum of `|a_p|`, an upper bound for the sup norm.
    pub fn l1_norm(&self) -> f64 {
        self.modes.values().map(|a| a.norm()).sum()
    }

    /// Largest coefficient modulus.
    pub fn max_coeff(&self) -> f64 {
        self.modes.values().map(|a| a.norm()).fold(0.0, f64::max)
    }

    /// Maximum `|p1| + |p2|` over the support.
    pub fn degree(&self) -> i64 {
        self.modes.keys().map(|p| p.0.abs() + p.1.abs()).max().unwrap_or(0)
    }

    pub fn max_abs_freq(&self) -> i64 {
        self.modes.keys().map(|p| p.0.abs().max(p.1.abs())).max().unwrap_or(0)
    }
}

impl Add for &Fourier {
    type Output = Fourier;
    fn add(self, rhs: &Fourier) -> Fourier {
        Fourier::from_modes(self.modes.iter().chain(rhs.modes.iter()).map(|(&p, &a)| (p, a)))
    }
}

impl Sub for &Fourier {
    type Output = Fourier;
    fn sub(self, rhs: &Fourier) -> Fourier {
        self + &(-rhs)
    }
}

impl Neg for &Fourier {
    type Output = Fourier;
    fn neg(self) -> Fourier {
        self.scale(C64::new(-1.0, 0.0))
    }
}

impl Mul for &Fourier {
    type Output = Fourier;
    fn mul(self, rhs: &Fourier) -> Fourier {
        let mut out = BTreeMap::new();
        for (&(p1, p2), &a) in &self.modes {
            for (&(q1, q2), &b) in &rhs.modes {
                *out.entry((p1 + q1, p2 + q2)).or_insert(C64::new(0.0, 0.0)) += a * b;
            }
        }
        let mut f = Fourier { modes: out };
        f.prune(0.0);
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d_z_matches_chain_rule() {
        // d/dz = (d/dy - conj(sigma) d/dx) / (sigma - conj(sigma))
        let sigma = C64::new(0.3, 1.7);
        let f = Fourier::from_modes([((1, 2), C64::new(0.4, -0.2)), ((-3, 1), C64::new(1.0, 0.5))]);
        let chain = (&f.d_y() - &f.d_x().scale(sigma.conj())).scale(1.0 / (sigma - sigma.conj()));
        let direct = f.d_z(sigma);
        for (p, a) in &direct.modes {
            assert!((chain.coeff(*p) - a).norm() < 1e-12);
        }
    }

    #[test]
    fn product_evaluates_pointwise() {
        let f = &Fourier::cos((1, 0)) + &Fourier::sin((0, 2));
        let g = Fourier::from_modes([((1, -1), C64::new(0.2, 0.3))]);
        let h = &f * &g;
        let (x, y) = (0.137, 0.771);
        assert!((h.eval(x, y) - f.eval(x, y) * g.eval(x, y)).norm() < 1e-13);
        assert!(f.is_real(1e-15));
        assert!(!g.is_real(1e-15));
    }
}
