//! Rational fields on the Riemann sphere in the stereographic chart.
//!
//! A field is `Q(z, zbar) / (1 + z zbar)^d` with `Q` a polynomial. This class
//! contains the coordinate functions `x1, x2, x3` of the unit sphere, every
//! polynomial in them, the holomorphic sections `z^j` of `O(k)` written in the
//! standard trivialization, and is closed under `d/dz`, `d/dzbar` and products.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use crate::C64;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rational {
    /// `(a, b) -> c` encodes `c z^a zbar^b`.
    pub num: BTreeMap<(u32, u32), C64>,
    pub den: u32,
}

fn poly_mul(p: &BTreeMap<(u32, u32), C64>, q: &BTreeMap<(u32, u32), C64>) -> BTreeMap<(u32, u32), C64> {
    let mut out = BTreeMap::new();
    for (&(a, b), &c) in p {
        for (&(e, f), &d) in q {
            *out.entry((a + e, b + f)).or_insert(C64::new(0.0, 0.0)) += c * d;
        }
    }
    out.retain(|_, c: &mut C64| c.norm() > 0.0);
    out
}

/// `(1 + z zbar)^n` as a polynomial.
fn weight_poly(n: u32) -> BTreeMap<(u32, u32), C64> {
    let mut out = BTreeMap::new();
    let mut binom = 1.0;
    for j in 0..=n {
        out.insert((j, j), C64::new(binom, 0.0));
        binom = binom * (n - j) as f64 / (j + 1) as f64;
    }
    out
}

impl Rational {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: C64) -> Self {
        Self::monomial(c, 0, 0, 0)
    }

    /// `c z^a zbar^b / (1 + z zbar)^den`.
    pub fn monomial(c: C64, a: u32, b: u32, den: u32) -> Self {
        let mut num = BTreeMap::new();
        if c.norm() > 0.0 {
            num.insert((a, b), c);
        }
        Self { num, den }
    }

    /// `x1 = (z + zbar) / (1 + |z|^2)`.
    pub fn x1() -> Self {
        &Self::monomial(C64::new(1.0, 0.0), 1, 0, 1) + &Self::monomial(C64::new(1.0, 0.0), 0, 1, 1)
    }

    /// `x2 = -i (z - zbar) / (1 + |z|^2)`.
    pub fn x2() -> Self {
        &Self::monomial(C64::new(0.0, -1.0), 1, 0, 1) + &Self::monomial(C64::new(0.0, 1.0), 0, 1, 1)
    }

    /// `x3 = (1 - |z|^2) / (1 + |z|^2)`; equals `cos(theta)` for `z = tan(theta/2) e^{i phi}`.
    pub fn x3() -> Self {
        &Self::monomial(C64::new(1.0, 0.0), 0, 0, 1) - &Self::monomial(C64::new(1.0, 0.0), 1, 1, 1)
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_empty()
    }

    fn with_den(&self, den: u32) -> Self {
        debug_assert!(den >= self.den);
        if den == self.den {
            return self.clone();
        }
        Self {
            num: poly_mul(&self.num, &weight_poly(den - self.den)),
            den,
        }
    }

    pub fn eval(&self, z: C64) -> C64 {
        let zb = z.conj();
        let w = 1.0 + z.norm_sqr();
        let mut acc = C64::new(0.0, 0.0);
        for (&(a, b), &c) in &self.num {
            acc += c * z.powu(a) * zb.powu(b);
        }
        acc / w.powi(self.den as i32)
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut num: BTreeMap<_, _> = self.num.iter().map(|(&k, &v)| (k, v * c)).collect();
        num.retain(|_, v: &mut C64| v.norm() > 0.0);
        Self { num, den: self.den }
    }

    pub fn conj(&self) -> Self {
        Self {
            num: self.num.iter().map(|(&(a, b), &c)| ((b, a), c.conj())).collect(),
            den: self.den,
        }
    }

    /// `d/dz` treating `zbar` as independent.
    pub fn d_z(&self) -> Self {
        // (Q_z (1+zzb) - d zb Q) / (1+zzb)^{d+1}
        let mut num = BTreeMap::new();
        let d = self.den as f64;
        for (&(a, b), &c) in &self.num {
            if a > 0 {
                *num.entry((a - 1, b)).or_insert(C64::new(0.0, 0.0)) += c * a as f64;
                *num.entry((a, b + 1)).or_insert(C64::new(0.0, 0.0)) += c * a as f64;
            }
            *num.entry((a, b + 1)).or_insert(C64::new(0.0, 0.0)) -= c * d;
        }
        num.retain(|_, v: &mut C64| v.norm() > 1e-300);
        Self { num, den: self.den + 1 }
    }

    pub fn d_zbar(&self) -> Self {
        self.conj().d_z().conj()
    }

    /// Multiply by `(1 + z zbar)^m`.
    pub fn times_weight(&self, m: u32) -> Self {
        if self.den >= m {
            Self { num: self.num.clone(), den: self.den - m }
        } else {
            Self { num: poly_mul(&self.num, &weight_poly(m - self.den)), den: 0 }
        }
    }

    /// Total degree of the numerator minus `2 den`; bounded fields have this `<= 0`.
    pub fn growth(&self) -> i64 {
        self.num.keys().map(|&(a, b)| (a + b) as i64).max().unwrap_or(0) - 2 * self.den as i64
    }

    /// Multiply by `zbar / (1 + z zbar)`, the connection coefficient of `O(1)`.
    pub fn times_connection_form(&self) -> Self {
        self * &Self::monomial(C64::new(1.0, 0.0), 0, 1, 1)
    }
}

impl Add for &Rational {
    type Output = Rational;
    fn add(self, rhs: &Rational) -> Rational {
        let den = self.den.max(rhs.den);
        let a = self.with_den(den);
        let b = rhs.with_den(den);
        let mut num = a.num;
        for (k, v) in b.num {
            *num.entry(k).or_insert(C64::new(0.0, 0.0)) += v;
        }
        num.retain(|_, v| v.norm() > 0.0);
        Rational { num, den }
    }
}

impl Neg for &Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        self.scale(C64::new(-1.0, 0.0))
    }
}

impl Sub for &Rational {
    type Output = Rational;
    fn sub(self, rhs: &Rational) -> Rational {
        self + &(-rhs)
    }
}

impl Mul for &Rational {
    type Output = Rational;
    fn mul(self, rhs: &Rational) -> Rational {
        Rational {
            num: poly_mul(&self.num, &rhs.num),
            den: self.den + rhs.den,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_lie_on_unit_sphere() {
        let r2 = &(&(&Rational::x1() * &Rational::x1()) + &(&Rational::x2() * &Rational::x2()))
            + &(&Rational::x3() * &Rational::x3());
        for z in [C64::new(0.3, -1.2), C64::new(2.0, 0.5), C64::new(0.0, 0.0)] {
            assert!((r2.eval(z) - 1.0).norm() < 1e-13);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let f = &(&Rational::x3() * &Rational::x1()) + &Rational::x2().scale(C64::new(0.0, 2.0));
        let z = C64::new(0.4, 0.7);
        let h = 1e-6;
        // d/dz = (d/du - i d/dv)/2
        let du = (f.eval(z + h) - f.eval(z - h)) / (2.0 * h);
        let dv = (f.eval(z + C64::new(0.0, h)) - f.eval(z - C64::new(0.0, h))) / (2.0 * h);
        let dz = (du - C64::i() * dv) * 0.5;
        let dzb = (du + C64::i() * dv) * 0.5;
        assert!((f.d_z().eval(z) - dz).norm() < 1e-8);
        assert!((f.d_zbar().eval(z) - dzb).norm() < 1e-8);
    }
}
