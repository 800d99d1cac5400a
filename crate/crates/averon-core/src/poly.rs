//! Dense univariate polynomials over a ring, and the localization needed
//! when a matrix pencil is inverted next to one of its eigenvalues.
//!
//! `Poly<T>` keeps explicit length (trailing zeros allowed) because its
//! coefficients are usually inexact series where structural zero tests are
//! meaningless. `LocPoly<T>` represents `num(u) / u^den` for the pencil
//! variable `u`; sums and products track the denominator power and strip it
//! again when the numerator turns out divisible.

use crate::scalar::Ring;

#[derive(Clone, Debug, PartialEq)]
pub struct Poly<T> {
    pub coeffs: Vec<T>,
}

impl<T: Ring> Poly<T> {
    pub fn new(coeffs: Vec<T>) -> Self {
        assert!(!coeffs.is_empty());
        Poly { coeffs }
    }

    pub fn constant(v: T) -> Self {
        Poly { coeffs: vec![v] }
    }

    /// The monomial `c * x^k`.
    pub fn monomial(c: T, k: usize) -> Self {
        let mut coeffs = vec![T::zero(); k + 1];
        coeffs[k] = c;
        Poly { coeffs }
    }

    pub fn degree_bound(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, i: usize) -> T {
        self.coeffs.get(i).cloned().unwrap_or_else(T::zero)
    }

    /// Drops trailing coefficients that are structurally zero.
    pub fn trimmed(&self) -> Self {
        let mut end = self.coeffs.len();
        while end > 1 && self.coeffs[end - 1].is_zero() {
            end -= 1;
        }
        Poly { coeffs: self.coeffs[..end].to_vec() }
    }

    pub fn eval(&self, x: &T) -> T {
        let mut acc = self.coeffs.last().unwrap().clone();
        for c in self.coeffs.iter().rev().skip(1) {
            acc = acc.mul(x).add(c);
        }
        acc
    }

    /// Formal derivative.
    pub fn deriv(&self) -> Self {
        if self.coeffs.len() == 1 {
            return Poly::constant(T::zero());
        }
        let coeffs = self.coeffs[1..]
            .iter()
            .enumerate()
            .map(|(i, c)| c.scale((i + 1) as f64))
            .collect();
        Poly { coeffs }
    }

    /// Substitutes `x -> a + y`, returning coefficients in `y`.
    pub fn shift_variable(&self, a: &T) -> Self {
        // Horner in (a + y) over Poly
        let mut acc = Poly::constant(self.coeffs.last().unwrap().clone());
        let lin = Poly::new(vec![a.clone(), T::one()]);
        for c in self.coeffs.iter().rev().skip(1) {
            acc = acc.mul(&lin).add(&Poly::constant(c.clone()));
        }
        acc
    }
}

impl<T: Ring> Ring for Poly<T> {
    fn zero() -> Self {
        Poly::constant(T::zero())
    }
    fn one() -> Self {
        Poly::constant(T::one())
    }
    fn from_f64(v: f64) -> Self {
        Poly::constant(T::from_f64(v))
    }

    fn add(&self, rhs: &Self) -> Self {
        let n = self.coeffs.len().max(rhs.coeffs.len());
        let coeffs = (0..n).map(|i| self.coeff(i).add(&rhs.coeff(i))).collect();
        Poly { coeffs }
    }

    fn sub(&self, rhs: &Self) -> Self {
        let n = self.coeffs.len().max(rhs.coeffs.len());
        let coeffs = (0..n).map(|i| self.coeff(i).sub(&rhs.coeff(i))).collect();
        Poly { coeffs }
    }

    fn mul(&self, rhs: &Self) -> Self {
        let n = self.coeffs.len() + rhs.coeffs.len() - 1;
        let mut coeffs = vec![T::zero(); n];
        for (i, a) in self.coeffs.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in rhs.coeffs.iter().enumerate() {
                if b.is_zero() {
                    continue;
                }
                coeffs[i + j] = coeffs[i + j].add(&a.mul(b));
            }
        }
        Poly { coeffs }
    }

    fn neg(&self) -> Self {
        Poly { coeffs: self.coeffs.iter().map(|c| c.neg()).collect() }
    }

    fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_zero())
    }

    fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.max_abs()).fold(0.0, f64::max)
    }

    fn value_mag(&self) -> f64 {
        self.coeffs[0].value_mag()
    }

    fn scale(&self, s: f64) -> Self {
        Poly { coeffs: self.coeffs.iter().map(|c| c.scale(s)).collect() }
    }
}

/// `num(u) / u^den`. Ring only; inverses are built explicitly by the callers
/// that know their pencil structure.
#[derive(Clone, Debug, PartialEq)]
pub struct LocPoly<T> {
    pub num: Poly<T>,
    pub den: usize,
}

impl<T: Ring> LocPoly<T> {
    pub fn from_poly(p: Poly<T>) -> Self {
        LocPoly { num: p, den: 0 }
    }

    /// `c / u^den`.
    pub fn fraction(c: T, den: usize) -> Self {
        LocPoly { num: Poly::constant(c), den }
    }

    /// Cancels common powers of `u` whose numerator coefficients are
    /// structural zeros (callers zero exact-by-construction terms).
    pub fn normalized(&self) -> Self {
        let mut den = self.den;
        let mut start = 0usize;
        while den > 0
            && start < self.num.coeffs.len() - 1
            && self.num.coeffs[start].is_zero()
        {
            den -= 1;
            start += 1;
        }
        LocPoly { num: Poly::new(self.num.coeffs[start..].to_vec()), den }
    }

    fn raised(&self, extra: usize) -> Poly<T> {
        if extra == 0 {
            return self.num.clone();
        }
        let mut coeffs = vec![T::zero(); extra];
        coeffs.extend(self.num.coeffs.iter().cloned());
        Poly { coeffs }
    }
}

impl<T: Ring> Ring for LocPoly<T> {
    fn zero() -> Self {
        LocPoly::from_poly(Poly::zero())
    }
    fn one() -> Self {
        LocPoly::from_poly(Poly::one())
    }
    fn from_f64(v: f64) -> Self {
        LocPoly::from_poly(Poly::from_f64(v))
    }

    fn add(&self, rhs: &Self) -> Self {
        let den = self.den.max(rhs.den);
        let a = self.raised(den - self.den);
        let b = rhs.raised(den - rhs.den);
        LocPoly { num: a.add(&b), den }.normalized()
    }

    fn sub(&self, rhs: &Self) -> Self {
        self.add(&rhs.neg())
    }

    fn mul(&self, rhs: &Self) -> Self {
        LocPoly { num: self.num.mul(&rhs.num), den: self.den + rhs.den }.normalized()
    }

    fn neg(&self) -> Self {
        LocPoly { num: self.num.neg(), den: self.den }
    }

    fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    fn max_abs(&self) -> f64 {
        self.num.max_abs()
    }

    fn value_mag(&self) -> f64 {
        self.num.value_mag()
    }

    fn scale(&self, s: f64) -> Self {
        LocPoly { num: self.num.scale(s), den: self.den }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ring_det;

    #[test]
    fn multiplication_and_shift() {
        // (1 + x)^2 = 1 + 2x + x^2
        let p = Poly::new(vec![1.0, 1.0]);
        let sq = p.mul(&p);
        assert_eq!(sq.coeffs, vec![1.0, 2.0, 1.0]);
        // substitute x -> 1 + y: (2 + y)^2 = 4 + 4y + y^2
        let sh = sq.shift_variable(&1.0);
        assert_eq!(sh.coeffs, vec![4.0, 4.0, 1.0]);
    }

    #[test]
    fn eval_and_deriv() {
        let p = Poly::new(vec![2.0, -3.0, 1.0]); // 2 - 3x + x^2
        assert_eq!(p.eval(&2.0), 0.0);
        assert_eq!(p.deriv().coeffs, vec![-3.0, 2.0]);
    }

    #[test]
    fn char_poly_via_ring_det() {
        // det([[1,2],[3,4]] - x I) = x^2 - 5x - 2
        let e = |v: f64| Poly::constant(v);
        let x = Poly::monomial(1.0, 1);
        let m = vec![
            vec![e(1.0).sub(&x), e(2.0)],
            vec![e(3.0), e(4.0).sub(&x)],
        ];
        let d = ring_det(&m).trimmed();
        assert_eq!(d.coeffs, vec![-2.0, -5.0, 1.0]);
    }

    #[test]
    fn localized_arithmetic_tracks_denominators() {
        // 1/u + 1 = (1 + u)/u
        let a = LocPoly::fraction(1.0, 1);
        let b = LocPoly::<f64>::one();
        let s = a.add(&b);
        assert_eq!(s.den, 1);
        assert_eq!(s.num.coeffs, vec![1.0, 1.0]);
        // (u/u) normalizes to 1
        let u_over_u = LocPoly { num: Poly::new(vec![0.0, 1.0]), den: 1 }.normalized();
        assert_eq!(u_over_u.den, 0);
        assert_eq!(u_over_u.num.coeffs, vec![1.0]);
    }

    #[test]
    fn localized_product_cancels() {
        // (1/u) * u^2 = u
        let a = LocPoly::fraction(1.0, 1);
        let b = LocPoly::from_poly(Poly::monomial(1.0, 2));
        let p = a.mul(&b);
        assert_eq!(p.den, 0);
        assert_eq!(p.num.coeffs, vec![0.0, 1.0]);
    }
}
