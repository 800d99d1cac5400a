//! Truncated power series in the perturbation parameter.
//!
//! A series is either a broadcastable constant, produced by the `Ring`
//! constructors so that generic code can mint literals without knowing the
//! ambient truncation order, or a dense coefficient vector `c_0..c_K`.
//! Arithmetic between dense series of different orders truncates to the
//! shorter one and marks the result clipped; constants adopt the other
//! operand's order. Clipping is sticky through every operation so a fishy
//! mixed-order computation is detectable at the end.

use crate::scalar::{Ring, Scalar};

#[derive(Clone, Debug)]
pub struct EpsSeries<T> {
    coeffs: Vec<T>,
    konst: bool,
    clipped: bool,
}

impl<T: Ring> EpsSeries<T> {
    pub fn new(coeffs: Vec<T>) -> Self {
        assert!(!coeffs.is_empty(), "series needs at least the 0th coefficient");
        EpsSeries { coeffs, konst: false, clipped: false }
    }

    /// Broadcastable constant; takes the truncation order of whatever it meets.
    pub fn constant(v: T) -> Self {
        EpsSeries { coeffs: vec![v], konst: true, clipped: false }
    }

    /// Dense zero of the given order.
    pub fn zeros(order: usize) -> Self {
        EpsSeries { coeffs: vec![T::zero(); order + 1], konst: false, clipped: false }
    }

    /// The generator itself, `0 + 1*eps`, padded to `order`.
    pub fn eps(order: usize) -> Self {
        assert!(order >= 1, "eps is not representable at order 0");
        let mut c = vec![T::zero(); order + 1];
        c[1] = T::one();
        EpsSeries { coeffs: c, konst: false, clipped: false }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_broadcast_const(&self) -> bool {
        self.konst
    }

    pub fn was_clipped(&self) -> bool {
        self.clipped
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn coeff(&self, i: usize) -> T {
        if i < self.coeffs.len() {
            self.coeffs[i].clone()
        } else {
            debug_assert!(self.konst, "out-of-range coefficient on a dense series");
            T::zero()
        }
    }

    /// Deliberate truncation; does not set the clipped flag.
    pub fn truncated(&self, order: usize) -> Self {
        if self.konst {
            return self.densified(order);
        }
        let upto = order.min(self.order());
        EpsSeries {
            coeffs: self.coeffs[..=upto].to_vec(),
            konst: false,
            clipped: self.clipped,
        }
    }

    /// Dense representation at exactly `order`. Constants zero-pad; dense
    /// series may only shrink, since coefficients beyond the stored order
    /// are unknown, not zero.
    pub fn densified(&self, order: usize) -> Self {
        if !self.konst {
            assert!(
                order <= self.order(),
                "cannot densify a truncated series upward (stored order {}, requested {order})",
                self.order()
            );
            return self.truncated(order);
        }
        let mut c = vec![T::zero(); order + 1];
        c[0] = self.coeffs[0].clone();
        EpsSeries { coeffs: c, konst: false, clipped: self.clipped }
    }

    /// Multiplication by `eps^j` at fixed truncation order: coefficients
    /// shift up and the top `j` are discarded.
    pub fn shifted_up(&self, j: usize) -> Self {
        let k = self.order();
        let mut c = vec![T::zero(); k + 1];
        for i in j..=k {
            c[i] = self.coeff(i - j);
        }
        EpsSeries { coeffs: c, konst: false, clipped: self.clipped }
    }

    /// Division by `eps^j`, requiring the low coefficients to vanish to
    /// working precision relative to the largest coefficient.
    pub fn shifted_down(&self, j: usize, rel_tol: f64) -> crate::Result<Self> {
        let k = self.order();
        let scale = self.max_abs().max(1e-300);
        for i in 0..j.min(k + 1) {
            if self.coeff(i).max_abs() > rel_tol * scale {
                return Err(crate::AvError::Numerics(format!(
                    "series not divisible by eps^{j}: coefficient {i} has relative size {:.3e}",
                    self.coeff(i).max_abs() / scale
                )));
            }
        }
        let mut c = Vec::with_capacity(k + 1 - j.min(k));
        for i in j..=k {
            c.push(self.coeff(i));
        }
        if c.is_empty() {
            c.push(T::zero());
        }
        Ok(EpsSeries { coeffs: c, konst: false, clipped: self.clipped })
    }

    pub fn map<U: Ring>(&self, f: impl Fn(&T) -> U) -> EpsSeries<U> {
        EpsSeries {
            coeffs: self.coeffs.iter().map(f).collect(),
            konst: self.konst,
            clipped: self.clipped,
        }
    }

    /// Horner evaluation at a concrete parameter value.
    pub fn eval_at(&self, eps: f64) -> T {
        let mut acc = self.coeffs.last().unwrap().clone();
        for c in self.coeffs.iter().rev().skip(1) {
            acc = acc.scale(eps).add(c);
        }
        acc
    }

    /// Index of the first coefficient exceeding `rel_tol` times the largest
    /// coefficient magnitude; `None` when the whole series is at noise level.
    pub fn leading_index(&self, rel_tol: f64) -> Option<usize> {
        let scale = self.max_abs();
        if scale == 0.0 {
            return None;
        }
        self.coeffs.iter().position(|c| c.max_abs() > rel_tol * scale)
    }

    fn dense_len_with(&self, rhs: &Self) -> (usize, bool) {
        match (self.konst, rhs.konst) {
            (true, true) => (1, false),
            (true, false) => (rhs.coeffs.len(), false),
            (false, true) => (self.coeffs.len(), false),
            (false, false) => {
                let la = self.coeffs.len();
                let lb = rhs.coeffs.len();
                (la.min(lb), la != lb)
            }
        }
    }
}

impl<T: Ring> PartialEq for EpsSeries<T> {
    fn eq(&self, other: &Self) -> bool {
        let (len, mismatched) = self.dense_len_with(other);
        if mismatched {
            return false;
        }
        (0..len).all(|i| self.coeff(i) == other.coeff(i))
    }
}

impl<T: Ring> Ring for EpsSeries<T> {
    fn zero() -> Self {
        EpsSeries::constant(T::zero())
    }
    fn one() -> Self {
        EpsSeries::constant(T::one())
    }
    fn from_f64(v: f64) -> Self {
        EpsSeries::constant(T::from_f64(v))
    }

    fn add(&self, rhs: &Self) -> Self {
        let (len, clip) = self.dense_len_with(rhs);
        let coeffs = (0..len).map(|i| self.coeff(i).add(&rhs.coeff(i))).collect();
        EpsSeries {
            coeffs,
            konst: self.konst && rhs.konst,
            clipped: self.clipped || rhs.clipped || clip,
        }
    }

    fn sub(&self, rhs: &Self) -> Self {
        let (len, clip) = self.dense_len_with(rhs);
        let coeffs = (0..len).map(|i| self.coeff(i).sub(&rhs.coeff(i))).collect();
        EpsSeries {
            coeffs,
            konst: self.konst && rhs.konst,
            clipped: self.clipped || rhs.clipped || clip,
        }
    }

    fn mul(&self, rhs: &Self) -> Self {
        if self.konst {
            let v = &self.coeffs[0];
            return EpsSeries {
                coeffs: rhs.coeffs.iter().map(|c| v.mul(c)).collect(),
                konst: rhs.konst,
                clipped: self.clipped || rhs.clipped,
            };
        }
        if rhs.konst {
            return rhs.mul(self);
        }
        let (len, clip) = self.dense_len_with(rhs);
        let mut coeffs = vec![T::zero(); len];
        for (i, slot) in coeffs.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..=i {
                acc = acc.add(&self.coeffs[j].mul(&rhs.coeffs[i - j]));
            }
            *slot = acc;
        }
        EpsSeries {
            coeffs,
            konst: false,
            clipped: self.clipped || rhs.clipped || clip,
        }
    }

    fn neg(&self) -> Self {
        EpsSeries {
            coeffs: self.coeffs.iter().map(|c| c.neg()).collect(),
            konst: self.konst,
            clipped: self.clipped,
        }
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
        EpsSeries {
            coeffs: self.coeffs.iter().map(|c| c.scale(s)).collect(),
            konst: self.konst,
            clipped: self.clipped,
        }
    }
}

impl<T: Scalar> EpsSeries<T> {
    /// Sums `dcoef(m) * w^m` over the nilpotent part `w = self - value`.
    /// `dcoef(m)` must be the m-th Taylor coefficient of the function being
    /// applied, expanded around the constant part.
    fn analytic(&self, dcoef: impl Fn(usize, &T) -> T) -> Self {
        let v = self.coeffs[0].clone();
        if self.konst {
            return EpsSeries {
                coeffs: vec![dcoef(0, &v)],
                konst: true,
                clipped: self.clipped,
            };
        }
        let k = self.order();
        let mut w = self.clone();
        w.coeffs[0] = T::zero();
        let mut acc = EpsSeries::<T>::zeros(k);
        acc.clipped = self.clipped;
        acc.coeffs[0] = dcoef(0, &v);
        let mut wm = EpsSeries::<T>::zeros(k);
        wm.coeffs[0] = T::one();
        for m in 1..=k {
            wm = wm.mul(&w);
            let c = dcoef(m, &v);
            // w^m has no coefficients below eps^m
            for i in m..=k {
                acc.coeffs[i] = acc.coeffs[i].add(&wm.coeffs[i].mul(&c));
            }
        }
        acc
    }
}

impl<T: Scalar> Scalar for EpsSeries<T> {
    fn div(&self, rhs: &Self) -> Self {
        self.mul(&rhs.inv())
    }

    fn inv(&self) -> Self {
        if self.konst {
            return EpsSeries {
                coeffs: vec![self.coeffs[0].inv()],
                konst: true,
                clipped: self.clipped,
            };
        }
        let k = self.order();
        let a0inv = self.coeffs[0].inv();
        let mut out = vec![T::zero(); k + 1];
        out[0] = a0inv.clone();
        for i in 1..=k {
            let mut s = T::zero();
            for j in 1..=i {
                s = s.add(&self.coeffs[j].mul(&out[i - j]));
            }
            out[i] = s.mul(&a0inv).neg();
        }
        EpsSeries { coeffs: out, konst: false, clipped: self.clipped }
    }

    fn sin(&self) -> Self {
        let factorials = factorials_through(self.order());
        self.analytic(|m, v| {
            let d = match m % 4 {
                0 => v.sin(),
                1 => v.cos(),
                2 => v.sin().neg(),
                _ => v.cos().neg(),
            };
            d.scale(1.0 / factorials[m])
        })
    }

    fn cos(&self) -> Self {
        let factorials = factorials_through(self.order());
        self.analytic(|m, v| {
            let d = match m % 4 {
                0 => v.cos(),
                1 => v.sin().neg(),
                2 => v.cos().neg(),
                _ => v.sin(),
            };
            d.scale(1.0 / factorials[m])
        })
    }

    fn exp(&self) -> Self {
        let factorials = factorials_through(self.order());
        self.analytic(|m, v| v.exp().scale(1.0 / factorials[m]))
    }
}

pub(crate) fn factorials_through(n: usize) -> Vec<f64> {
    let mut f = vec![1.0_f64; n + 1];
    for i in 1..=n {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ring_det;

    fn s(v: &[f64]) -> EpsSeries<f64> {
        EpsSeries::new(v.to_vec())
    }

    #[test]
    fn product_truncates_at_shared_order() {
        // (1 + eps)(1 - eps) = 1 - eps^2 at order 2
        let a = s(&[1.0, 1.0, 0.0]);
        let b = s(&[1.0, -1.0, 0.0]);
        let p = a.mul(&b);
        assert_eq!(p.coeffs(), &[1.0, 0.0, -1.0]);
        assert!(!p.was_clipped());
    }

    #[test]
    fn mixed_orders_clip_downward_and_flag() {
        let a = s(&[1.0, 2.0, 3.0, 4.0]);
        let b = s(&[1.0, 1.0]);
        let r = a.add(&b);
        assert_eq!(r.order(), 1);
        assert_eq!(r.coeffs(), &[2.0, 3.0]);
        assert!(r.was_clipped());
        // stickiness
        let r2 = r.mul(&s(&[1.0, 0.0]));
        assert!(r2.was_clipped());
    }

    #[test]
    fn constants_broadcast_without_clipping() {
        let a = s(&[1.0, 2.0, 3.0]);
        let one = EpsSeries::<f64>::one();
        let r = a.add(&one);
        assert_eq!(r.coeffs(), &[2.0, 2.0, 3.0]);
        assert!(!r.was_clipped());
        let p = a.mul(&EpsSeries::from_f64(2.0));
        assert_eq!(p.coeffs(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn inverse_of_one_plus_eps_alternates() {
        let a = s(&[1.0, 1.0, 0.0, 0.0]);
        let inv = a.inv();
        assert_eq!(inv.coeffs(), &[1.0, -1.0, 1.0, -1.0]);
        let check = a.mul(&inv);
        assert_eq!(check.coeffs(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn inverse_with_general_leading_coefficient() {
        let a = s(&[2.0, -1.0, 0.5]);
        let prod = a.mul(&a.inv());
        for (i, c) in prod.coeffs().iter().enumerate() {
            let want = if i == 0 { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-14);
        }
    }

    #[test]
    fn exp_matches_taylor_of_exponent() {
        // exp(eps) at order 4
        let e = EpsSeries::<f64>::eps(4);
        let r = e.exp();
        let want = [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0];
        for (c, w) in r.coeffs().iter().zip(want.iter()) {
            assert!((c - w).abs() < 1e-15);
        }
    }

    #[test]
    fn sin_around_nonzero_base_point() {
        // sin(a + eps) = sin a + eps cos a - eps^2 sin(a)/2 - eps^3 cos(a)/6
        let a = 0.7_f64;
        let mut x = EpsSeries::<f64>::eps(3);
        x.coeffs[0] = a;
        let r = x.sin();
        let want = [a.sin(), a.cos(), -a.sin() / 2.0, -a.cos() / 6.0];
        for (c, w) in r.coeffs().iter().zip(want.iter()) {
            assert!((c - w).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_at_is_horner() {
        let a = s(&[1.0, -2.0, 3.0]);
        let v = a.eval_at(0.1);
        assert!((v - (1.0 - 0.2 + 0.03)).abs() < 1e-15);
    }

    #[test]
    fn determinant_of_series_matrix() {
        // det [[1, eps],[eps, 1]] = 1 - eps^2
        let e = EpsSeries::<f64>::eps(2);
        let one = EpsSeries::<f64>::one().densified(2);
        let m = vec![vec![one.clone(), e.clone()], vec![e.clone(), one.clone()]];
        let d = ring_det(&m);
        assert_eq!(d.coeff(0), 1.0);
        assert_eq!(d.coeff(1), 0.0);
        assert_eq!(d.coeff(2), -1.0);
    }

    #[test]
    fn shifts_move_coefficients_within_fixed_order() {
        let a = s(&[1.0, 2.0, 3.0]);
        let up = a.shifted_up(1);
        assert_eq!(up.coeffs(), &[0.0, 1.0, 2.0]);
        let down = up.shifted_down(1, 1e-12).unwrap();
        assert_eq!(down.coeffs(), &[1.0, 2.0]);
        assert!(a.shifted_down(1, 1e-12).is_err());
    }

    #[test]
    fn leading_index_uses_relative_threshold() {
        let a = s(&[1e-14, 0.0, 2.0, 5.0]);
        assert_eq!(a.leading_index(1e-9), Some(2));
        let z = EpsSeries::<f64>::zeros(3);
        assert_eq!(z.leading_index(1e-9), None);
    }
}
