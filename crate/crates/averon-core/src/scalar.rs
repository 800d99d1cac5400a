//! Coefficient abstractions shared by every algebraic tower in the crate.
//!
//! `Ring` is the minimal interface a truncated series or jet needs from its
//! coefficients; `Scalar` adds division and the elementary functions that
//! system files may use. Both towers implement the traits themselves, so
//! nesting (series of jets, jets of series) comes for free and the ODE
//! integrator can transport any of them.

use crate::{AvError, Result};
use num_complex::Complex64;
use std::collections::HashMap;

pub trait Ring: Clone + std::fmt::Debug + PartialEq + Send + Sync + 'static {
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    fn neg(&self) -> Self;
    /// Structural zero test; used for normalization, never as a tolerance.
    fn is_zero(&self) -> bool;
    /// Largest coefficient magnitude anywhere in the structure.
    fn max_abs(&self) -> f64;
    /// Magnitude of the innermost constant part. Invertibility of a truncated
    /// object is governed by its constant part, so pivoting uses this.
    fn value_mag(&self) -> f64;
    /// Multiplication by a plain real constant.
    fn scale(&self, s: f64) -> Self;
}

pub trait Scalar: Ring {
    fn div(&self, rhs: &Self) -> Self;
    fn inv(&self) -> Self {
        Self::one().div(self)
    }
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn powi(&self, n: i64) -> Self {
        if n < 0 {
            return self.inv().powi(-n);
        }
        let mut acc = Self::one();
        let mut base = self.clone();
        let mut e = n as u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul(&base);
            }
        }
        acc
    }
}

impl Ring for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn sub(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn neg(&self) -> Self {
        -self
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn max_abs(&self) -> f64 {
        self.abs()
    }
    fn value_mag(&self) -> f64 {
        self.abs()
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
}

impl Scalar for f64 {
    fn div(&self, rhs: &Self) -> Self {
        self / rhs
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
}

impl Ring for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn from_f64(v: f64) -> Self {
        Complex64::new(v, 0.0)
    }
    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn sub(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn neg(&self) -> Self {
        -self
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.im == 0.0
    }
    fn max_abs(&self) -> f64 {
        self.norm()
    }
    fn value_mag(&self) -> f64 {
        self.norm()
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
}

impl Scalar for Complex64 {
    fn div(&self, rhs: &Self) -> Self {
        self / rhs
    }
    fn sin(&self) -> Self {
        Complex64::sin(*self)
    }
    fn cos(&self) -> Self {
        Complex64::cos(*self)
    }
    fn exp(&self) -> Self {
        Complex64::exp(*self)
    }
}

/// Determinant over an arbitrary commutative ring by minor expansion,
/// memoized on the remaining-column subset. Division-free on purpose:
/// series and polynomial rings are not fields. Exponential in `n`, intended
/// for the small blocks (n <= 8) this crate works with.
pub fn ring_det<T: Ring>(m: &[Vec<T>]) -> T {
    let n = m.len();
    if n == 0 {
        return T::one();
    }
    assert!(n <= 16, "ring_det is for small matrices");
    for row in m {
        assert_eq!(row.len(), n, "ring_det needs a square matrix");
    }

    fn go<T: Ring>(m: &[Vec<T>], row: usize, mask: u32, memo: &mut HashMap<u32, T>) -> T {
        let n = m.len();
        if row == n {
            return T::one();
        }
        if let Some(v) = memo.get(&mask) {
            return v.clone();
        }
        let mut acc = T::zero();
        let mut positive = true;
        for col in 0..n {
            if mask & (1 << col) == 0 {
                continue;
            }
            if !m[row][col].is_zero() {
                let sub = go(m, row + 1, mask & !(1 << col), memo);
                let term = m[row][col].mul(&sub);
                acc = if positive { acc.add(&term) } else { acc.sub(&term) };
            }
            positive = !positive;
        }
        memo.insert(mask, acc.clone());
        acc
    }

    let full = (1u32 << n) - 1;
    go(m, 0, full, &mut HashMap::new())
}

/// Solves `A X = B` over a scalar tower by Gaussian elimination with
/// partial pivoting on the constant part. `b` holds the right-hand sides as
/// columns. Fails when the constant part of the matrix is singular, which is
/// exactly when the matrix is not invertible over the truncated ring.
pub fn ring_solve<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let n = a.len();
    let ncols = if n == 0 { 0 } else { b[0].len() };
    let mut m: Vec<Vec<T>> = a.to_vec();
    let mut rhs: Vec<Vec<T>> = b.to_vec();
    assert_eq!(rhs.len(), n);

    let scale0 = a
        .iter()
        .flat_map(|r| r.iter().map(|e| e.value_mag()))
        .fold(0.0_f64, f64::max)
        .max(1.0);

    for col in 0..n {
        let (pivot_row, pivot_mag) = (col..n)
            .map(|r| (r, m[r][col].value_mag()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot_mag < 1e-12 * scale0 {
            return Err(AvError::Numerics(format!(
                "singular system in ring_solve (pivot {pivot_mag:.3e} at column {col})"
            )));
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);

        let inv = m[col][col].inv();
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = m[r][col].mul(&inv);
            if factor.is_zero() {
                continue;
            }
            for c in col..n {
                let t = factor.mul(&m[col][c]);
                m[r][c] = m[r][c].sub(&t);
            }
            for c in 0..ncols {
                let t = factor.mul(&rhs[col][c]);
                rhs[r][c] = rhs[r][c].sub(&t);
            }
        }
    }
    for r in 0..n {
        let inv = m[r][r].inv();
        for c in 0..ncols {
            rhs[r][c] = rhs[r][c].mul(&inv);
        }
    }
    Ok(rhs)
}

/// Matrix inverse over a scalar tower; see [`ring_solve`].
pub fn ring_inv<T: Scalar>(a: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let n = a.len();
    let mut id = vec![vec![T::zero(); n]; n];
    for (i, row) in id.iter_mut().enumerate() {
        row[i] = T::one();
    }
    ring_solve(a, &id)
}

pub fn ring_mat_mul<T: Ring>(a: &[Vec<T>], b: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = a.len();
    let k = if n == 0 { 0 } else { a[0].len() };
    let m = if k == 0 { 0 } else { b[0].len() };
    let mut out = vec![vec![T::zero(); m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = T::zero();
            for s in 0..k {
                acc = acc.add(&a[i][s].mul(&b[s][j]));
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn ring_mat_vec<T: Ring>(a: &[Vec<T>], v: &[T]) -> Vec<T> {
    a.iter()
        .map(|row| {
            let mut acc = T::zero();
            for (e, x) in row.iter().zip(v) {
                acc = acc.add(&e.mul(x));
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_matches_closed_form_3x3() {
        let m = vec![
            vec![2.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 4.0],
        ];
        // 2*(12-1) - 1*(4-0) = 18
        assert!((ring_det(&m) - 18.0).abs() < 1e-14);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = vec![vec![0.0, 2.0], vec![3.0, 1.0]];
        let b = vec![vec![4.0], vec![5.0]];
        let x = ring_solve(&a, &b).unwrap();
        assert!((x[0][0] - 1.0).abs() < 1e-14);
        assert!((x[1][0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_rejects_singular() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        let b = vec![vec![1.0], vec![1.0]];
        assert!(ring_solve(&a, &b).is_err());
    }

    #[test]
    fn powi_handles_negative_exponents() {
        let x = 2.0_f64;
        assert!((x.powi(-3) - 0.125).abs() < 1e-15);
        assert!((x.powi(0) - 1.0).abs() < 1e-15);
    }
}
