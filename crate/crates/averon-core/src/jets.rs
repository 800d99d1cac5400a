//! Truncated multivariate Taylor expansions (jets) with ring coefficients.
//!
//! A jet stores the coefficients of a Taylor polynomial in `dims` offset
//! variables up to total degree `order`, indexed in graded lexicographic
//! order. Coefficients are Taylor-normalized (derivative divided by the
//! factorial of the multi-index); [`Jet::extract`] undoes the normalization.
//!
//! Shapes (index tables and the multiplication pairing) are interned per
//! `(dims, order)` so jets carry only an `Arc` and a coefficient vector.
//! Like series, the `Ring` constructors produce broadcastable constants so
//! generic code can mint literals without knowing the ambient shape.

use crate::eps_series::factorials_through;
use crate::scalar::{Ring, Scalar};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

pub struct JetShape {
    pub dims: usize,
    pub order: usize,
    /// Multi-indices in graded lex order; position 0 is the constant term.
    pub idx: Vec<Vec<u8>>,
    pos: HashMap<Vec<u8>, usize>,
    /// All position triples (a, b, a+b) with deg(a) + deg(b) <= order.
    prods: Vec<(u32, u32, u32)>,
    /// For each non-constant position: (first nonzero direction, parent position).
    parent: Vec<(usize, usize)>,
}

impl JetShape {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position(&self, alpha: &[u8]) -> Option<usize> {
        self.pos.get(alpha).copied()
    }
}

fn compositions(dims: usize, total: u8) -> Vec<Vec<u8>> {
    if dims == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(dims - 1, total - first) {
            let mut v = Vec::with_capacity(dims);
            v.push(first);
            v.append(&mut rest);
            out.push(v);
        }
    }
    out
}

fn build_shape(dims: usize, order: usize) -> JetShape {
    let mut idx = Vec::new();
    for deg in 0..=order as u8 {
        idx.extend(compositions(dims, deg));
    }
    let pos: HashMap<Vec<u8>, usize> =
        idx.iter().cloned().enumerate().map(|(i, a)| (a, i)).collect();

    let degs: Vec<usize> = idx
        .iter()
        .map(|a| a.iter().map(|&e| e as usize).sum())
        .collect();

    let mut prods = Vec::new();
    for a in 0..idx.len() {
        for b in 0..idx.len() {
            if degs[a] + degs[b] > order {
                continue;
            }
            let sum: Vec<u8> = idx[a].iter().zip(&idx[b]).map(|(x, y)| x + y).collect();
            prods.push((a as u32, b as u32, pos[&sum] as u32));
        }
    }

    let mut parent = Vec::with_capacity(idx.len());
    for a in &idx {
        if a.iter().all(|&e| e == 0) {
            parent.push((usize::MAX, usize::MAX));
            continue;
        }
        let j = a.iter().position(|&e| e > 0).unwrap();
        let mut p = a.clone();
        p[j] -= 1;
        parent.push((j, pos[&p]));
    }

    JetShape { dims, order, idx, pos, prods, parent }
}

pub fn jet_shape(dims: usize, order: usize) -> Arc<JetShape> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetShape>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((dims, order))
        .or_insert_with(|| Arc::new(build_shape(dims, order)))
        .clone()
}

#[derive(Clone)]
pub struct Jet<T> {
    shape: Option<Arc<JetShape>>,
    coeffs: Vec<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Jet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.shape {
            None => write!(f, "Jet::const({:?})", self.coeffs[0]),
            Some(s) => write!(
                f,
                "Jet(d={}, p={}, {:?})",
                s.dims, s.order, self.coeffs
            ),
        }
    }
}

impl<T: Ring> Jet<T> {
    pub fn from_coeffs(shape: Arc<JetShape>, coeffs: Vec<T>) -> Self {
        assert_eq!(coeffs.len(), shape.len());
        Jet { shape: Some(shape), coeffs }
    }

    pub fn constant(v: T) -> Self {
        Jet { shape: None, coeffs: vec![v] }
    }

    pub fn zeroed(shape: &Arc<JetShape>) -> Self {
        Jet { shape: Some(shape.clone()), coeffs: vec![T::zero(); shape.len()] }
    }

    /// The coordinate jet `value + offset_dir`.
    pub fn variable(shape: &Arc<JetShape>, value: T, dir: usize) -> Self {
        let mut j = Jet::zeroed(shape);
        j.coeffs[0] = value;
        if shape.order >= 1 {
            let mut e = vec![0u8; shape.dims];
            e[dir] = 1;
            let p = shape.position(&e).unwrap();
            j.coeffs[p] = T::one();
        }
        j
    }

    pub fn shape(&self) -> Option<&Arc<JetShape>> {
        self.shape.as_ref()
    }

    pub fn is_broadcast_const(&self) -> bool {
        self.shape.is_none()
    }

    pub fn value(&self) -> T {
        self.coeffs[0].clone()
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Taylor coefficient at multi-index `alpha` (zero for absent broadcast
    /// positions).
    pub fn coeff(&self, alpha: &[u8]) -> T {
        match &self.shape {
            None => {
                if alpha.iter().all(|&e| e == 0) {
                    self.coeffs[0].clone()
                } else {
                    T::zero()
                }
            }
            Some(s) => {
                let p = s
                    .position(alpha)
                    .unwrap_or_else(|| panic!("multi-index {alpha:?} outside jet shape"));
                self.coeffs[p].clone()
            }
        }
    }

    /// Partial derivative `d^alpha f`, i.e. the coefficient times `alpha!`.
    pub fn extract(&self, alpha: &[u8]) -> T {
        let mut fct = 1.0;
        for &e in alpha {
            for q in 2..=e as usize {
                fct *= q as f64;
            }
        }
        self.coeff(alpha).scale(fct)
    }

    /// First derivative in one direction as a jet one order lower.
    pub fn deriv(&self, dir: usize) -> Jet<T> {
        let s = self
            .shape
            .as_ref()
            .expect("cannot differentiate a broadcast constant without a shape");
        assert!(s.order >= 1, "jet order too low to differentiate");
        let out_shape = jet_shape(s.dims, s.order - 1);
        let mut out = Jet::zeroed(&out_shape);
        for (q, alpha) in out_shape.idx.iter().enumerate() {
            let mut up = alpha.clone();
            up[dir] += 1;
            let p = s.position(&up).unwrap();
            out.coeffs[q] = self.coeffs[p].scale(up[dir] as f64);
        }
        out
    }

    /// Coefficient of the last variable's power `p`, as a jet in the
    /// remaining variables. The result keeps the slots freed by the extracted
    /// power, so its order is `order - p`.
    pub fn slice_last(&self, p: usize) -> Jet<T> {
        match &self.shape {
            None => {
                if p == 0 {
                    self.clone()
                } else {
                    Jet::constant(T::zero())
                }
            }
            Some(s) => {
                assert!(s.dims >= 2 && p <= s.order);
                let out_shape = jet_shape(s.dims - 1, s.order - p);
                let mut out = Jet::zeroed(&out_shape);
                for (q, alpha) in out_shape.idx.iter().enumerate() {
                    let mut full = alpha.clone();
                    full.push(p as u8);
                    out.coeffs[q] = self.coeffs[s.position(&full).unwrap()].clone();
                }
                out
            }
        }
    }

    /// Embeds a jet into a shape with one extra trailing variable, multiplied
    /// by the trailing variable to the power `p`. Inverse of [`slice_last`].
    pub fn embed_last(&self, target: &Arc<JetShape>, p: usize) -> Jet<T> {
        let mut out = Jet::zeroed(target);
        match &self.shape {
            None => {
                let mut alpha = vec![0u8; target.dims];
                alpha[target.dims - 1] = p as u8;
                out.coeffs[target.position(&alpha).unwrap()] = self.coeffs[0].clone();
            }
            Some(s) => {
                assert_eq!(s.dims + 1, target.dims);
                for (q, alpha) in s.idx.iter().enumerate() {
                    let deg: usize = alpha.iter().map(|&e| e as usize).sum();
                    if deg + p > target.order {
                        continue;
                    }
                    let mut full = alpha.clone();
                    full.push(p as u8);
                    out.coeffs[target.position(&full).unwrap()] = self.coeffs[q].clone();
                }
            }
        }
        out
    }

    /// Same coefficients restricted to total degree at most `order`.
    pub fn truncated(&self, order: usize) -> Jet<T> {
        match &self.shape {
            None => self.clone(),
            Some(s) => {
                assert!(order <= s.order);
                let out_shape = jet_shape(s.dims, order);
                let mut out = Jet::zeroed(&out_shape);
                for (q, alpha) in out_shape.idx.iter().enumerate() {
                    out.coeffs[q] = self.coeffs[s.position(alpha).unwrap()].clone();
                }
                out
            }
        }
    }

    fn broadcast_pair<'a>(&'a self, rhs: &'a Self) -> (Option<&'a Arc<JetShape>>, usize) {
        match (&self.shape, &rhs.shape) {
            (None, None) => (None, 1),
            (Some(s), None) => (Some(s), s.len()),
            (None, Some(s)) => (Some(s), s.len()),
            (Some(a), Some(b)) => {
                assert!(
                    a.dims == b.dims && a.order == b.order,
                    "jet shape mismatch: ({},{}) vs ({},{})",
                    a.dims,
                    a.order,
                    b.dims,
                    b.order
                );
                (Some(a), a.len())
            }
        }
    }

    fn coeff_at(&self, i: usize) -> T {
        if i < self.coeffs.len() {
            self.coeffs[i].clone()
        } else {
            T::zero()
        }
    }
}

impl<T: Ring> PartialEq for Jet<T> {
    fn eq(&self, other: &Self) -> bool {
        let (_, len) = self.broadcast_pair(other);
        (0..len).all(|i| self.coeff_at(i) == other.coeff_at(i))
    }
}

impl<T: Ring> Ring for Jet<T> {
    fn zero() -> Self {
        Jet::constant(T::zero())
    }
    fn one() -> Self {
        Jet::constant(T::one())
    }
    fn from_f64(v: f64) -> Self {
        Jet::constant(T::from_f64(v))
    }

    fn add(&self, rhs: &Self) -> Self {
        let (shape, len) = self.broadcast_pair(rhs);
        let coeffs = (0..len).map(|i| self.coeff_at(i).add(&rhs.coeff_at(i))).collect();
        Jet { shape: shape.cloned(), coeffs }
    }

    fn sub(&self, rhs: &Self) -> Self {
        let (shape, len) = self.broadcast_pair(rhs);
        let coeffs = (0..len).map(|i| self.coeff_at(i).sub(&rhs.coeff_at(i))).collect();
        Jet { shape: shape.cloned(), coeffs }
    }

    fn mul(&self, rhs: &Self) -> Self {
        match (&self.shape, &rhs.shape) {
            (None, _) => {
                let v = &self.coeffs[0];
                Jet {
                    shape: rhs.shape.clone(),
                    coeffs: rhs.coeffs.iter().map(|c| v.mul(c)).collect(),
                }
            }
            (_, None) => rhs.mul(self),
            (Some(s), Some(_)) => {
                let (_, _) = self.broadcast_pair(rhs);
                let mut out = vec![T::zero(); s.len()];
                for &(a, b, c) in &s.prods {
                    let pa = &self.coeffs[a as usize];
                    if pa.is_zero() {
                        continue;
                    }
                    let pb = &rhs.coeffs[b as usize];
                    if pb.is_zero() {
                        continue;
                    }
                    out[c as usize] = out[c as usize].add(&pa.mul(pb));
                }
                Jet { shape: self.shape.clone(), coeffs: out }
            }
        }
    }

    fn neg(&self) -> Self {
        Jet { shape: self.shape.clone(), coeffs: self.coeffs.iter().map(|c| c.neg()).collect() }
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
        Jet { shape: self.shape.clone(), coeffs: self.coeffs.iter().map(|c| c.scale(s)).collect() }
    }
}

impl<T: Scalar> Jet<T> {
    /// Sums `dcoef(m) * w^m` over the nilpotent offset part `w`; `w^m`
    /// vanishes beyond the jet order, so the sum is finite.
    fn analytic(&self, dcoef: impl Fn(usize, &T) -> T) -> Self {
        let v = self.coeffs[0].clone();
        match &self.shape {
            None => Jet { shape: None, coeffs: vec![dcoef(0, &v)] },
            Some(s) => {
                let mut w = self.clone();
                w.coeffs[0] = T::zero();
                let mut acc = Jet::zeroed(s);
                acc.coeffs[0] = dcoef(0, &v);
                let mut wm = Jet::zeroed(s);
                wm.coeffs[0] = T::one();
                for m in 1..=s.order {
                    wm = wm.mul(&w);
                    let c = dcoef(m, &v);
                    for (slot, wc) in acc.coeffs.iter_mut().zip(wm.coeffs.iter()) {
                        if !wc.is_zero() {
                            *slot = slot.add(&wc.mul(&c));
                        }
                    }
                }
                acc
            }
        }
    }
}

impl<T: Scalar> Scalar for Jet<T> {
    fn div(&self, rhs: &Self) -> Self {
        self.mul(&rhs.inv())
    }

    fn inv(&self) -> Self {
        // 1/(v+w) = sum (-1)^m v^{-m-1} w^m
        let vinv = self.coeffs[0].inv();
        let mut pw = vinv.clone();
        let mut powers = vec![vinv.clone()];
        let order = self.shape.as_ref().map_or(0, |s| s.order);
        for _ in 0..order {
            pw = pw.mul(&vinv);
            powers.push(pw.clone());
        }
        self.analytic(|m, _| {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            powers[m].scale(sign)
        })
    }

    fn sin(&self) -> Self {
        let order = self.shape.as_ref().map_or(0, |s| s.order);
        let factorials = factorials_through(order);
        let sv = self.coeffs[0].sin();
        let cv = self.coeffs[0].cos();
        self.analytic(|m, _| {
            let d = match m % 4 {
                0 => sv.clone(),
                1 => cv.clone(),
                2 => sv.neg(),
                _ => cv.neg(),
            };
            d.scale(1.0 / factorials[m])
        })
    }

    fn cos(&self) -> Self {
        let order = self.shape.as_ref().map_or(0, |s| s.order);
        let factorials = factorials_through(order);
        let sv = self.coeffs[0].sin();
        let cv = self.coeffs[0].cos();
        self.analytic(|m, _| {
            let d = match m % 4 {
                0 => cv.clone(),
                1 => sv.neg(),
                2 => cv.neg(),
                _ => sv.clone(),
            };
            d.scale(1.0 / factorials[m])
        })
    }

    fn exp(&self) -> Self {
        let order = self.shape.as_ref().map_or(0, |s| s.order);
        let factorials = factorials_through(order);
        let ev = self.coeffs[0].exp();
        self.analytic(|m, _| ev.scale(1.0 / factorials[m]))
    }
}

/// Lifts a point to coordinate jets: component `j` becomes
/// `z[j] + offset_j` expanded to the given order.
pub fn jet_lift(z: &[f64], order: usize) -> Vec<Jet<f64>> {
    let shape = jet_shape(z.len(), order);
    z.iter()
        .enumerate()
        .map(|(j, &v)| Jet::variable(&shape, v, j))
        .collect()
}

/// Evaluates the Taylor polynomial of `outer` at ring-valued offsets.
///
/// This is simultaneously jet composition (offsets are jets with vanishing
/// value part), series substitution (offsets are series), and plain
/// polynomial evaluation. Offsets must represent displacements from the
/// jet's expansion point; a non-nilpotent offset silently degrades the
/// truncation guarantee, so callers keep offset values at zero.
pub fn eval_jet_poly<T: Ring>(outer: &Jet<f64>, offsets: &[T]) -> T {
    let shape = match outer.shape() {
        None => return T::from_f64(outer.value()),
        Some(s) => s.clone(),
    };
    assert_eq!(offsets.len(), shape.dims, "offset count must match jet dims");
    let mut monos: Vec<Option<T>> = vec![None; shape.len()];
    let mut acc = T::from_f64(outer.coeffs()[0]);
    monos[0] = Some(T::one());
    for q in 1..shape.len() {
        let (dir, par) = shape.parent[q];
        let parent = monos[par].clone().expect("graded order guarantees parents first");
        let m = parent.mul(&offsets[dir]);
        let c = outer.coeffs()[q];
        if c != 0.0 {
            acc = acc.add(&m.scale(c));
        }
        monos[q] = Some(m);
    }
    acc
}

/// All multiplicity vectors `c` with `sum j*c_j = l`, i.e. the partitions of
/// `l` encoded by part counts (`c[j]` = number of parts equal to `j`,
/// `c[0]` unused). Cached through l = 8; larger arguments are supported but
/// recomputed per call.
pub fn partitions(l: usize) -> Vec<Vec<usize>> {
    static CACHE: OnceLock<Vec<Vec<Vec<usize>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| (0..=8).map(enumerate_partitions).collect());
    if l <= 8 {
        cache[l].clone()
    } else {
        enumerate_partitions(l)
    }
}

fn enumerate_partitions(l: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut counts = vec![0usize; l + 1];
    fn go(remaining: usize, max_part: usize, counts: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining == 0 {
            out.push(counts.clone());
            return;
        }
        for part in (1..=max_part.min(remaining)).rev() {
            counts[part] += 1;
            go(remaining - part, part, counts, out);
            counts[part] -= 1;
        }
    }
    if l == 0 {
        out.push(counts);
    } else {
        go(l, l, &mut counts, &mut out);
    }
    out
}

/// Coefficient of `t^i` in `sum_l t^l u_l(v_1 t + v_2 t^2 + ...)`, the
/// multivariate chain-rule sum over partitions that every implicit series
/// expansion in this crate reduces to.
///
/// `stages[l]` holds the component jets of the l-th stage map at the
/// expansion point; `curve` holds the coefficient-normalized curve
/// coefficients `v_1, v_2, ...` (so the derivative `d^i/dt^i` of the
/// composite is `i!` times the returned value). Curve entries beyond what is
/// supplied are treated as zero, which is exactly what implicit solves need
/// when the top coefficient is still unknown.
pub fn faa_di_bruno_sum(stages: &[Vec<Jet<f64>>], curve: &[Vec<f64>], i: usize) -> Vec<f64> {
    assert!(!stages.is_empty());
    let ncomp = stages[0].len();
    let dims = stages[0][0]
        .shape()
        .map(|s| s.dims)
        .expect("stage jets must carry a shape");
    let tshape = jet_shape(1, i);

    // offsets in one curve variable t: component s gets sum_j v_j[s] t^j
    let mut offsets: Vec<Jet<f64>> = Vec::with_capacity(dims);
    for s in 0..dims {
        let mut j = Jet::zeroed(&tshape);
        for (jj, v) in curve.iter().enumerate() {
            let power = jj + 1;
            if power <= i {
                j.coeffs[power] = v[s];
            }
        }
        offsets.push(j);
    }

    let mut out = vec![0.0; ncomp];
    for (l, stage) in stages.iter().enumerate() {
        if l > i {
            break;
        }
        assert_eq!(stage.len(), ncomp);
        for (c, jet) in stage.iter().enumerate() {
            let composed: Jet<f64> = eval_jet_poly(jet, &offsets);
            // a constant composite has no t-dependence at all
            out[c] += match composed.shape() {
                None => {
                    if i == l {
                        composed.value()
                    } else {
                        0.0
                    }
                }
                Some(_) => composed.coeffs()[tshape.position(&[(i - l) as u8]).unwrap()],
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_sizes_are_binomial() {
        assert_eq!(jet_shape(3, 2).len(), 10);
        assert_eq!(jet_shape(3, 3).len(), 20);
        assert_eq!(jet_shape(3, 4).len(), 35);
        assert_eq!(jet_shape(2, 4).len(), 15);
        assert_eq!(jet_shape(4, 1).len(), 5);
    }

    #[test]
    fn product_of_coordinates_has_mixed_second_derivative() {
        let v = jet_lift(&[1.0, 2.0], 2);
        let p = v[0].mul(&v[1]);
        assert_eq!(p.value(), 2.0);
        assert_eq!(p.extract(&[1, 0]), 2.0); // d/dx (xy) = y
        assert_eq!(p.extract(&[0, 1]), 1.0); // d/dy (xy) = x
        assert_eq!(p.extract(&[1, 1]), 1.0);
        assert_eq!(p.extract(&[2, 0]), 0.0);
    }

    #[test]
    fn cubic_taylor_coefficients() {
        // f(x) = x^3 at x0 = 2: coefficients 8, 12, 6, 1
        let x = jet_lift(&[2.0], 3).pop().unwrap();
        let f = x.mul(&x).mul(&x);
        assert_eq!(f.coeffs(), &[8.0, 12.0, 6.0, 1.0]);
        assert_eq!(f.extract(&[2]), 12.0); // second derivative 6x = 12
    }

    #[test]
    fn sin_jet_matches_chain_rule() {
        // d/dx sin(x^2) = 2x cos(x^2); d2 = 2cos(x^2) - 4x^2 sin(x^2)
        let x0 = 0.8_f64;
        let x = jet_lift(&[x0], 2).pop().unwrap();
        let f = x.mul(&x).sin();
        let d1 = 2.0 * x0 * (x0 * x0).cos();
        let d2 = 2.0 * (x0 * x0).cos() - 4.0 * x0 * x0 * (x0 * x0).sin();
        assert!((f.extract(&[1]) - d1).abs() < 1e-13);
        assert!((f.extract(&[2]) - d2).abs() < 1e-13);
    }

    #[test]
    fn division_and_exp_compose() {
        // f(x,y) = exp(x/y) at (1, 2)
        let v = jet_lift(&[1.0, 2.0], 2);
        let f = v[0].div(&v[1]).exp();
        let e = (0.5_f64).exp();
        assert!((f.value() - e).abs() < 1e-14);
        assert!((f.extract(&[1, 0]) - e / 2.0).abs() < 1e-13); // f_x = e^{x/y}/y
        // f_y = -x e^{x/y} / y^2
        assert!((f.extract(&[0, 1]) + e / 4.0).abs() < 1e-13);
        // f_xy = e^{x/y} (-1/y^2 - x/y^3)
        let fxy = e * (-0.25 - 0.125);
        assert!((f.extract(&[1, 1]) - fxy).abs() < 1e-13);
    }

    #[test]
    fn deriv_shifts_multi_indices() {
        let v = jet_lift(&[1.0, 2.0], 3);
        // g = x^2 y
        let g = v[0].mul(&v[0]).mul(&v[1]);
        let gx = g.deriv(0); // 2xy
        assert_eq!(gx.value(), 4.0);
        assert_eq!(gx.extract(&[1, 0]), 4.0);
        assert_eq!(gx.extract(&[0, 1]), 2.0);
    }

    #[test]
    fn eval_jet_poly_reproduces_polynomial_values() {
        let v = jet_lift(&[1.0, -1.0], 3);
        // h = x^3 - 2xy at (1,-1): value 3
        let h = v[0].mul(&v[0]).mul(&v[0]).sub(&v[0].mul(&v[1]).scale(2.0));
        let val: f64 = eval_jet_poly(&h, &[0.25_f64, 0.5]);
        // exact polynomial: (1.25)^3 - 2*1.25*(-0.5)
        let want = 1.25_f64.powi(3) + 1.25;
        assert!((val - want).abs() < 1e-14);
    }

    #[test]
    fn composition_through_eval_jet_poly_matches_chain_rule() {
        // outer f(u) = u^2 at u0 = 1; inner u = 1 + (x + x^2) as offset jet
        let u = jet_lift(&[1.0], 3).pop().unwrap();
        let f = u.mul(&u);
        let xsh = jet_shape(1, 3);
        let mut w = Jet::<f64>::zeroed(&xsh);
        w.coeffs[1] = 1.0;
        w.coeffs[2] = 1.0;
        let g: Jet<f64> = eval_jet_poly(&f, &[w]);
        // (1 + x + x^2)^2 = 1 + 2x + 3x^2 + 2x^3 + ...
        assert_eq!(g.coeffs(), &[1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn partition_counts_match_partition_numbers() {
        for (l, want) in [(1, 1), (2, 2), (3, 3), (4, 5), (5, 7)] {
            assert_eq!(partitions(l).len(), want, "p({l})");
        }
        for c in partitions(6) {
            let total: usize = c.iter().enumerate().map(|(j, &n)| j * n).sum();
            assert_eq!(total, 6);
        }
    }

    #[test]
    fn chain_rule_sum_reproduces_second_derivative() {
        // u(x) = x^2, v(t) = 1 + t: d^2/dt^2 u(v(t)) = 2
        let x = jet_lift(&[1.0], 2).pop().unwrap();
        let u = x.mul(&x);
        let got = faa_di_bruno_sum(&[vec![u]], &[vec![1.0]], 2);
        assert!((2.0 * got[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn chain_rule_sum_on_staged_family() {
        // F(v, t) = u0(v) + t u1(v), u0 = v^2 - 1, u1 = v, at v0 = 1 with
        // v_1 = -1/2: coefficient of t^2 in u0(1 + v_1 t) + t u1(1 + v_1 t)
        // is v_1^2 + v_1 = -1/4.
        let x = jet_lift(&[1.0], 3).pop().unwrap();
        let u0 = x.mul(&x).sub(&Jet::one());
        let u1 = x.clone();
        let got = faa_di_bruno_sum(&[vec![u0], vec![u1]], &[vec![-0.5]], 2);
        assert!((got[0] - (-0.25)).abs() < 1e-14);
    }

    #[test]
    fn nested_series_coefficients_survive_jet_arithmetic() {
        use crate::eps_series::EpsSeries;
        // jet over series: x = (1 + eps) + offset, f = x^2
        let shape = jet_shape(1, 2);
        let base = EpsSeries::new(vec![1.0, 1.0]);
        let x = Jet::variable(&shape, base, 0);
        let f = x.mul(&x);
        // value (1+eps)^2 = 1 + 2eps (truncated at order 1)
        assert_eq!(f.value().coeffs(), &[1.0, 2.0]);
        // df/dx = 2(1+eps)
        assert_eq!(f.extract(&[1]).coeffs(), &[2.0, 2.0]);
        let d2 = f.extract(&[2]);
        assert_eq!(d2.coeff(0), 2.0);
        assert_eq!(d2.coeff(1), 0.0);
    }
}
