//! Time transport: one adaptive Runge-Kutta integrator, generic over the
//! coefficient tower carried by the states, plus an independent fixed-grid
//! route for the low perturbation orders used only as a cross-check.
//!
//! The generic integrator moves plain states, variational jets, perturbation
//! series, and series-of-jets with the same code path; what varies is the
//! ring the arithmetic happens in. The fixed-grid route below deliberately
//! shares none of that machinery.

use crate::jets::{jet_shape, Jet};
use crate::scalar::{ring_solve, Scalar};
use crate::sysdsl::SystemDef;
use crate::eps_series::EpsSeries;
use crate::{AvError, Result};
use num_complex::Complex64;

#[derive(Clone, Debug)]
pub struct OdeOpts {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for OdeOpts {
    fn default() -> Self {
        OdeOpts { atol: 1e-12, rtol: 1e-10, max_steps: 1_000_000 }
    }
}

// Dormand-Prince 5(4) tableau, first-same-as-last.
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// fifth-order weights minus the embedded fourth-order weights
const ERR: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1` with embedded error control.
pub fn integrate<T, F>(mut f: F, t0: f64, t1: f64, y0: &[T], opts: &OdeOpts) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(f64, &[T]) -> Result<Vec<T>>,
{
    assert!(t1 > t0);
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h = (t1 - t0) / 64.0;
    let hmin = (t1 - t0) * 1e-13;
    let mut k1 = f(t, &y)?;
    let mut steps = 0usize;

    let comb = |base: &[T], ks: &[&Vec<T>], ws: &[f64], h: f64| -> Vec<T> {
        (0..n)
            .map(|i| {
                let mut acc = base[i].clone();
                for (k, w) in ks.iter().zip(ws) {
                    if *w != 0.0 {
                        acc = acc.add(&k[i].scale(h * w));
                    }
                }
                acc
            })
            .collect()
    };

    while t < t1 {
        if steps >= opts.max_steps {
            return Err(AvError::Numerics(format!(
                "integrator exceeded {} steps at t = {t:.6}",
                opts.max_steps
            )));
        }
        steps += 1;
        if t + h > t1 {
            h = t1 - t;
        }

        let k2 = f(t + C[0] * h, &comb(&y, &[&k1], &A2, h))?;
        let k3 = f(t + C[1] * h, &comb(&y, &[&k1, &k2], &A3, h))?;
        let k4 = f(t + C[2] * h, &comb(&y, &[&k1, &k2, &k3], &A4, h))?;
        let k5 = f(t + C[3] * h, &comb(&y, &[&k1, &k2, &k3, &k4], &A5, h))?;
        let k6 = f(t + C[4] * h, &comb(&y, &[&k1, &k2, &k3, &k4, &k5], &A6, h))?;
        let ynew = comb(&y, &[&k1, &k2, &k3, &k4, &k5, &k6], &B5, h);
        let k7 = f(t + h, &ynew)?;

        let mut err: f64 = 0.0;
        let ks = [&k1, &k2, &k3, &k4, &k5, &k6, &k7];
        for i in 0..n {
            let mut e = T::zero();
            for (k, w) in ks.iter().zip(&ERR) {
                if *w != 0.0 {
                    e = e.add(&k[i].scale(*w));
                }
            }
            let sc = opts.atol + opts.rtol * y[i].max_abs().max(ynew[i].max_abs());
            err = err.max(e.max_abs() * h / sc);
        }

        if err <= 1.0 {
            t += h;
            y = ynew;
            k1 = k7;
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
        if h < hmin {
            return Err(AvError::Numerics(format!(
                "integrator step size underflow at t = {t:.6}"
            )));
        }
    }
    Ok(y)
}

/// State after one forcing period.
pub fn flow_map(sys: &SystemDef, x0: &[f64], eps: f64, opts: &OdeOpts) -> Result<Vec<f64>> {
    integrate(|t, y| sys.eval_rhs(t, y, &eps), 0.0, sys.period, x0, opts)
}

/// State and first variational matrix `d x(T) / d x0` after one period.
pub fn fundamental_matrix(
    sys: &SystemDef,
    x0: &[f64],
    eps: f64,
    opts: &OdeOpts,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = sys.dim();
    let shape = jet_shape(n, 1);
    let y0: Vec<Jet<f64>> = x0
        .iter()
        .enumerate()
        .map(|(j, &v)| Jet::variable(&shape, v, j))
        .collect();
    let jeps = Jet::constant(eps);
    let yt = integrate(|t, y| sys.eval_rhs(t, y, &jeps), 0.0, sys.period, &y0, opts)?;
    let vals = yt.iter().map(|j| j.value()).collect();
    let mut mat = vec![vec![0.0; n]; n];
    for (i, jet) in yt.iter().enumerate() {
        for j in 0..n {
            let mut e = vec![0u8; n];
            e[j] = 1;
            mat[i][j] = jet.coeff(&e);
        }
    }
    Ok((vals, mat))
}

/// Period map expanded in the perturbation parameter at a fixed start point.
/// Coefficient `q` of component `i` is the q-th normalized perturbation
/// order of the flow.
pub fn flow_eps(
    sys: &SystemDef,
    z0: &[f64],
    kmax: usize,
    opts: &OdeOpts,
) -> Result<Vec<EpsSeries<f64>>> {
    let eps = EpsSeries::<f64>::eps(kmax.max(1)).densified(kmax.max(1));
    let y0: Vec<EpsSeries<f64>> = z0
        .iter()
        .map(|&v| {
            let mut c = vec![0.0; kmax + 1];
            c[0] = v;
            EpsSeries::new(c)
        })
        .collect();
    integrate(|t, y| sys.eval_rhs(t, y, &eps), 0.0, sys.period, &y0, opts)
}

/// Period map expanded jointly in the perturbation parameter (series, to
/// order `kmax`) and in the start point (jets, to order `porder`) around
/// `z0`.
#[derive(Clone, Debug)]
pub struct FlowJet {
    /// one series per state component; each coefficient is a jet in the
    /// start-point displacement
    pub comps: Vec<EpsSeries<Jet<f64>>>,
}

pub fn flow_eps_jet(
    sys: &SystemDef,
    z0: &[f64],
    kmax: usize,
    porder: usize,
    opts: &OdeOpts,
) -> Result<FlowJet> {
    let n = sys.dim();
    let shape = jet_shape(n, porder);
    let ord = kmax.max(1);
    let eps = EpsSeries::<Jet<f64>>::eps(ord).densified(ord);
    let y0: Vec<EpsSeries<Jet<f64>>> = z0
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let mut c = vec![Jet::zeroed(&shape); kmax + 1];
            c[0] = Jet::variable(&shape, v, j);
            EpsSeries::new(c)
        })
        .collect();
    let comps = integrate(|t, y| sys.eval_rhs(t, y, &eps), 0.0, sys.period, &y0, opts)?;
    Ok(FlowJet { comps })
}

impl FlowJet {
    pub fn order(&self) -> usize {
        self.comps[0].order()
    }

    /// Jet of perturbation order q for every component.
    pub fn order_jets(&self, q: usize) -> Vec<Jet<f64>> {
        self.comps.iter().map(|c| c.coeff(q)).collect()
    }
}

// ---------------------------------------------------------------------------
// Independent fixed-grid route
// ---------------------------------------------------------------------------

/// First two normalized perturbation orders of the period map at `z0`,
/// computed by the variation-of-constants recursion on a fixed grid: the
/// unperturbed path and its fundamental matrix move by classical RK4, the
/// graded fields and their space derivatives come from circle collocation in
/// a complexified perturbation parameter, and the layer integrals use
/// cumulative Simpson rules. Shares no code with the series integrator.
pub fn variational_orders(sys: &SystemDef, z0: &[f64], grid: usize) -> Result<[Vec<f64>; 2]> {
    assert!(grid >= 4 && grid % 2 == 0);
    let n = sys.dim();
    let per = sys.period;
    let h = per / grid as f64;

    // unperturbed path at half-grid resolution
    let mut xs = Vec::with_capacity(2 * grid + 1);
    xs.push(z0.to_vec());
    let mut x = z0.to_vec();
    let rhs0 = |t: f64, x: &[f64]| sys.eval_rhs(t, x, &0.0);
    for j in 0..2 * grid {
        let t = j as f64 * h / 2.0;
        x = rk4_step(&rhs0, t, &x, h / 2.0)?;
        xs.push(x.clone());
    }

    // graded fields with space jets at every half node
    let mut jets = Vec::with_capacity(2 * grid + 1);
    for (j, xj) in xs.iter().enumerate() {
        let t = j as f64 * h / 2.0;
        jets.push(grade_jets(sys, t, xj, 2, 2)?);
    }

    // fundamental matrix of the unperturbed variational equation at full
    // nodes; RK4 for the linear matrix system uses the half-node Jacobians
    let jac_at = |halfnode: usize| -> Vec<Vec<f64>> {
        let g0 = &jets[halfnode][0];
        let mut a = vec![vec![0.0; n]; n];
        for (i, row) in a.iter_mut().enumerate() {
            for (d, slot) in row.iter_mut().enumerate() {
                let mut e = vec![0u8; n];
                e[d] = 1;
                *slot = g0[i].coeff(&e);
            }
        }
        a
    };
    let mut ys: Vec<Vec<Vec<f64>>> = Vec::with_capacity(grid + 1);
    let mut y = identity(n);
    ys.push(y.clone());
    for j in 0..grid {
        let a0 = jac_at(2 * j);
        let am = jac_at(2 * j + 1);
        let a1 = jac_at(2 * j + 2);
        let k1 = mat_mul(&a0, &y);
        let k2 = mat_mul(&am, &mat_add_scaled(&y, &k1, h / 2.0));
        let k3 = mat_mul(&am, &mat_add_scaled(&y, &k2, h / 2.0));
        let k4 = mat_mul(&a1, &mat_add_scaled(&y, &k3, h));
        for r in 0..n {
            for c in 0..n {
                y[r][c] += h / 6.0 * (k1[r][c] + 2.0 * k2[r][c] + 2.0 * k3[r][c] + k4[r][c]);
            }
        }
        ys.push(y.clone());
    }

    // first order: y1(t) = Y(t) int Y^-1 F1
    let f1_nodes: Vec<Vec<f64>> = (0..=grid)
        .map(|j| jets[2 * j][1].iter().map(|jet| jet.value()).collect())
        .collect();
    let integrand1: Vec<Vec<f64>> = (0..=grid)
        .map(|j| solve_cols(&ys[j], &f1_nodes[j]))
        .collect::<Result<_>>()?;
    let w1 = cumulative_simpson(&integrand1, h);
    let y1_nodes: Vec<Vec<f64>> = (0..=grid).map(|j| mat_vec(&ys[j], &w1[j])).collect();

    // second order source: 2 (F2 + dF1[y1] + 1/2 d2F0[y1, y1])
    let mut integrand2 = Vec::with_capacity(grid + 1);
    for j in 0..=grid {
        let y1 = &y1_nodes[j];
        let node = &jets[2 * j];
        let mut b = vec![0.0; n];
        for i in 0..n {
            let f2 = node[2][i].value();
            let df1 = degree_part(&node[1][i], 1, y1);
            let d2f0 = 2.0 * degree_part(&node[0][i], 2, y1);
            b[i] = 2.0 * (f2 + df1 + 0.5 * d2f0);
        }
        integrand2.push(solve_cols(&ys[j], &b)?);
    }
    let w2 = cumulative_simpson(&integrand2, h);
    let y2 = mat_vec(&ys[grid], &w2[grid]);

    let y1 = y1_nodes[grid].clone();
    let y2_norm = y2.iter().map(|v| v / 2.0).collect();
    Ok([y1, y2_norm])
}

fn rk4_step<F>(f: &F, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(t, x)?;
    let k2 = f(t + h / 2.0, &add_scaled(x, &k1, h / 2.0))?;
    let k3 = f(t + h / 2.0, &add_scaled(x, &k2, h / 2.0))?;
    let k4 = f(t + h, &add_scaled(x, &k3, h))?;
    Ok((0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

fn add_scaled(x: &[f64], k: &[f64], s: f64) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + s * b).collect()
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik != 0.0 {
                for j in 0..n {
                    out[i][j] += aik * b[k][j];
                }
            }
        }
    }
    out
}

fn mat_add_scaled(a: &[Vec<f64>], b: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + s * y).collect())
        .collect()
}

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn solve_cols(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let am: Vec<Vec<f64>> = a.to_vec();
    let bm: Vec<Vec<f64>> = b.iter().map(|&v| vec![v]).collect();
    let sol = ring_solve(&am, &bm)?;
    Ok(sol.into_iter().map(|r| r[0]).collect())
}

/// Cumulative integral at every node from equally spaced samples. Even
/// prefixes use the composite Simpson rule; odd prefixes close the last
/// interval with the quadratic through the three nearest nodes.
fn cumulative_simpson(f: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let n = f[0].len();
    let m = f.len() - 1;
    let mut out = vec![vec![0.0; n]; m + 1];
    for j in 1..=m {
        if j % 2 == 0 {
            for c in 0..n {
                out[j][c] = out[j - 2][c]
                    + h / 3.0 * (f[j - 2][c] + 4.0 * f[j - 1][c] + f[j][c]);
            }
        } else {
            // j+1 exists whenever m is even and j < m; the final odd index
            // never occurs for even m
            for c in 0..n {
                out[j][c] = out[j - 1][c]
                    + h / 12.0 * (5.0 * f[j - 1][c] + 8.0 * f[j][c] - f[j + 1][c]);
            }
        }
    }
    out
}

/// Sum of the degree-`deg` jet terms contracted with displacement `v`.
fn degree_part(jet: &Jet<f64>, deg: usize, v: &[f64]) -> f64 {
    let shape = jet.shape().expect("constant jet has no degree parts");
    let mut acc = 0.0;
    for (pos, alpha) in shape.idx.iter().enumerate() {
        if alpha.iter().map(|&e| e as usize).sum::<usize>() != deg {
            continue;
        }
        let c = jet.coeffs()[pos];
        if c == 0.0 {
            continue;
        }
        let mut term = c;
        for (d, &e) in alpha.iter().enumerate() {
            for _ in 0..e {
                term *= v[d];
            }
        }
        acc += term;
    }
    acc
}

/// Graded fields `F_0 .. F_imax` together with their space jets at one point,
/// recovered by circle collocation in a complexified perturbation parameter.
/// Works for any analytic dependence, graded or chart-divided. Chart division
/// can place a pole close to zero, so the circle radius shrinks until two
/// successive radii reproduce the same coefficients.
fn grade_jets(
    sys: &SystemDef,
    t: f64,
    x: &[f64],
    imax: usize,
    order: usize,
) -> Result<Vec<Vec<Jet<f64>>>> {
    let mut r = 0.04;
    let mut prev: Option<Vec<Vec<Jet<f64>>>> = None;
    for _ in 0..6 {
        let cur = collocate(sys, t, x, imax, order, r)?;
        if let Some(p) = &prev {
            let mut ok = true;
            for (gp, gc) in p.iter().zip(&cur) {
                let scale = gc
                    .iter()
                    .flat_map(|j| j.coeffs().iter())
                    .fold(1.0_f64, |m, v| m.max(v.abs()));
                for (jp, jc) in gp.iter().zip(gc) {
                    for (a, b) in jp.coeffs().iter().zip(jc.coeffs()) {
                        if (a - b).abs() > 1e-7 * scale {
                            ok = false;
                        }
                    }
                }
            }
            if ok {
                return Ok(cur);
            }
        }
        prev = Some(cur);
        r /= 2.0;
    }
    Err(AvError::Numerics(format!(
        "perturbation-grade collocation did not converge at t = {t:.4}; \
         the field may not be analytic near zero perturbation"
    )))
}

fn collocate(
    sys: &SystemDef,
    t: f64,
    x: &[f64],
    imax: usize,
    order: usize,
    r: f64,
) -> Result<Vec<Vec<Jet<f64>>>> {
    const M: usize = 16;
    let n = sys.dim();
    let shape = jet_shape(n, order);
    let zjets: Vec<Jet<Complex64>> = x
        .iter()
        .enumerate()
        .map(|(j, &v)| Jet::variable(&shape, Complex64::new(v, 0.0), j))
        .collect();

    let mut samples = Vec::with_capacity(M);
    for m in 0..M {
        let th = 2.0 * std::f64::consts::PI * m as f64 / M as f64;
        let epsm = Complex64::from_polar(r, th);
        samples.push(sys.eval_rhs(t, &zjets, &Jet::constant(epsm))?);
    }

    let len = shape.idx.len();
    let mut out = Vec::with_capacity(imax + 1);
    for i in 0..=imax {
        let mut comps = Vec::with_capacity(n);
        for c in 0..n {
            let mut coeffs = vec![0.0; len];
            for (p, slot) in coeffs.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (m, sample) in samples.iter().enumerate() {
                    let th = -2.0 * std::f64::consts::PI * (m * i) as f64 / M as f64;
                    acc += sample[c].coeffs()[p] * Complex64::from_polar(1.0, th);
                }
                *slot = acc.re / (M as f64 * r.powi(i as i32));
            }
            comps.push(Jet::from_coeffs(shape.clone(), coeffs));
        }
        out.push(comps);
    }
    Ok(out)
}
