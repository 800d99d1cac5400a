//! Reduction of the period-map displacement to a bifurcation problem on the
//! manifold.
//!
//! Around a manifold point the displacement is expanded jointly in the
//! manifold coordinates and a curve parameter carrying the perturbation
//! stages. Transverse corrections are solved order by order so the
//! displacement stays tangent to the manifold along the corrected curve;
//! what remains on the tangent side is the sequence of bifurcation maps
//! whose simple zeros continue to genuine periodic orbits. All the chain
//! rule bookkeeping funnels through [`eval_jet_poly`], evaluating a space
//! jet at ring-valued offsets.

use crate::averaging::displacement_series;
use crate::eps_series::EpsSeries;
use crate::flow::{flow_eps_jet, FlowJet, OdeOpts};
use crate::jets::{eval_jet_poly, faa_di_bruno_sum, jet_shape, Jet};
use crate::scalar::{ring_solve, Ring, Scalar};
use crate::sysdsl::SystemDef;
use crate::{AvError, Result};

/// Relative size below which an averaged order counts as identically zero.
pub const LEADING_ORDER_RTOL: f64 = 1e-9;
/// Newton convergence tolerance (residual or step, relative to point size).
pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: usize = 50;
/// Roots closer than this are the same root.
pub const ROOT_DEDUP_TOL: f64 = 1e-6;
/// Highest displacement order probed when locating the leading index.
pub const MAX_LEADING_PROBE: usize = 3;
const GRID_PER_DIM: usize = 5;

/// Joint expansion of the corrected displacement at a manifold point.
///
/// `f[i-1]` holds the i-th bifurcation map as jets in the manifold
/// coordinates (order `worder - i`); `gammas[i-1]` holds the transverse
/// correction of stage i in the same form. For a full-dimensional manifold
/// the corrections are empty and the bifurcation maps are the displacement
/// orders themselves.
pub struct Expansion {
    pub alpha0: Vec<f64>,
    pub z0: Vec<f64>,
    pub m: usize,
    pub n: usize,
    pub kmax: usize,
    pub worder: usize,
    pub f: Vec<Vec<Jet<f64>>>,
    pub gammas: Vec<Vec<Jet<f64>>>,
    /// manifold inclusion jets at `alpha0`, order `worder`
    pub chart: Vec<Jet<f64>>,
    /// period map expanded at `z0` (space jets of order `worder`)
    pub flow: FlowJet,
}

pub fn expand_at(
    sys: &SystemDef,
    alpha0: &[f64],
    kmax: usize,
    worder: usize,
    opts: &OdeOpts,
) -> Result<Expansion> {
    assert!(kmax >= 1 && worder >= kmax);
    let m = sys.manifold_dim();
    let n = sys.dim();
    let z0 = sys.chart_point(alpha0)?;

    let flow = flow_eps_jet(sys, &z0, kmax, worder, opts)?;
    let sshape = jet_shape(n, worder);
    let mut w: Vec<Vec<Jet<f64>>> = (0..=kmax).map(|q| flow.order_jets(q)).collect();
    for c in 0..n {
        // displacement rather than map at order zero
        w[0][c] = w[0][c].sub(&Jet::variable(&sshape, z0[c], c));
    }

    let chart = sys.chart_jets(alpha0, worder)?;
    let fshape = jet_shape(m + 1, worder);
    let mut offsets: Vec<Jet<f64>> = (0..n)
        .map(|c| {
            let d = chart[c].sub(&Jet::constant(z0[c]));
            d.embed_last(&fshape, 0)
        })
        .collect();

    // transverse response blocks as functions of the manifold point, from
    // the curve-free part of the offsets
    let mut lever = Vec::new();
    if n > m {
        let tfree = offsets.clone();
        for i in 0..n {
            let mut row = Vec::with_capacity(n - m);
            for j in m..n {
                let d = w[0][i].deriv(j);
                row.push(eval_jet_poly(&d, &tfree));
            }
            lever.push(row);
        }
    }

    let tvar: Jet<f64> = Jet::variable(&fshape, 0.0, m);
    let mut f = Vec::with_capacity(kmax);
    let mut gammas = Vec::with_capacity(kmax);
    for stage in 1..=kmax {
        let sub = worder - stage;
        let mut d_i = Vec::with_capacity(n);
        for c in 0..n {
            let mut acc = Jet::zeroed(&fshape);
            for (q, wq) in w.iter().enumerate() {
                let comp = eval_jet_poly(&wq[c], &offsets);
                acc = acc.add(&comp.mul(&tvar.powi(q as i64)));
            }
            d_i.push(acc.slice_last(stage));
        }

        if n > m {
            let delta: Vec<Vec<Jet<f64>>> = (m..n)
                .map(|i| {
                    (0..n - m)
                        .map(|j| lever[i][j].slice_last(0).truncated(sub))
                        .collect()
                })
                .collect();
            let rhs: Vec<Vec<Jet<f64>>> = (m..n).map(|i| vec![d_i[i].neg()]).collect();
            let g = ring_solve(&delta, &rhs).map_err(|_| {
                AvError::Hypothesis(
                    "transverse response block is singular at the expansion point".into(),
                )
            })?;
            let gi: Vec<Jet<f64>> = g.into_iter().map(|mut r| r.pop().unwrap()).collect();

            let mut fi = Vec::with_capacity(m);
            for c in 0..m {
                let mut acc = d_i[c].clone();
                for (j, gj) in gi.iter().enumerate() {
                    acc = acc.add(&lever[c][j].slice_last(0).truncated(sub).mul(gj));
                }
                fi.push(acc);
            }
            for (j, gj) in gi.iter().enumerate() {
                offsets[m + j] = offsets[m + j].add(&gj.embed_last(&fshape, stage));
            }
            f.push(fi);
            gammas.push(gi);
        } else {
            f.push(d_i);
            gammas.push(Vec::new());
        }
    }

    Ok(Expansion {
        alpha0: alpha0.to_vec(),
        z0,
        m,
        n,
        kmax,
        worder,
        f,
        gammas,
        chart,
        flow,
    })
}

/// Values of the bifurcation maps `f_1 .. f_kmax` at one manifold point.
/// Full-dimensional manifolds shortcut to the plain displacement orders.
pub fn bifurcation_values(
    sys: &SystemDef,
    alpha: &[f64],
    kmax: usize,
    opts: &OdeOpts,
) -> Result<Vec<Vec<f64>>> {
    let m = sys.manifold_dim();
    if m == sys.dim() {
        let z = sys.chart_point(alpha)?;
        let d = displacement_series(sys, &z, kmax, opts)?;
        return Ok((1..=kmax)
            .map(|i| d.iter().map(|s| s.coeff(i)).collect())
            .collect());
    }
    let exp = expand_at(sys, alpha, kmax, kmax, opts)?;
    Ok(exp
        .f
        .iter()
        .map(|fi| fi.iter().map(|j| j.value()).collect())
        .collect())
}

#[derive(Clone, Debug)]
pub struct Root {
    pub alpha: Vec<f64>,
    /// index of the first bifurcation map that does not vanish identically
    pub leading: usize,
}

/// Locates simple zeros of the leading bifurcation map, either polishing a
/// user guess or scanning the manifold box. The leading index is probed
/// first: orders that vanish at every probe point within tolerance are
/// skipped.
pub fn find_zeros(sys: &SystemDef, guess: Option<&[f64]>, opts: &OdeOpts) -> Result<Vec<Root>> {
    let m = sys.manifold_dim();
    let boxes: Option<Vec<(f64, f64)>> = sys.manifold.as_ref().map(|mf| mf.boxes.clone());

    // the guess may already sit on the zero, where every order vanishes;
    // leading-index detection needs generic points, so offset probes are
    // added around it
    let probes: Vec<Vec<f64>> = match (guess, &boxes) {
        (Some(g), _) => {
            assert_eq!(g.len(), m);
            let h = 0.05 * (1.0 + g.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
            let mut p = vec![g.to_vec()];
            for d in 0..m {
                let mut q = g.to_vec();
                q[d] += h;
                if let Some(b) = &boxes {
                    if q[d] > b[d].1 {
                        q[d] = g[d] - h;
                    }
                }
                p.push(q);
            }
            p
        }
        (None, Some(b)) => grid_points(b, GRID_PER_DIM),
        (None, None) => {
            return Err(AvError::Numerics(
                "no manifold box to scan; provide a starting guess".into(),
            ))
        }
    };

    let mut leading = None;
    let mut probe_vals: Vec<f64> = Vec::new();
    'orders: for r in 1..=MAX_LEADING_PROBE {
        let mut vals = Vec::with_capacity(probes.len());
        for p in &probes {
            let fv = bifurcation_values(sys, p, r, opts)?;
            let scale = 1.0 + p.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let norm = fv[r - 1].iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            vals.push(norm / scale);
        }
        if vals.iter().any(|&v| v > LEADING_ORDER_RTOL) {
            leading = Some(r);
            probe_vals = vals;
            break 'orders;
        }
    }
    let r = leading.ok_or_else(|| {
        AvError::Numerics(format!(
            "bifurcation maps through order {MAX_LEADING_PROBE} vanish at every probe \
             point; the branch structure is degenerate at this resolution"
        ))
    })?;

    let starts: Vec<Vec<f64>> = match guess {
        Some(g) => vec![g.to_vec()],
        None => grid_minima(&probes, &probe_vals, m, GRID_PER_DIM),
    };

    let mut roots: Vec<Vec<f64>> = Vec::new();
    for s in &starts {
        let Some(alpha) = newton_polish(sys, s, r, boxes.as_deref(), opts)? else {
            continue;
        };
        if let Some(b) = &boxes {
            let inside = alpha
                .iter()
                .zip(b)
                .all(|(v, &(lo, hi))| *v >= lo - 1e-9 * (hi - lo) && *v <= hi + 1e-9 * (hi - lo));
            if !inside {
                continue;
            }
        }
        if !roots
            .iter()
            .any(|rt| rt.iter().zip(&alpha).all(|(a, b)| (a - b).abs() < ROOT_DEDUP_TOL))
        {
            roots.push(alpha);
        }
    }
    if roots.is_empty() {
        return Err(AvError::Numerics(
            "no simple zero of the leading bifurcation map was found".into(),
        ));
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(roots.into_iter().map(|alpha| Root { alpha, leading: r }).collect())
}

fn grid_points(boxes: &[(f64, f64)], per_dim: usize) -> Vec<Vec<f64>> {
    let m = boxes.len();
    let mut out = Vec::new();
    let mut idx = vec![0usize; m];
    loop {
        out.push(
            idx.iter()
                .zip(boxes)
                .map(|(&i, &(lo, hi))| lo + (hi - lo) * i as f64 / (per_dim - 1) as f64)
                .collect(),
        );
        let mut d = 0;
        loop {
            if d == m {
                return out;
            }
            idx[d] += 1;
            if idx[d] < per_dim {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Grid nodes that do not exceed any axis neighbor; cheap zero candidates.
fn grid_minima(
    points: &[Vec<f64>],
    vals: &[f64],
    m: usize,
    per_dim: usize,
) -> Vec<Vec<f64>> {
    let strides: Vec<usize> = (0..m).map(|d| per_dim.pow(d as u32)).collect();
    let mut out = Vec::new();
    for (flat, p) in points.iter().enumerate() {
        let mut minimal = true;
        for d in 0..m {
            let coord = flat / strides[d] % per_dim;
            if coord > 0 && vals[flat - strides[d]] < vals[flat] {
                minimal = false;
            }
            if coord + 1 < per_dim && vals[flat + strides[d]] < vals[flat] {
                minimal = false;
            }
        }
        if minimal {
            out.push(p.clone());
        }
    }
    out
}

fn newton_polish(
    sys: &SystemDef,
    start: &[f64],
    r: usize,
    boxes: Option<&[(f64, f64)]>,
    opts: &OdeOpts,
) -> Result<Option<Vec<f64>>> {
    let m = start.len();
    let far_out = |a: &[f64]| -> bool {
        match boxes {
            None => false,
            Some(b) => a.iter().zip(b).any(|(v, &(lo, hi))| {
                let span = hi - lo;
                *v < lo - 0.25 * span || *v > hi + 0.25 * span
            }),
        }
    };

    // candidates near chart degeneracies must fail fast, not grind
    let probe_opts = OdeOpts { max_steps: 50_000, ..*opts };
    let residual = |a: &[f64]| -> Result<Vec<f64>> {
        Ok(bifurcation_values(sys, a, r, &probe_opts)?.pop().unwrap())
    };

    let norm = |v: &[f64]| v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    let mut a = start.to_vec();
    let mut fval = residual(&a)?;

    for _ in 0..NEWTON_MAX_ITERS {
        let scale = 1.0 + norm(&a);
        if norm(&fval) < NEWTON_TOL * scale {
            return Ok(Some(a));
        }
        let exp = expand_at(sys, &a, r, r + 1, opts)?;
        let mut jmat = vec![vec![0.0; m]; m];
        for (c, jet) in exp.f[r - 1].iter().enumerate() {
            for d in 0..m {
                let mut e = vec![0u8; m];
                e[d] = 1;
                jmat[c][d] = jet.coeff(&e);
            }
        }
        let rhs: Vec<Vec<f64>> = fval.iter().map(|&v| vec![-v]).collect();
        let Ok(delta) = ring_solve(&jmat, &rhs) else {
            return Ok(None); // singular Jacobian: not a simple zero
        };
        let delta: Vec<f64> = delta.into_iter().map(|row| row[0]).collect();
        if norm(&delta) < NEWTON_TOL * scale {
            return Ok(Some(a));
        }

        let mut lambda = 1.0;
        loop {
            let cand: Vec<f64> = a.iter().zip(&delta).map(|(x, d)| x + lambda * d).collect();
            if far_out(&cand) {
                if lambda < 1.0 / 64.0 {
                    return Ok(None);
                }
                lambda /= 2.0;
                continue;
            }
            // a candidate the flow cannot evaluate is just a step too far
            match residual(&cand) {
                Ok(fc) if norm(&fc) < norm(&fval) || lambda < 1.0 / 64.0 => {
                    a = cand;
                    fval = fc;
                    break;
                }
                Err(_) if lambda < 1.0 / 64.0 => return Ok(None),
                _ => lambda /= 2.0,
            }
        }
        if far_out(&a) {
            return Ok(None);
        }
    }
    Ok(None)
}

/// Perturbation-order coefficients of the zero branch through a simple zero
/// of the r-th bifurcation map, by implicit staged solves against the
/// Jacobian at the root.
pub fn branch_alpha(exp: &Expansion, r: usize, mu: usize) -> Result<Vec<Vec<f64>>> {
    assert!(exp.kmax >= r + mu, "expansion carries too few stages for this branch order");
    let m = exp.m;

    let mut jmat = vec![vec![0.0; m]; m];
    for (c, jet) in exp.f[r - 1].iter().enumerate() {
        for d in 0..m {
            let mut e = vec![0u8; m];
            e[d] = 1;
            jmat[c][d] = jet.coeff(&e);
        }
    }

    let zshape = jet_shape(m, exp.worder);
    let mut stages: Vec<Vec<Jet<f64>>> = vec![vec![Jet::zeroed(&zshape); m]];
    for fi in &exp.f {
        stages.push(fi.clone());
    }

    let mut curve: Vec<Vec<f64>> = Vec::with_capacity(mu);
    for j in 1..=mu {
        let rho = faa_di_bruno_sum(&stages, &curve, r + j);
        let rhs: Vec<Vec<f64>> = rho.iter().map(|&v| vec![-v]).collect();
        let sol = ring_solve(&jmat, &rhs).map_err(|_| {
            AvError::Numerics(
                "bifurcation Jacobian is singular along the branch; the zero is not simple"
                    .into(),
            )
        })?;
        curve.push(sol.into_iter().map(|row| row[0]).collect());
    }
    Ok(curve)
}

/// Start point of the continued periodic orbit as a perturbation series: the
/// manifold inclusion composed with the branch curve plus the staged
/// transverse corrections.
pub fn initial_condition_series(exp: &Expansion, curve: &[Vec<f64>]) -> Vec<EpsSeries<f64>> {
    let order = exp.kmax;
    let dalpha: Vec<EpsSeries<f64>> = (0..exp.m)
        .map(|d| {
            let mut c = vec![0.0; order + 1];
            for (p, al) in curve.iter().enumerate() {
                if p + 1 <= order {
                    c[p + 1] = al[d];
                }
            }
            EpsSeries::new(c)
        })
        .collect();

    let mut z = Vec::with_capacity(exp.n);
    for c in 0..exp.n {
        let mut acc: EpsSeries<f64> = eval_jet_poly(&exp.chart[c], &dalpha).densified(order);
        if c >= exp.m {
            for (i, g) in exp.gammas.iter().enumerate() {
                let comp: EpsSeries<f64> = eval_jet_poly(&g[c - exp.m], &dalpha).densified(order);
                acc = acc.add(&comp.shifted_up(i + 1));
            }
        }
        z.push(acc);
    }
    z
}

/// Derivative of the period map along a perturbation-series start point.
#[derive(Clone, Debug)]
pub struct MapJacobian {
    /// full derivative as a matrix of perturbation series
    pub full: Vec<Vec<EpsSeries<f64>>>,
    /// contribution of the unperturbed map alone, composed along the branch
    pub zero_order: Vec<Vec<EpsSeries<f64>>>,
    /// unperturbed derivative at the expansion point
    pub y00: Vec<Vec<f64>>,
}

pub fn map_jacobian_along(exp: &Expansion, z: &[EpsSeries<f64>]) -> MapJacobian {
    let n = exp.n;
    let order = z[0].order();
    let dz: Vec<EpsSeries<f64>> = z
        .iter()
        .zip(&exp.z0)
        .map(|(s, &z0)| {
            let mut c = s.coeffs().to_vec();
            debug_assert!((c[0] - z0).abs() < 1e-12 * (1.0 + z0.abs()));
            c[0] = 0.0;
            EpsSeries::new(c)
        })
        .collect();

    let mut full = vec![vec![EpsSeries::zeros(order); n]; n];
    let mut zero_order = vec![vec![EpsSeries::zeros(order); n]; n];
    let mut y00 = vec![vec![0.0; n]; n];
    for q in 0..=exp.kmax {
        let jets = exp.flow.order_jets(q);
        for (i, jet) in jets.iter().enumerate() {
            for j in 0..n {
                let d = jet.deriv(j);
                let composed: EpsSeries<f64> = eval_jet_poly(&d, &dz).densified(order);
                if q == 0 {
                    zero_order[i][j] = composed.clone();
                    y00[i][j] = d.value();
                }
                full[i][j] = full[i][j].add(&composed.shifted_up(q));
            }
        }
    }
    MapJacobian { full, zero_order, y00 }
}
