//! Stability classification of the continued periodic orbits.
//!
//! The input is the period-map derivative along the branch as a perturbation
//! series (a [`MapJacobian`]). In the full-dimensional case the derivative is
//! `I + A(eps)` and the multipliers branch off the eigenvalues of the leading
//! coefficient of `A`. In the reduced case the unperturbed monodromy is
//! conjugated into block-diagonal form first; the multipliers then split
//! into a group near the unit circle, governed by a pencil determinant in
//! the multiplier variable, and a group near 1, governed by a rescaled
//! characteristic polynomial. Critical eigenvalues on the boundary are
//! continued as series branches and the first decisive coefficient settles
//! the verdict.

use crate::averaging::TransverseBlocks;
use crate::eps_series::EpsSeries;
use crate::poly::{LocPoly, Poly};
use crate::reduction::MapJacobian;
use crate::scalar::{ring_det, ring_inv, ring_mat_mul, Ring};
use crate::{AvError, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;

/// Relative size below which a series coefficient counts as zero.
pub const LEADING_RTOL: f64 = 1e-9;
/// Distance to the boundary below which an eigenvalue is treated as critical.
pub const CRITICAL_TOL: f64 = 1e-6;
/// Minimal separation for branching off a critical eigenvalue.
pub const SIMPLE_GAP: f64 = 1e-6;
/// Residual allowed for terms that vanish identically in exact arithmetic.
pub const VANISH_TOL: f64 = 1e-8;
/// Allowed mismatch between the rescaled pencil determinant and the
/// characteristic polynomial of the leading coefficient.
pub const FACTOR_TOL: f64 = 1e-8;
/// Residual allowed for the block-diagonalization of the monodromy.
pub const DIAG_RESIDUAL_TOL: f64 = 1e-10;
/// Lower bound on the polynomial derivative at a branch point.
pub const HENSEL_SIMPLE_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Stable => write!(f, "Stable"),
            Verdict::Unstable => write!(f, "Unstable"),
            Verdict::Inconclusive => write!(f, "Inconclusive"),
        }
    }
}

/// Series continuation of one critical eigenvalue.
#[derive(Clone, Debug)]
pub struct BranchInfo {
    pub base: Complex64,
    /// branch coefficients from order 1
    pub coeffs: Vec<Complex64>,
    /// decision sequence from order 1: real parts for exponent branches,
    /// squared-modulus defect for multiplier branches
    pub indicator: Vec<f64>,
    /// order of the first decisive indicator coefficient
    pub decided_at: Option<usize>,
    /// whether the decisive coefficient points to the stable side
    pub stable_side: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub verdict: Verdict,
    pub ell: usize,
    pub reduced: bool,
    /// unperturbed reduced monodromy spectrum (reduced case only)
    pub map_spectrum: Vec<Complex64>,
    /// spectrum of the leading derivative coefficient
    pub field_spectrum: Vec<Complex64>,
    pub multiplier_branches: Vec<BranchInfo>,
    pub exponent_branches: Vec<BranchInfo>,
    pub notes: Vec<String>,
}

type SMat<T> = Vec<Vec<EpsSeries<T>>>;

fn eigenvalues(mat: &[Vec<f64>]) -> Vec<Complex64> {
    let n = mat.len();
    let flat: Vec<f64> = mat.iter().flat_map(|r| r.iter().copied()).collect();
    DMatrix::from_row_slice(n, n, &flat)
        .complex_eigenvalues()
        .iter()
        .map(|c| Complex64::new(c.re, c.im))
        .collect()
}

fn smat_scale<T: Ring>(m: &SMat<T>) -> f64 {
    let mut s: f64 = 1.0;
    for row in m {
        for e in row {
            s = s.max(e.max_abs());
        }
    }
    s
}

fn smat_coeff(m: &SMat<f64>, q: usize) -> Vec<Vec<f64>> {
    m.iter().map(|row| row.iter().map(|e| e.coeff(q)).collect()).collect()
}

/// First order with any entry above the relative threshold.
fn smat_leading(m: &SMat<f64>, from: usize, order: usize) -> Option<usize> {
    let scale = smat_scale(m);
    for q in from..=order {
        let big = m
            .iter()
            .any(|row| row.iter().any(|e| e.coeff(q).abs() > LEADING_RTOL * scale));
        if big {
            return Some(q);
        }
    }
    None
}

fn lift_const<T: Ring>(mat: &[Vec<T>]) -> SMat<T> {
    mat.iter()
        .map(|row| row.iter().map(|v| EpsSeries::constant(v.clone())).collect())
        .collect()
}

fn complexify(m: &SMat<f64>) -> SMat<Complex64> {
    m.iter()
        .map(|row| row.iter().map(|e| e.map(|v| Complex64::new(*v, 0.0))).collect())
        .collect()
}

fn zero_constant_checked<T: Ring>(m: &mut SMat<T>, scale: f64, what: &str) -> Result<f64> {
    let order = m[0][0].order();
    let mut worst: f64 = 0.0;
    for row in m.iter() {
        for e in row {
            worst = worst.max(e.coeff(0).max_abs());
        }
    }
    if worst > VANISH_TOL * scale {
        return Err(AvError::Numerics(format!(
            "{what} should vanish at eps = 0 but has relative size {:.3e}",
            worst / scale
        )));
    }
    for row in m.iter_mut() {
        for e in row.iter_mut() {
            let mut c = e.densified(order).coeffs().to_vec();
            c[0] = T::zero();
            *e = EpsSeries::new(c);
        }
    }
    Ok(worst / scale)
}

/// Continues a simple root `base` of `p(x, eps) = 0` to the requested order.
/// Returns the branch coefficients from order 1.
pub fn hensel_branch(
    p: &Poly<EpsSeries<Complex64>>,
    base: Complex64,
    orders: usize,
) -> Result<Vec<Complex64>> {
    let shifted = p.shift_variable(&EpsSeries::constant(base));
    let d0 = shifted.coeff(1).coeff(0);
    let scale = p.coeffs.iter().fold(1.0_f64, |a, c| a.max(c.max_abs()));
    if d0.norm() < HENSEL_SIMPLE_TOL * scale {
        return Err(AvError::Numerics(format!(
            "eigenvalue branch at {base} is not simple (derivative {:.3e} of scale {:.3e})",
            d0.norm(),
            scale
        )));
    }
    let mut v = EpsSeries::<Complex64>::zeros(orders);
    let mut out = Vec::with_capacity(orders);
    for r in 1..=orders {
        let res = shifted.eval(&v).densified(orders);
        let vr = -res.coeff(r) / d0;
        out.push(vr);
        let mut c = v.coeffs().to_vec();
        c[r] = c[r] + vr;
        v = EpsSeries::new(c);
    }
    Ok(out)
}

/// First decisive indicator coefficient and its side.
fn decide(indicator: &[f64]) -> (Option<usize>, Option<bool>) {
    let scale = 1.0 + indicator.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    for (j, v) in indicator.iter().enumerate() {
        if v.abs() > LEADING_RTOL * scale {
            return (Some(j + 1), Some(*v < 0.0));
        }
    }
    (None, None)
}

// ---------------------------------------------------------------------------
// Full-dimensional case
// ---------------------------------------------------------------------------

/// Classifies a branch whose manifold fills the whole space. The period map
/// derivative must be `I + A(eps)` with `A` vanishing at `eps = 0`; the
/// verdict follows the eigenvalues of the leading coefficient of `A`, with
/// critical ones continued to order `mu`.
pub fn classify_direct(mj: &MapJacobian, mu: usize) -> Result<StabilityReport> {
    let n = mj.full.len();
    let order = mj.full[0][0].order();
    let mut notes = Vec::new();

    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            if (mj.y00[i][j] - want).abs() > 1e-7 {
                return Err(AvError::Hypothesis(
                    "unperturbed period map is not the identity; the system is not in \
                     standard form on a full-dimensional manifold"
                        .into(),
                ));
            }
        }
    }

    let mut a: SMat<f64> = (0..n)
        .map(|i| (0..n).map(|j| mj.full[i][j].sub(&mj.zero_order[i][j])).collect())
        .collect();
    let gscale = smat_scale(&a);
    let resid = zero_constant_checked(&mut a, gscale, "perturbation part of the derivative")?;
    notes.push(format!("derivative constant-term residual {resid:.3e}"));

    let ell = smat_leading(&a, 1, order).ok_or_else(|| {
        AvError::Numerics(
            "derivative perturbation vanishes through every computed order".into(),
        )
    })?;
    let shifted: SMat<f64> = a
        .iter()
        .map(|row| {
            row.iter()
                .map(|e| EpsSeries::new(e.densified(order).coeffs()[ell..].to_vec()))
                .collect()
        })
        .collect();
    let a_ell = smat_coeff(&shifted, 0);
    let field_spectrum = eigenvalues(&a_ell);
    let escale = field_spectrum.iter().fold(1.0_f64, |m, l| m.max(l.norm()));

    let mut unstable = false;
    let mut inconclusive = false;
    let mut branches = Vec::new();
    let mut charpoly: Option<Poly<EpsSeries<Complex64>>> = None;
    let sc = complexify(&shifted);

    for (idx, lam) in field_spectrum.iter().enumerate() {
        if lam.re > CRITICAL_TOL * escale {
            unstable = true;
            notes.push(format!("leading eigenvalue {lam} lies in the right half-plane"));
            continue;
        }
        if lam.re < -CRITICAL_TOL * escale {
            continue;
        }
        let gap = field_spectrum
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .fold(f64::INFINITY, |g, (_, o)| g.min((lam - o).norm()));
        if gap < SIMPLE_GAP * escale {
            inconclusive = true;
            notes.push(format!(
                "critical eigenvalue {lam} is not simple (gap {gap:.3e}); cannot branch"
            ));
            continue;
        }
        let p = charpoly.get_or_insert_with(|| {
            let mat: Vec<Vec<Poly<EpsSeries<Complex64>>>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            if i == j {
                                Poly::new(vec![
                                    sc[i][j].clone(),
                                    EpsSeries::constant(Complex64::new(-1.0, 0.0)),
                                ])
                            } else {
                                Poly::constant(sc[i][j].clone())
                            }
                        })
                        .collect()
                })
                .collect();
            ring_det(&mat)
        });
        let avail = order - ell;
        let mu_eff = mu.min(avail);
        if mu_eff < mu {
            notes.push(format!(
                "branch order clipped to {mu_eff}: only {avail} series orders available"
            ));
        }
        let coeffs = hensel_branch(p, *lam, mu_eff)?;
        let indicator: Vec<f64> = coeffs.iter().map(|c| c.re).collect();
        let (decided_at, stable_side) = decide(&indicator);
        match stable_side {
            Some(true) => {}
            Some(false) => {
                unstable = true;
                notes.push(format!("branch at {lam} moves into the right half-plane"));
            }
            None => {
                inconclusive = true;
                notes.push(format!(
                    "branch at {lam} stays flat through order {mu_eff}"
                ));
            }
        }
        branches.push(BranchInfo { base: *lam, coeffs, indicator, decided_at, stable_side });
    }

    let verdict = if unstable {
        Verdict::Unstable
    } else if inconclusive {
        Verdict::Inconclusive
    } else {
        Verdict::Stable
    };
    Ok(StabilityReport {
        verdict,
        ell,
        reduced: false,
        map_spectrum: Vec::new(),
        field_spectrum,
        multiplier_branches: Vec::new(),
        exponent_branches: branches,
        notes,
    })
}

// ---------------------------------------------------------------------------
// Reduced case
// ---------------------------------------------------------------------------

/// Conjugated and split derivative data for a branch on a lower-dimensional
/// manifold, ready for the two pencil polynomials.
pub struct ReducedSystem {
    pub m: usize,
    pub ell: usize,
    /// unperturbed reduced monodromy `I + Delta - dBeta Gamma`
    pub n0: Vec<Vec<f64>>,
    /// leading coefficient of the reduced derivative series
    pub m_ell: Vec<Vec<f64>>,
    pub n0_spectrum: Vec<Complex64>,
    pub ml_spectrum: Vec<Complex64>,
    pub notes: Vec<String>,
    order: usize,
    a: SMat<Complex64>,
    b: SMat<Complex64>,
    c: SMat<Complex64>,
    d: SMat<Complex64>,
    s_inv: Vec<Vec<Complex64>>,
}

/// Conjugates the derivative series by the block-diagonalizer of the
/// unperturbed monodromy and splits it into the four interaction blocks.
/// Checks the spectral hypotheses on the reduced monodromy along the way.
pub fn reduce_blocks(blocks: &TransverseBlocks, mj: &MapJacobian) -> Result<ReducedSystem> {
    let m = blocks.m;
    let n = mj.full.len();
    let nm = n - m;
    assert!(nm > 0);
    let order = mj.full[0][0].order();
    let mut notes = Vec::new();

    let s_star_f = {
        let bg = ring_mat_mul(&blocks.dbeta, &blocks.gamma);
        (0..nm)
            .map(|i| (0..nm).map(|j| blocks.delta[i][j] - bg[i][j]).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    };
    let s_inv_f = ring_inv(&s_star_f).map_err(|_| {
        AvError::Hypothesis(
            "transverse pencil (Delta - dBeta Gamma) at the root is singular".into(),
        )
    })?;
    let mut n0 = s_star_f.clone();
    for i in 0..nm {
        n0[i][i] += 1.0;
    }
    let n0_spectrum = eigenvalues(&n0);

    // spectral sanity of the reduced monodromy: no multiplier may sit at 1,
    // and unit-circle multipliers must be pairwise separated
    for w in &n0_spectrum {
        if (w - Complex64::new(1.0, 0.0)).norm() < CRITICAL_TOL {
            return Err(AvError::Hypothesis(
                "1 is a multiplier of the reduced monodromy".into(),
            ));
        }
    }
    let on_circle: Vec<&Complex64> = n0_spectrum
        .iter()
        .filter(|w| (w.norm() - 1.0).abs() <= CRITICAL_TOL)
        .collect();
    for i in 0..on_circle.len() {
        for j in i + 1..on_circle.len() {
            if (on_circle[i] - on_circle[j]).norm() < SIMPLE_GAP {
                return Err(AvError::Hypothesis(
                    "repeated unit-circle multiplier of the reduced monodromy".into(),
                ));
            }
        }
    }

    // conjugation matrix: rows of the top block annihilate the transverse
    // response column [Gamma; Delta]
    let gs = ring_mat_mul(&blocks.gamma, &s_inv_f);
    let gsb = ring_mat_mul(&gs, &blocks.dbeta);
    let mut lmat = vec![vec![0.0; n]; n];
    for i in 0..m {
        for j in 0..m {
            lmat[i][j] = gsb[i][j] + if i == j { 1.0 } else { 0.0 };
        }
        for j in 0..nm {
            lmat[i][m + j] = -gs[i][j];
        }
    }
    for i in 0..nm {
        for j in 0..m {
            lmat[m + i][j] = -blocks.dbeta[i][j];
        }
        lmat[m + i][m + i] = 1.0;
    }
    let linv = ring_inv(&lmat)
        .map_err(|_| AvError::Numerics("conjugation matrix is singular".into()))?;

    // diagonalization residual: L Y0 L^-1 must be diag(I, N0)
    let conj0 = ring_mat_mul(&ring_mat_mul(&lmat, &blocks.y0t), &linv);
    let mut worst: f64 = 0.0;
    let y0scale = blocks.y0t.iter().flatten().fold(1.0_f64, |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in 0..n {
            let want = if i < m || j < m {
                if i == j { 1.0 } else { 0.0 }
            } else {
                n0[i - m][j - m]
            };
            worst = worst.max((conj0[i][j] - want).abs());
        }
    }
    if worst > DIAG_RESIDUAL_TOL * y0scale {
        return Err(AvError::Numerics(format!(
            "monodromy block-diagonalization residual {worst:.3e} exceeds tolerance"
        )));
    }
    notes.push(format!("block-diagonalization residual {worst:.3e}"));

    // conjugated derivative deviation, split into blocks
    let dev: SMat<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut c = mj.full[i][j].densified(order).coeffs().to_vec();
                    c[0] -= blocks.y0t[i][j];
                    EpsSeries::new(c)
                })
                .collect()
        })
        .collect();
    let mut conj = ring_mat_mul(&ring_mat_mul(&lift_const(&lmat), &dev), &lift_const(&linv));
    let gscale = smat_scale(&conj);
    let resid = zero_constant_checked(&mut conj, gscale, "conjugated derivative deviation")?;
    notes.push(format!("conjugated block constant-term residual {resid:.3e}"));

    let cc = complexify(&conj);
    let a: SMat<Complex64> = (0..m).map(|i| cc[i][..m].to_vec()).collect();
    let b: SMat<Complex64> = (0..m).map(|i| cc[i][m..].to_vec()).collect();
    let c: SMat<Complex64> = (0..nm).map(|i| cc[m + i][..m].to_vec()).collect();
    let d: SMat<Complex64> = (0..nm).map(|i| cc[m + i][m..].to_vec()).collect();

    let s_inv: Vec<Vec<Complex64>> = s_inv_f
        .iter()
        .map(|r| r.iter().map(|v| Complex64::new(*v, 0.0)).collect())
        .collect();

    // reduced derivative M(eps) = A - B (S + D)^-1 C by geometric expansion;
    // D vanishes at eps = 0 so the expansion terminates at the series order
    let e_mat = ring_mat_mul(&lift_const(&s_inv), &d);
    let mut inv_sd: SMat<Complex64> = lift_const(&s_inv);
    let mut term: SMat<Complex64> = (0..nm)
        .map(|i| {
            (0..nm)
                .map(|j| {
                    EpsSeries::constant(if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) })
                })
                .collect()
        })
        .collect();
    for _ in 1..=order {
        term = ring_mat_mul(&term, &e_mat);
        for row in term.iter_mut() {
            for e in row.iter_mut() {
                *e = e.neg();
            }
        }
        let add = ring_mat_mul(&term, &lift_const(&s_inv));
        for i in 0..nm {
            for j in 0..nm {
                inv_sd[i][j] = inv_sd[i][j].add(&add[i][j]);
            }
        }
    }
    let bc = ring_mat_mul(&ring_mat_mul(&b, &inv_sd), &c);
    let m_eps: SMat<Complex64> = (0..m)
        .map(|i| (0..m).map(|j| a[i][j].sub(&bc[i][j])).collect())
        .collect();

    let m_eps_re: SMat<f64> = m_eps
        .iter()
        .map(|row| row.iter().map(|e| e.map(|v| v.re)).collect())
        .collect();
    let ell = smat_leading(&m_eps_re, 1, order).ok_or_else(|| {
        AvError::Numerics(
            "reduced derivative vanishes through every computed order".into(),
        )
    })?;
    let m_ell = smat_coeff(&m_eps_re, ell);
    let ml_spectrum = eigenvalues(&m_ell);

    Ok(ReducedSystem {
        m,
        ell,
        n0,
        m_ell,
        n0_spectrum,
        ml_spectrum,
        notes,
        order,
        a,
        b,
        c,
        d,
        s_inv,
    })
}

impl ReducedSystem {
    fn nm(&self) -> usize {
        self.n0.len()
    }

    /// Pencil determinant governing the multipliers near the unit circle,
    /// as a localized polynomial in `u = 1 - omega`. At `eps = 0` it reduces
    /// to the characteristic polynomial of the reduced monodromy.
    pub fn multiplier_pencil(&self) -> LocPoly<EpsSeries<Complex64>> {
        let m = self.m;
        let nm = self.nm();
        type L = LocPoly<EpsSeries<Complex64>>;

        // (u I + A)^-1 = sum_j (-A)^j / u^{j+1}; A vanishes at eps = 0 so
        // the sum terminates at the series order
        let mut m1inv: Vec<Vec<L>> = vec![vec![L::zero(); m]; m];
        let mut apow: SMat<Complex64> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        EpsSeries::constant(if i == j {
                            Complex64::new(1.0, 0.0)
                        } else {
                            Complex64::new(0.0, 0.0)
                        })
                    })
                    .collect()
            })
            .collect();
        for j in 0..=self.order {
            for r in 0..m {
                for s in 0..m {
                    let term = LocPoly { num: Poly::constant(apow[r][s].clone()), den: j + 1 };
                    m1inv[r][s] = m1inv[r][s].add(&term);
                }
            }
            apow = ring_mat_mul(&apow, &self.a);
            for row in apow.iter_mut() {
                for e in row.iter_mut() {
                    *e = e.neg();
                }
            }
        }

        let lift = |mat: &SMat<Complex64>| -> Vec<Vec<L>> {
            mat.iter()
                .map(|row| {
                    row.iter()
                        .map(|e| L::from_poly(Poly::constant(e.clone())))
                        .collect()
                })
                .collect()
        };
        let cm1b = ring_mat_mul(&ring_mat_mul(&lift(&self.c), &m1inv), &lift(&self.b));

        let mut pmat: Vec<Vec<L>> = vec![vec![L::zero(); nm]; nm];
        for i in 0..nm {
            for j in 0..nm {
                let n_ij = self.d[i][j].add(&EpsSeries::constant(Complex64::new(
                    self.n0[i][j],
                    0.0,
                )));
                let mut entry = L::from_poly(Poly::constant(n_ij));
                if i == j {
                    // -omega = u - 1
                    entry = entry.add(&L::from_poly(Poly::new(vec![
                        EpsSeries::constant(Complex64::new(-1.0, 0.0)),
                        EpsSeries::constant(Complex64::new(1.0, 0.0)),
                    ])));
                }
                pmat[i][j] = entry.sub(&cm1b[i][j]);
            }
        }
        ring_det(&pmat)
    }

    /// Characteristic pencil of the reduced derivative, rescaled by the
    /// leading power: `det(-lambda I + M(eps)/eps^ell)` up to higher order,
    /// obtained from the full block pencil and divided by `eps^(m ell)`.
    /// Verifies the division and the agreement with the characteristic
    /// polynomial of the leading coefficient.
    pub fn exponent_pencil(&self) -> Result<(Poly<EpsSeries<Complex64>>, f64)> {
        let m = self.m;
        let nm = self.nm();
        let ell = self.ell;
        type P = Poly<EpsSeries<Complex64>>;

        let mut eps_ell_c = vec![Complex64::new(0.0, 0.0); self.order + 1];
        eps_ell_c[ell] = Complex64::new(1.0, 0.0);
        let eps_ell = EpsSeries::new(eps_ell_c);

        // M4 = S + D - eps^ell lambda I, inverted by geometric expansion in
        // S^-1 (D - eps^ell lambda I), which vanishes at eps = 0
        let pert: Vec<Vec<P>> = (0..nm)
            .map(|i| {
                (0..nm)
                    .map(|j| {
                        let lin = if i == j { eps_ell.neg() } else { EpsSeries::zeros(self.order) };
                        Poly::new(vec![self.d[i][j].clone(), lin])
                    })
                    .collect()
            })
            .collect();
        let lift_c = |mat: &[Vec<Complex64>]| -> Vec<Vec<P>> {
            mat.iter()
                .map(|row| {
                    row.iter()
                        .map(|v| Poly::constant(EpsSeries::constant(*v)))
                        .collect()
                })
                .collect()
        };
        let lift_s = |mat: &SMat<Complex64>| -> Vec<Vec<P>> {
            mat.iter()
                .map(|row| row.iter().map(|e| Poly::constant(e.clone())).collect())
                .collect()
        };
        let e_mat = ring_mat_mul(&lift_c(&self.s_inv), &pert);
        let mut m4inv = lift_c(&self.s_inv);
        let mut term: Vec<Vec<P>> = (0..nm)
            .map(|i| {
                (0..nm)
                    .map(|j| {
                        if i == j {
                            Poly::one()
                        } else {
                            Poly::zero()
                        }
                    })
                    .collect()
            })
            .collect();
        for _ in 1..=self.order {
            term = ring_mat_mul(&term, &e_mat);
            for row in term.iter_mut() {
                for e in row.iter_mut() {
                    *e = e.neg();
                }
            }
            let add = ring_mat_mul(&term, &lift_c(&self.s_inv));
            for i in 0..nm {
                for j in 0..nm {
                    m4inv[i][j] = m4inv[i][j].add(&add[i][j]);
                }
            }
        }
        let bmc = ring_mat_mul(&ring_mat_mul(&lift_s(&self.b), &m4inv), &lift_s(&self.c));

        let mut qmat: Vec<Vec<P>> = vec![vec![Poly::zero(); m]; m];
        for i in 0..m {
            for j in 0..m {
                let lin = if i == j { eps_ell.neg() } else { EpsSeries::zeros(self.order) };
                qmat[i][j] = Poly::new(vec![self.a[i][j].clone(), lin]).sub(&bmc[i][j]);
            }
        }
        let q = ring_det(&qmat);

        // the determinant carries the structural factor eps^(m ell)
        let mut shifted_coeffs = Vec::with_capacity(q.coeffs.len());
        for c in &q.coeffs {
            let s = c.densified(self.order).shifted_down(m * ell, FACTOR_TOL).map_err(|e| {
                AvError::Numerics(format!(
                    "exponent pencil is not divisible by the leading power: {e}"
                ))
            })?;
            shifted_coeffs.push(s);
        }
        let qshift = Poly::new(shifted_coeffs);

        // at eps = 0 the rescaled pencil is the characteristic polynomial of
        // the leading coefficient
        let cp_mat: Vec<Vec<Poly<Complex64>>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let c0 = Complex64::new(self.m_ell[i][j], 0.0);
                        if i == j {
                            Poly::new(vec![c0, Complex64::new(-1.0, 0.0)])
                        } else {
                            Poly::constant(c0)
                        }
                    })
                    .collect()
            })
            .collect();
        let cp = ring_det(&cp_mat);
        let scale = cp.coeffs.iter().fold(1.0_f64, |a, c| a.max(c.norm()));
        let mut worst: f64 = 0.0;
        for k in 0..=qshift.degree_bound().max(cp.degree_bound()) {
            let got = qshift.coeff(k).coeff(0);
            let want = cp.coeff(k);
            worst = worst.max((got - want).norm());
        }
        if worst > FACTOR_TOL * scale {
            return Err(AvError::Numerics(format!(
                "exponent pencil disagrees with the leading characteristic polynomial \
                 (residual {worst:.3e} of scale {scale:.3e})"
            )));
        }
        Ok((qshift, worst / scale))
    }
}

/// Classifies a branch on a lower-dimensional manifold. Multipliers near the
/// unit circle are continued to order `mu1` through the multiplier pencil;
/// eigenvalues of the reduced derivative on the imaginary axis are continued
/// to order `mu2` through the exponent pencil.
pub fn classify_reduced(rs: &ReducedSystem, mu1: usize, mu2: usize) -> Result<StabilityReport> {
    let mut notes = rs.notes.clone();
    let mut unstable = false;
    let mut inconclusive = false;

    // multiplier side
    let mut multiplier_branches = Vec::new();
    let mut pencil: Option<Poly<EpsSeries<Complex64>>> = None;
    for w in &rs.n0_spectrum {
        if w.norm() > 1.0 + CRITICAL_TOL {
            unstable = true;
            notes.push(format!("reduced monodromy multiplier {w} lies outside the unit disk"));
            continue;
        }
        if w.norm() < 1.0 - CRITICAL_TOL {
            continue;
        }
        let p = pencil.get_or_insert_with(|| rs.multiplier_pencil().num);
        let u0 = Complex64::new(1.0, 0.0) - w;
        let mu1_eff = mu1.min(rs.order);
        if mu1_eff < mu1 {
            notes.push(format!(
                "multiplier branch order clipped to {mu1_eff}: only {} series orders available",
                rs.order
            ));
        }
        let ucoeffs = hensel_branch(p, u0, mu1_eff)?;
        let mut wseries = vec![*w];
        wseries.extend(ucoeffs.iter().map(|u| -u));
        // squared-modulus defect; the constant term is critical by selection
        let indicator: Vec<f64> = (1..=mu1_eff)
            .map(|j| {
                (0..=j)
                    .map(|p| (wseries[p] * wseries[j - p].conj()).re)
                    .sum::<f64>()
            })
            .collect();
        let (decided_at, stable_side) = decide(&indicator);
        match stable_side {
            Some(true) => {}
            Some(false) => {
                unstable = true;
                notes.push(format!("multiplier branch at {w} leaves the unit disk"));
            }
            None => {
                inconclusive = true;
                notes.push(format!("multiplier branch at {w} stays flat through order {mu1_eff}"));
            }
        }
        multiplier_branches.push(BranchInfo {
            base: *w,
            coeffs: wseries[1..].to_vec(),
            indicator,
            decided_at,
            stable_side,
        });
    }

    // exponent side
    let escale = rs.ml_spectrum.iter().fold(1.0_f64, |m, l| m.max(l.norm()));
    let mut exponent_branches = Vec::new();
    let mut qpencil: Option<Poly<EpsSeries<Complex64>>> = None;
    for (idx, lam) in rs.ml_spectrum.iter().enumerate() {
        if lam.re > CRITICAL_TOL * escale {
            unstable = true;
            notes.push(format!(
                "leading reduced eigenvalue {lam} lies in the right half-plane"
            ));
            continue;
        }
        if lam.re < -CRITICAL_TOL * escale {
            continue;
        }
        let gap = rs
            .ml_spectrum
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .fold(f64::INFINITY, |g, (_, o)| g.min((lam - o).norm()));
        if gap < SIMPLE_GAP * escale {
            inconclusive = true;
            notes.push(format!(
                "critical reduced eigenvalue {lam} is not simple (gap {gap:.3e}); cannot branch"
            ));
            continue;
        }
        if qpencil.is_none() {
            let (q, resid) = rs.exponent_pencil()?;
            notes.push(format!("exponent pencil factorization residual {resid:.3e}"));
            qpencil = Some(q);
        }
        // the structural eps^(m ell) division eats m*ell series orders
        let avail = rs.order.saturating_sub(rs.m * rs.ell);
        let mu_eff = mu2.min(avail);
        if mu_eff < mu2 {
            notes.push(format!(
                "branch order clipped to {mu_eff}: only {avail} series orders available"
            ));
        }
        let coeffs = hensel_branch(qpencil.as_ref().unwrap(), *lam, mu_eff)?;
        let indicator: Vec<f64> = coeffs.iter().map(|c| c.re).collect();
        let (decided_at, stable_side) = decide(&indicator);
        match stable_side {
            Some(true) => {}
            Some(false) => {
                unstable = true;
                notes.push(format!("exponent branch at {lam} moves into the right half-plane"));
            }
            None => {
                inconclusive = true;
                notes.push(format!("exponent branch at {lam} stays flat through order {mu_eff}"));
            }
        }
        exponent_branches.push(BranchInfo { base: *lam, coeffs, indicator, decided_at, stable_side });
    }

    let verdict = if unstable {
        Verdict::Unstable
    } else if inconclusive {
        Verdict::Inconclusive
    } else {
        Verdict::Stable
    };
    Ok(StabilityReport {
        verdict,
        ell: rs.ell,
        reduced: true,
        map_spectrum: rs.n0_spectrum.clone(),
        field_spectrum: rs.ml_spectrum.clone(),
        multiplier_branches,
        exponent_branches,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::transverse_blocks;
    use crate::flow::OdeOpts;
    use crate::reduction::{branch_alpha, expand_at, initial_condition_series, map_jacobian_along};
    use crate::sysdsl::{parse_system, to_standard_form};

    const PI: f64 = std::f64::consts::PI;

    fn fixture(name: &str) -> crate::sysdsl::SystemDef {
        let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        let text = std::fs::read_to_string(path).unwrap();
        to_standard_form(&parse_system(&text).unwrap()).unwrap()
    }

    fn reduced_report(sys: &crate::sysdsl::SystemDef, alpha: &[f64]) -> StabilityReport {
        let opts = OdeOpts::default();
        let exp = expand_at(sys, alpha, 3, 4, &opts).unwrap();
        let curve = branch_alpha(&exp, 1, 2).unwrap();
        let z = initial_condition_series(&exp, &curve);
        let blocks = transverse_blocks(sys, alpha, &opts).unwrap();
        let mj = map_jacobian_along(&exp, &z);
        let rs = reduce_blocks(&blocks, &mj).unwrap();
        classify_reduced(&rs, 1, 1).unwrap()
    }

    #[test]
    fn damped_axis_branch_is_stable_with_predicted_rate() {
        let sys = fixture("damped_axis.avsys");
        let rep = reduced_report(&sys, &[4.0, 1.0]);
        assert_eq!(rep.verdict, Verdict::Stable);
        assert_eq!(rep.ell, 1);
        assert!(rep.reduced);
        // reduced monodromy is the pure contraction of the damped coordinate
        assert_eq!(rep.map_spectrum.len(), 1);
        assert!((rep.map_spectrum[0] - (-2.0 * PI).exp()).norm() < 1e-9);
        assert!(rep.multiplier_branches.is_empty());
        // leading eigenvalues form a critical imaginary pair
        let kappa = 32.0 * 3.0_f64.sqrt() * PI / 7.0;
        assert_eq!(rep.exponent_branches.len(), 2);
        for br in &rep.exponent_branches {
            assert!(br.base.re.abs() < 1e-7);
            assert!((br.base.im.abs() - kappa).abs() < 1e-7);
            assert_eq!(br.decided_at, Some(1));
            assert_eq!(br.stable_side, Some(true));
            let b = -1.1267;
            let want = PI * (16485.0 * b - 122880.0 * PI - 157337.0) / 3920.0;
            assert!(
                (br.indicator[0] - want).abs() < 1e-4 * want.abs(),
                "{} vs {want}",
                br.indicator[0]
            );
        }
    }

    #[test]
    fn damped_axis_mirror_branch_is_also_stable() {
        let sys = fixture("damped_axis.avsys");
        let rep = reduced_report(&sys, &[4.0, -1.0]);
        assert_eq!(rep.verdict, Verdict::Stable);
        // mirror symmetry flips the sign of the damping parameter
        let b = -1.1267;
        let want = PI * (16485.0 * (-b) - 122880.0 * PI - 157337.0) / 3920.0;
        for br in &rep.exponent_branches {
            assert!(
                (br.indicator[0] - want).abs() < 1e-4 * want.abs(),
                "{} vs {want}",
                br.indicator[0]
            );
        }
    }

    #[test]
    fn damped_axis_multiplier_pencil_reduces_to_monodromy_at_zero() {
        let sys = fixture("damped_axis.avsys");
        let opts = OdeOpts::default();
        let exp = expand_at(&sys, &[4.0, 1.0], 3, 4, &opts).unwrap();
        let curve = branch_alpha(&exp, 1, 2).unwrap();
        let z = initial_condition_series(&exp, &curve);
        let blocks = transverse_blocks(&sys, &[4.0, 1.0], &opts).unwrap();
        let mj = map_jacobian_along(&exp, &z);
        let rs = reduce_blocks(&blocks, &mj).unwrap();
        let pencil = rs.multiplier_pencil();
        // evaluate at eps = 0 for a few multiplier values: must equal
        // exp(-2 pi) - omega
        for &om in &[0.3, -0.7, 0.95] {
            let u = Complex64::new(1.0 - om, 0.0);
            let mut num = Complex64::new(0.0, 0.0);
            for (k, c) in pencil.num.coeffs.iter().enumerate() {
                num += c.coeff(0) * u.powi(k as i32);
            }
            let got = num / u.powi(pencil.den as i32);
            let want = Complex64::new((-2.0 * PI).exp() - om, 0.0);
            assert!((got - want).norm() < 1e-9, "omega {om}: {got} vs {want}");
        }
    }

    #[test]
    fn resonant_pair_branch_is_stable_with_predicted_rate() {
        let sys = fixture("resonant_pair.avsys");
        let opts = OdeOpts::default();
        let exp = expand_at(&sys, &[1.0, 1.0, PI / 2.0], 2, 3, &opts).unwrap();
        let curve = branch_alpha(&exp, 1, 1).unwrap();
        let z = initial_condition_series(&exp, &curve);
        let mj = map_jacobian_along(&exp, &z);
        let rep = classify_direct(&mj, 1).unwrap();
        assert_eq!(rep.verdict, Verdict::Stable);
        assert_eq!(rep.ell, 1);
        assert!(!rep.reduced);
        // spectrum: a critical imaginary pair plus a real eigenvalue at -1
        let kappa = (246677.0_f64 / 109.0).sqrt() / 108.0;
        let mut have_real = false;
        for lam in &rep.field_spectrum {
            if lam.im.abs() < 1e-9 {
                assert!((lam.re + 1.0).abs() < 1e-9);
                have_real = true;
            } else {
                assert!((lam.im.abs() - kappa).abs() < 1e-9);
            }
        }
        assert!(have_real);
        assert_eq!(rep.exponent_branches.len(), 2);
        let want = -22.912778624613114;
        for br in &rep.exponent_branches {
            assert_eq!(br.decided_at, Some(1));
            assert_eq!(br.stable_side, Some(true));
            assert!(
                (br.indicator[0] - want).abs() < 1e-4 * want.abs(),
                "{} vs {want}",
                br.indicator[0]
            );
        }
    }

    #[test]
    fn hypothesis_failures_are_reported() {
        // singular transverse pencil
        let blocks = TransverseBlocks {
            m: 1,
            gamma: vec![vec![0.0]],
            delta: vec![vec![0.0]],
            dbeta: vec![vec![0.0]],
            y0t: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let mj = MapJacobian {
            full: vec![vec![EpsSeries::constant(0.0); 2]; 2],
            zero_order: vec![vec![EpsSeries::constant(0.0); 2]; 2],
            y00: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        match reduce_blocks(&blocks, &mj) {
            Err(AvError::Hypothesis(_)) => {}
            Err(e) => panic!("expected hypothesis failure, got {e:?}"),
            Ok(_) => panic!("expected hypothesis failure, got a reduction"),
        }

        // repeated multiplier on the unit circle
        let blocks = TransverseBlocks {
            m: 1,
            gamma: vec![vec![0.0, 0.0]],
            delta: vec![vec![-2.0, 0.0], vec![0.0, -2.0]],
            dbeta: vec![vec![0.0], vec![0.0]],
            y0t: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, -1.0, 0.0],
                vec![0.0, 0.0, -1.0],
            ],
        };
        let mj = MapJacobian {
            full: vec![vec![EpsSeries::constant(0.0); 3]; 3],
            zero_order: vec![vec![EpsSeries::constant(0.0); 3]; 3],
            y00: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, -1.0, 0.0],
                vec![0.0, 0.0, -1.0],
            ],
        };
        match reduce_blocks(&blocks, &mj) {
            Err(AvError::Hypothesis(msg)) => assert!(msg.contains("repeated"), "{msg}"),
            Err(e) => panic!("expected hypothesis failure, got {e:?}"),
            Ok(_) => panic!("expected hypothesis failure, got a reduction"),
        }
    }

    #[test]
    fn pencil_determinant_matches_full_block_determinant() {
        // Schur-style identity: det of the full block pencil equals
        // det(u I + A) times the multiplier pencil
        let order = 2;
        let mk = |vals: &[f64]| -> EpsSeries<Complex64> {
            EpsSeries::new(vals.iter().map(|v| Complex64::new(*v, 0.0)).collect())
        };
        let a = vec![
            vec![mk(&[0.0, 0.3, -0.1]), mk(&[0.0, -0.2, 0.05])],
            vec![mk(&[0.0, 0.1, 0.2]), mk(&[0.0, 0.4, -0.3])],
        ];
        let b = vec![vec![mk(&[0.0, 0.5, 0.1])], vec![mk(&[0.0, -0.3, 0.2])]];
        let c = vec![vec![mk(&[0.0, 0.2, -0.4]), mk(&[0.0, 0.6, 0.1])]];
        let d = vec![vec![mk(&[0.0, -0.25, 0.15])]];
        let n0 = vec![vec![-0.5]];
        let rs = ReducedSystem {
            m: 2,
            ell: 1,
            n0: n0.clone(),
            m_ell: vec![vec![0.3, -0.2], vec![0.1, 0.4]],
            n0_spectrum: vec![Complex64::new(-0.5, 0.0)],
            ml_spectrum: Vec::new(),
            notes: Vec::new(),
            order,
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            d: d.clone(),
            s_inv: vec![vec![Complex64::new(-1.0 / 1.5, 0.0)]],
        };
        let pencil = rs.multiplier_pencil();

        type L = LocPoly<EpsSeries<Complex64>>;
        let lp = |e: &EpsSeries<Complex64>| L::from_poly(Poly::constant(e.clone()));
        // full 3x3 block matrix [[u I + A, B], [C, N - omega I]]
        let u_lin = |con: Complex64| {
            L::from_poly(Poly::new(vec![
                EpsSeries::constant(con),
                EpsSeries::constant(Complex64::new(1.0, 0.0)),
            ]))
        };
        let mut full: Vec<Vec<L>> = vec![vec![L::zero(); 3]; 3];
        for i in 0..2 {
            for j in 0..2 {
                full[i][j] = lp(&a[i][j]);
                if i == j {
                    full[i][j] = full[i][j].add(&u_lin(Complex64::new(0.0, 0.0)));
                }
            }
            full[i][2] = lp(&b[i][0]);
        }
        for j in 0..2 {
            full[2][j] = lp(&c[0][j]);
        }
        full[2][2] = lp(&d[0][0].add(&EpsSeries::constant(Complex64::new(n0[0][0], 0.0))))
            .add(&u_lin(Complex64::new(-1.0, 0.0)));
        let det_full = ring_det(&full);

        let mut m1: Vec<Vec<L>> = vec![vec![L::zero(); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m1[i][j] = lp(&a[i][j]);
                if i == j {
                    m1[i][j] = m1[i][j].add(&u_lin(Complex64::new(0.0, 0.0)));
                }
            }
        }
        let det_m1 = ring_det(&m1);
        let product = det_m1.mul(&pencil);

        // compare as rational functions: cross-multiplied numerators agree
        let lhs = det_full.num.mul(&Poly::monomial(
            EpsSeries::constant(Complex64::new(1.0, 0.0)),
            product.den,
        ));
        let rhs = product.num.mul(&Poly::monomial(
            EpsSeries::constant(Complex64::new(1.0, 0.0)),
            det_full.den,
        ));
        let deg = lhs.degree_bound().max(rhs.degree_bound());
        for k in 0..=deg {
            let a = lhs.coeff(k).densified(order);
            let b = rhs.coeff(k).densified(order);
            for q in 0..=order {
                assert!(
                    (a.coeff(q) - b.coeff(q)).norm() < 1e-10,
                    "u^{k} eps^{q}: {} vs {}",
                    a.coeff(q),
                    b.coeff(q)
                );
            }
        }
    }
}
