//! Direct verification of the series predictions by shooting.
//!
//! Nothing here reuses the perturbation machinery: fixed points of the
//! period map are found by Newton on the integrated displacement at a fixed
//! eps, and the Floquet multipliers come from the variational equation along
//! the computed orbit. Predictions and direct results are compared per eps
//! with an undecided band around unit modulus, so a criticality the series
//! resolves only at higher order is never misread as a disagreement.

use crate::eps_series::EpsSeries;
use crate::flow::{flow_map, fundamental_matrix, OdeOpts};
use crate::scalar::ring_solve;
use crate::stability::{StabilityReport, Verdict};
use crate::sysdsl::SystemDef;
use crate::{AvError, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;

pub const SHOOT_TOL: f64 = 1e-10;
pub const SHOOT_MAX_ITERS: usize = 50;
/// A fixed point farther than this fraction of `1 + |guess|` from the guess
/// is some other invariant set, not the continuation being verified.
pub const BASIN_FRACTION: f64 = 0.25;
/// Width multiplier of the undecided modulus band `1 +- 5 eps^(ell+1)`.
pub const BAND_FACTOR: f64 = 5.0;
pub const DET_CONSISTENCY_RTOL: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton on the displacement `x(T, z) - z` at fixed `eps`, with the exact
/// Jacobian from the variational equation. Damped: a step is shortened until
/// the residual decreases, down to a floor where it is taken anyway.
/// Converges on a small residual or a small full step, whichever first.
pub fn shoot_periodic(
    sys: &SystemDef,
    eps: f64,
    z_guess: &[f64],
    tol: f64,
    opts: &OdeOpts,
) -> Result<Vec<f64>> {
    if eps == 0.0 {
        return Err(AvError::Numerics(
            "shooting at eps = 0 is degenerate: every manifold point is fixed".into(),
        ));
    }
    let residual = |z: &[f64]| -> Result<Vec<f64>> {
        let zt = flow_map(sys, z, eps, opts)?;
        Ok(zt.iter().zip(z).map(|(a, b)| a - b).collect())
    };
    // converging onto some other invariant set (an equilibrium, a distant
    // orbit) is a basin failure even though the residual is small
    let leash = BASIN_FRACTION * (1.0 + norm(z_guess));
    let accept = |z: Vec<f64>| -> Result<Vec<f64>> {
        let drift = z
            .iter()
            .zip(z_guess)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if drift > leash {
            return Err(AvError::Numerics(format!(
                "shooting Newton converged {drift:.3e} away from the guess; \
                 that is a different invariant set, guess is outside the basin"
            )));
        }
        Ok(z)
    };

    let mut z = z_guess.to_vec();
    let mut d = residual(&z)?;
    for _ in 0..SHOOT_MAX_ITERS {
        let dn = norm(&d);
        if dn <= tol * (1.0 + norm(&z)) {
            return accept(z);
        }
        let (_, jac) = fundamental_matrix(sys, &z, eps, opts)?;
        let mut jmi = jac;
        for (i, row) in jmi.iter_mut().enumerate() {
            row[i] -= 1.0;
        }
        let rhs: Vec<Vec<f64>> = d.iter().map(|v| vec![-v]).collect();
        let delta = ring_solve(&jmi, &rhs).map_err(|_| {
            AvError::Numerics(
                "shooting Jacobian is singular; the orbit is not isolated at this eps".into(),
            )
        })?;
        let step: Vec<f64> = delta.iter().map(|r| r[0]).collect();
        let mut lambda = 1.0;
        loop {
            let cand: Vec<f64> = z.iter().zip(&step).map(|(v, s)| v + lambda * s).collect();
            match residual(&cand) {
                Ok(dc) if norm(&dc) < dn || lambda < 1.0 / 64.0 => {
                    z = cand;
                    d = dc;
                    break;
                }
                Err(_) if lambda < 1.0 / 64.0 => {
                    return Err(AvError::Numerics(
                        "shooting Newton left the integrable region; guess is outside \
                         the basin"
                            .into(),
                    ))
                }
                _ => lambda /= 2.0,
            }
        }
        // a full step below tolerance means the iteration is circling the
        // integrator noise floor around the fixed point
        if norm(&step) <= tol * (1.0 + norm(&z)) {
            return accept(z);
        }
    }
    Err(AvError::Numerics(format!(
        "shooting Newton did not converge within {SHOOT_MAX_ITERS} iterations; \
         guess is outside the basin"
    )))
}

/// Shooting with a continuation fallback. When the direct Newton from the
/// series prediction fails at `eps`, the fixed point is continued upward from
/// `eps/8` with adaptive step doubling. The series seeds the first stage;
/// once two stages are found, guesses come from secant extrapolation, which
/// keeps working where the series has stopped converging. A failed stage
/// halves the step down to `eps/1024` before giving up.
pub fn shoot_chained(
    sys: &SystemDef,
    eps: f64,
    z_series: &[EpsSeries<f64>],
    tol: f64,
    opts: &OdeOpts,
) -> Result<Vec<f64>> {
    let predict = |e: f64| -> Vec<f64> { z_series.iter().map(|s| s.eval_at(e)).collect() };
    let direct = shoot_periodic(sys, eps, &predict(eps), tol, opts);
    if direct.is_ok() {
        return direct;
    }

    let guess_at = |e: f64, hist: &[(f64, Vec<f64>)]| -> Vec<f64> {
        match hist {
            [] => predict(e),
            [(eb, zb)] => {
                let pb = predict(*eb);
                predict(e)
                    .iter()
                    .zip(zb.iter().zip(&pb))
                    .map(|(pe, (z, p))| pe + z - p)
                    .collect()
            }
            [.., (ea, za), (eb, zb)] => {
                let t = (e - eb) / (eb - ea);
                zb.iter().zip(za).map(|(b, a)| b + t * (b - a)).collect()
            }
        }
    };

    let sign = eps.signum();
    let target = eps.abs();
    let floor = target / 1024.0;
    let mut hist: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut cur = 0.0_f64;
    let mut h = target / 8.0;
    while cur < target {
        let next = if cur + 1.5 * h >= target { target } else { cur + h };
        let guess = guess_at(sign * next, &hist);
        match shoot_periodic(sys, sign * next, &guess, tol, opts) {
            Ok(z) => {
                hist.push((sign * next, z));
                if hist.len() > 2 {
                    hist.remove(0);
                }
                cur = next;
                h = cur;
            }
            Err(e) => {
                h /= 2.0;
                if h < floor {
                    return Err(e);
                }
            }
        }
    }
    Ok(hist.pop().expect("loop ran at least once").1)
}

/// Floquet multipliers: eigenvalues of the period-map derivative along the
/// orbit through `z_star`. The eigenvalue product is checked against the
/// determinant of the same matrix as an eigensolver consistency guard.
pub fn monodromy_multipliers(
    sys: &SystemDef,
    eps: f64,
    z_star: &[f64],
    opts: &OdeOpts,
) -> Result<Vec<Complex64>> {
    let n = sys.dim();
    let (_, jac) = fundamental_matrix(sys, z_star, eps, opts)?;
    let flat: Vec<f64> = jac.iter().flat_map(|r| r.iter().copied()).collect();
    let mat = DMatrix::from_row_slice(n, n, &flat);
    let det = mat.clone().determinant();
    let mults: Vec<Complex64> = mat
        .complex_eigenvalues()
        .iter()
        .map(|c| Complex64::new(c.re, c.im))
        .collect();
    let prod: Complex64 = mults.iter().product();
    let scale = det.abs().max(1.0);
    if (prod - Complex64::new(det, 0.0)).norm() > DET_CONSISTENCY_RTOL * scale {
        return Err(AvError::Numerics(format!(
            "multiplier product {prod} disagrees with the monodromy determinant {det}"
        )));
    }
    Ok(mults)
}

/// Verdict from multiplier moduli alone. Anything inside the band around
/// unit modulus is undecided; this also covers a multiplier near the value 1,
/// which would mean the orbit is not isolated at this resolution.
pub fn verdict_from_multipliers(mults: &[Complex64], band: f64) -> Verdict {
    let mut undecided = false;
    for m in mults {
        let r = m.norm();
        if r > 1.0 + band {
            return Verdict::Unstable;
        }
        if r >= 1.0 - band {
            undecided = true;
        }
    }
    if undecided {
        Verdict::Inconclusive
    } else {
        Verdict::Stable
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Agreement {
    Match,
    /// oracle could not decide inside its tolerance band
    Defer,
    Conflict,
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub eps: f64,
    pub z_star: Vec<f64>,
    pub residual: f64,
    pub multipliers: Vec<Complex64>,
    pub band: f64,
    pub verdict: Verdict,
    pub agreement: Option<Agreement>,
}

/// Full direct computation at one `eps`: shoot (with continuation fallback),
/// measure the residual, compute multipliers, classify with the band
/// `1 +- 5 eps^(ell+1)`.
pub fn oracle_at(
    sys: &SystemDef,
    eps: f64,
    z_series: &[EpsSeries<f64>],
    ell: usize,
    opts: &OdeOpts,
) -> Result<OracleResult> {
    let z_star = shoot_chained(sys, eps, z_series, SHOOT_TOL, opts)?;
    let zt = flow_map(sys, &z_star, eps, opts)?;
    let residual = norm(&zt.iter().zip(&z_star).map(|(a, b)| a - b).collect::<Vec<_>>());
    let multipliers = monodromy_multipliers(sys, eps, &z_star, opts)?;
    let band = BAND_FACTOR * eps.abs().powi(ell as i32 + 1);
    let verdict = verdict_from_multipliers(&multipliers, band);
    Ok(OracleResult { eps, z_star, residual, multipliers, band, verdict, agreement: None })
}

/// Default sweep: three dyadic values ending at the requested `eps`.
pub fn dyadic_sweep(eps: f64, count: usize) -> Vec<f64> {
    (0..count).rev().map(|k| eps / (1 << k) as f64).collect()
}

#[derive(Clone, Debug)]
pub struct AgreementRow {
    pub eps: f64,
    pub oracle_verdict: Verdict,
    pub predicted_verdict: Verdict,
    pub agreement: Agreement,
    /// per critical branch: predicted modulus, nearest direct modulus, gap
    pub moduli: Vec<(f64, f64, f64)>,
    pub max_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct AgreementTable {
    pub rows: Vec<AgreementRow>,
    /// least-squares slope of log deviation against log eps
    pub fitted_order: Option<f64>,
    pub all_agree: bool,
}

/// Predicted multipliers at a concrete `eps` from the report's critical
/// branches: exponent branches enter as `1 + eps^ell lambda(eps)`, multiplier
/// branches directly as their truncated series.
fn predicted_multipliers(report: &StabilityReport, eps: f64) -> Vec<Complex64> {
    let mut out = Vec::new();
    for br in &report.exponent_branches {
        let mut lam = br.base;
        let mut p = 1.0;
        for c in &br.coeffs {
            p *= eps;
            lam += c * p;
        }
        out.push(Complex64::new(1.0, 0.0) + lam * eps.powi(report.ell as i32));
    }
    for br in &report.multiplier_branches {
        let mut om = br.base;
        let mut p = 1.0;
        for c in &br.coeffs {
            p *= eps;
            om += c * p;
        }
        out.push(om);
    }
    out
}

/// Per-eps verdict agreement and modulus deviation of the critical
/// multipliers. Marks each result; never fails by itself, see
/// [`require_agreement`].
pub fn compare(report: &StabilityReport, results: &mut [OracleResult]) -> AgreementTable {
    let mut rows = Vec::with_capacity(results.len());
    let mut all_agree = true;
    for res in results.iter_mut() {
        let agreement = if res.verdict == Verdict::Inconclusive {
            Agreement::Defer
        } else if res.verdict == report.verdict {
            Agreement::Match
        } else {
            all_agree = false;
            Agreement::Conflict
        };
        res.agreement = Some(agreement);

        let mut moduli = Vec::new();
        let mut max_dev: f64 = 0.0;
        for pred in predicted_multipliers(report, res.eps) {
            let nearest = res
                .multipliers
                .iter()
                .min_by(|a, b| (*a - pred).norm().total_cmp(&(*b - pred).norm()))
                .copied()
                .unwrap_or_else(|| Complex64::new(f64::NAN, 0.0));
            let dev = (nearest.norm() - pred.norm()).abs();
            max_dev = max_dev.max(dev);
            moduli.push((pred.norm(), nearest.norm(), dev));
        }
        rows.push(AgreementRow {
            eps: res.eps,
            oracle_verdict: res.verdict,
            predicted_verdict: report.verdict,
            agreement,
            moduli,
            max_deviation: max_dev,
        });
    }

    // convergence order of the modulus deviation across the sweep
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.max_deviation > 0.0)
        .map(|r| (r.eps.ln(), r.max_deviation.ln()))
        .collect();
    let fitted_order = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        Some((n * sxy - sx * sy) / (n * sxx - sx * sx))
    } else {
        None
    };

    AgreementTable { rows, fitted_order, all_agree }
}

/// Turns any conflict row into the error that maps to the disagreement exit
/// code.
pub fn require_agreement(table: &AgreementTable) -> Result<()> {
    for row in &table.rows {
        if row.agreement == Agreement::Conflict {
            return Err(AvError::Oracle(format!(
                "predicted {} but direct multipliers say {} at eps = {}",
                row.predicted_verdict, row.oracle_verdict, row.eps
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduction::{branch_alpha, expand_at, initial_condition_series, map_jacobian_along};
    use crate::stability::{classify_direct, classify_reduced, reduce_blocks};
    use crate::sysdsl::{parse_system, to_standard_form};

    const PI: f64 = std::f64::consts::PI;

    fn fixture(name: &str) -> SystemDef {
        let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        let text = std::fs::read_to_string(path).unwrap();
        to_standard_form(&parse_system(&text).unwrap()).unwrap()
    }

    // shooting reaches residuals near the integration error, so the oracle
    // side runs tighter than the series side
    fn tight() -> OdeOpts {
        OdeOpts { rtol: 1e-12, atol: 1e-13, ..OdeOpts::default() }
    }

    fn branch_series(
        sys: &SystemDef,
        alpha: &[f64],
        kmax: usize,
        worder: usize,
        mu: usize,
        opts: &OdeOpts,
    ) -> (crate::reduction::Expansion, Vec<EpsSeries<f64>>) {
        let exp = expand_at(sys, alpha, kmax, worder, opts).unwrap();
        let curve = branch_alpha(&exp, 1, mu).unwrap();
        let z = initial_condition_series(&exp, &curve);
        (exp, z)
    }

    #[test]
    fn shooting_rejects_the_unperturbed_system() {
        let sys = fixture("damped_axis.avsys");
        let opts = OdeOpts::default();
        assert!(shoot_periodic(&sys, 0.0, &[4.0, 1.0, 0.0], 1e-12, &opts).is_err());
    }

    #[test]
    fn damped_axis_shooting_lands_near_the_branch_point() {
        let sys = fixture("damped_axis.avsys");
        let opts = OdeOpts::default();
        let (_, z) = branch_series(&sys, &[4.0, 1.0], 2, 2, 1, &opts);
        let eps = 1.0 / 50.0;
        let guess: Vec<f64> = z.iter().map(|s| s.eval_at(eps)).collect();
        let topts = tight();
        let zs = shoot_periodic(&sys, eps, &guess, SHOOT_TOL, &topts).unwrap();
        let zt = flow_map(&sys, &zs, eps, &topts).unwrap();
        let res = norm(&zt.iter().zip(&zs).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(res < 1e-9, "residual {res}");
        // the drift constant is the size of the first branch correction
        let dist = norm(&[zs[0] - 4.0, zs[1] - 1.0, zs[2]]);
        assert!(dist < 25.0 * eps, "fixed point drifted {dist} from the unperturbed state");

        // smooth dependence on eps
        let zh = shoot_periodic(&sys, eps / 2.0, &guess, SHOOT_TOL, &topts).unwrap();
        let step = norm(&zs.iter().zip(&zh).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(step < 25.0 * eps, "fixed point jumped {step} when halving eps");
    }

    #[test]
    fn unperturbed_monodromy_has_the_manifold_multipliers() {
        let sys = fixture("damped_axis.avsys");
        let opts = tight();
        let mut mods: Vec<f64> = monodromy_multipliers(&sys, 0.0, &[4.0, 1.0, 0.0], &opts)
            .unwrap()
            .iter()
            .map(|m| m.norm())
            .collect();
        mods.sort_by(f64::total_cmp);
        assert!((mods[0] - (-2.0 * PI).exp()).abs() < 1e-8);
        assert!((mods[1] - 1.0).abs() < 1e-8);
        assert!((mods[2] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn damped_axis_direct_verdict_is_stable() {
        let sys = fixture("damped_axis.avsys");
        let opts = OdeOpts::default();
        let (_, z) = branch_series(&sys, &[4.0, 1.0], 2, 2, 1, &opts);
        let res = oracle_at(&sys, 1.0 / 50.0, &z, 1, &tight()).unwrap();
        assert_eq!(res.verdict, Verdict::Stable);
        assert!(res.residual < 1e-9);
        for m in &res.multipliers {
            assert!(m.norm() < 1.0 - res.band, "multiplier {m} not inside the disk");
        }
    }

    // angle-aware distance on the section: the third coordinate is a phase
    fn sect_dist(a: &[f64], b: &[f64]) -> f64 {
        let mut da = (a[2] - b[2]) % (2.0 * PI);
        if da > PI {
            da -= 2.0 * PI;
        }
        if da < -PI {
            da += 2.0 * PI;
        }
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + da * da).sqrt()
    }

    #[test]
    fn resonant_pair_chained_shooting_matches_section_iterates() {
        let sys = fixture("resonant_pair.avsys");
        let opts = OdeOpts::default();
        let (_, z) = branch_series(&sys, &[1.0, 1.0, PI / 2.0], 2, 2, 1, &opts);
        let eps = 1.0 / 45.0;
        let topts = tight();
        let zs = shoot_chained(&sys, eps, &z, SHOOT_TOL, &topts).unwrap();
        // section fixed point frozen from an iterate-then-polish run of the
        // period map; direct Newton from the series prediction diverges at
        // this eps, so this exercises the continuation path
        assert!((zs[0] - 0.738_592_98).abs() < 1e-6, "amplitude {}", zs[0]);
        assert!((zs[1].abs() - 0.536_092_67).abs() < 1e-6, "coupling {}", zs[1]);

        // (r, alpha) -> (-r, alpha + pi) maps solutions to solutions, so the
        // mirrored point must be fixed under the same period map
        let mirror = [zs[0], -zs[1], zs[2] + PI];
        let mt = flow_map(&sys, &mirror, eps, &topts).unwrap();
        let mres = norm(&mt.iter().zip(&mirror).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(mres < 1e-8, "mirror residual {mres}");

        // the published start lies near the attracting orbit; its section
        // iterates must close in on the fixed point copy with r > 0
        let start = [
            0.7638,
            f64::hypot(-0.4716, 0.2242),
            f64::atan2(0.2242, -0.4716),
        ];
        let plus = if zs[1] >= 0.0 { [zs[0], zs[1], zs[2]] } else { mirror };
        let d0 = sect_dist(&start, &plus);
        let mut p = start.to_vec();
        for _ in 0..100 {
            p = flow_map(&sys, &p, eps, &opts).unwrap();
        }
        let d100 = sect_dist(&p, &plus);
        assert!(d100 < 0.75 * d0, "iterates receded: {d0} -> {d100}");
    }

    #[test]
    fn resonant_pair_direct_multipliers_inside_the_disk() {
        let sys = fixture("resonant_pair.avsys");
        let opts = OdeOpts::default();
        let (_, z) = branch_series(&sys, &[1.0, 1.0, PI / 2.0], 2, 2, 1, &opts);
        let res = oracle_at(&sys, 1.0 / 45.0, &z, 1, &tight()).unwrap();
        assert_eq!(res.verdict, Verdict::Stable);
        for m in &res.multipliers {
            assert!(m.norm() < 1.0 - res.band);
        }
    }

    #[test]
    fn sweep_agreement_on_the_damped_axis() {
        let sys = fixture("damped_axis.avsys");
        let opts = OdeOpts::default();
        let (exp, z) = branch_series(&sys, &[4.0, 1.0], 3, 4, 2, &opts);
        let blocks =
            crate::averaging::transverse_blocks(&sys, &[4.0, 1.0], &opts).unwrap();
        let mj = map_jacobian_along(&exp, &z);
        let rs = reduce_blocks(&blocks, &mj).unwrap();
        let report = classify_reduced(&rs, 1, 1).unwrap();

        let sweep = dyadic_sweep(1.0 / 50.0, 3);
        assert_eq!(sweep, vec![1.0 / 200.0, 1.0 / 100.0, 1.0 / 50.0]);
        let topts = tight();
        let mut results: Vec<OracleResult> = sweep
            .iter()
            .map(|&e| oracle_at(&sys, e, &z, report.ell, &topts).unwrap())
            .collect();
        let table = compare(&report, &mut results);
        assert!(table.all_agree);
        for row in &table.rows {
            assert_eq!(row.agreement, Agreement::Match);
            assert_eq!(row.oracle_verdict, Verdict::Stable);
        }
        require_agreement(&table).unwrap();
        // modulus deviation must shrink faster than the band it is judged in
        let order = table.fitted_order.expect("deviations should be nonzero");
        assert!(order > 2.0, "fitted convergence order {order}");
        for r in &results {
            assert_eq!(r.agreement, Some(Agreement::Match));
        }
    }

    #[test]
    fn trivially_contracting_line_agrees_exactly() {
        let text = "[states] x\n[period] 2*pi\n[order 0]\n0\n[order 1]\n-x\n";
        let sys = to_standard_form(&parse_system(text).unwrap()).unwrap();
        let opts = OdeOpts::default();
        let exp = expand_at(&sys, &[0.0], 1, 2, &opts).unwrap();
        let curve = branch_alpha(&exp, 1, 0).unwrap();
        let z = initial_condition_series(&exp, &curve);
        let mj = map_jacobian_along(&exp, &z);
        let report = classify_direct(&mj, 1).unwrap();
        assert_eq!(report.verdict, Verdict::Stable);

        let topts = tight();
        let mut results: Vec<OracleResult> = dyadic_sweep(0.1, 3)
            .iter()
            .map(|&e| oracle_at(&sys, e, &z, report.ell, &topts).unwrap())
            .collect();
        for r in &results {
            assert!((r.z_star[0]).abs() < 1e-10);
            assert!((r.multipliers[0].norm() - (-2.0 * PI * r.eps).exp()).abs() < 1e-9);
        }
        let table = compare(&report, &mut results);
        assert!(table.all_agree);
        require_agreement(&table).unwrap();
    }
}
