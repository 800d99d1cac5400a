//! Averaged orders of the period-map displacement and the transverse block
//! structure of the unperturbed monodromy along the manifold, together with
//! the structural hypotheses the later analysis relies on.
//!
//! Order zero of the displacement vanishes on the manifold (that is what
//! makes it a manifold of periodic states); the higher orders are the
//! averaged functions driving existence and stability of the continued
//! orbits.

use crate::eps_series::EpsSeries;
use crate::flow::{flow_eps, flow_map, fundamental_matrix, OdeOpts};
use crate::sysdsl::SystemDef;
use crate::{AvError, Result};

/// Largest allowed drift of a manifold point under the unperturbed period
/// map, relative to the point's size.
pub const MANIFOLD_FIX_TOL: f64 = 1e-9;
/// Smallest allowed singular value of the transverse block, relative to its
/// norm.
pub const TRANSVERSE_INVERT_TOL: f64 = 1e-6;
/// Largest allowed residual of the predicted monodromy block structure.
pub const BLOCK_STRUCTURE_TOL: f64 = 1e-7;

/// Period-map displacement expanded in the perturbation parameter; order
/// zero is the unperturbed displacement, which vanishes on the manifold.
pub fn displacement_series(
    sys: &SystemDef,
    z0: &[f64],
    kmax: usize,
    opts: &OdeOpts,
) -> Result<Vec<EpsSeries<f64>>> {
    let flow = flow_eps(sys, z0, kmax, opts)?;
    Ok(flow
        .iter()
        .zip(z0)
        .map(|(s, &z)| {
            let mut c = s.coeffs().to_vec();
            c[0] -= z;
            EpsSeries::new(c)
        })
        .collect())
}

/// Displacement orders transposed to one vector per order.
pub fn averaged_orders(
    sys: &SystemDef,
    z0: &[f64],
    kmax: usize,
    opts: &OdeOpts,
) -> Result<Vec<Vec<f64>>> {
    let d = displacement_series(sys, z0, kmax, opts)?;
    Ok((0..=kmax)
        .map(|q| d.iter().map(|s| s.coeff(q)).collect())
        .collect())
}

/// Blocks of the unperturbed monodromy at a manifold point, written in the
/// splitting (manifold coordinates, transverse coordinates).
#[derive(Clone, Debug)]
pub struct TransverseBlocks {
    pub m: usize,
    /// coupling of transverse displacements into the manifold directions,
    /// m x (n-m)
    pub gamma: Vec<Vec<f64>>,
    /// transverse displacement response minus identity, (n-m) x (n-m)
    pub delta: Vec<Vec<f64>>,
    /// derivative of the manifold graph, (n-m) x m
    pub dbeta: Vec<Vec<f64>>,
    /// full unperturbed monodromy at the point
    pub y0t: Vec<Vec<f64>>,
}

/// Computes the monodromy blocks at `alpha` and verifies they carry the
/// structure implied by a manifold of periodic states: the manifold-tangent
/// columns must be reproducible from the transverse columns through the
/// graph derivative.
pub fn transverse_blocks(
    sys: &SystemDef,
    alpha: &[f64],
    opts: &OdeOpts,
) -> Result<TransverseBlocks> {
    let m = sys.manifold_dim();
    let n = sys.dim();
    let z = sys.chart_point(alpha)?;
    let (zt, y0t) = fundamental_matrix(sys, &z, 0.0, opts)?;
    for (a, b) in zt.iter().zip(&z) {
        if (a - b).abs() > MANIFOLD_FIX_TOL * (1.0 + b.abs()) {
            return Err(AvError::Hypothesis(format!(
                "manifold point drifts under the unperturbed period map by {:.3e}",
                (a - b).abs()
            )));
        }
    }
    let scale = y0t
        .iter()
        .flatten()
        .fold(1.0_f64, |acc, v| acc.max(v.abs()));

    if m == n {
        for (i, row) in y0t.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                if (v - id).abs() > BLOCK_STRUCTURE_TOL * scale {
                    return Err(AvError::Hypothesis(format!(
                        "full-dimensional manifold requires identity monodromy; \
                         entry ({i},{j}) deviates by {:.3e}",
                        (v - id).abs()
                    )));
                }
            }
        }
        return Ok(TransverseBlocks {
            m,
            gamma: Vec::new(),
            delta: Vec::new(),
            dbeta: Vec::new(),
            y0t,
        });
    }

    let jets = sys.chart_jets(alpha, 1)?;
    let mut dbeta = vec![vec![0.0; m]; n - m];
    for (i, row) in dbeta.iter_mut().enumerate() {
        for (d, slot) in row.iter_mut().enumerate() {
            let mut e = vec![0u8; m];
            e[d] = 1;
            *slot = jets[m + i].coeff(&e);
        }
    }

    let gamma: Vec<Vec<f64>> = (0..m).map(|i| y0t[i][m..].to_vec()).collect();
    let delta: Vec<Vec<f64>> = (0..n - m)
        .map(|i| {
            (0..n - m)
                .map(|j| y0t[m + i][m + j] - if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();

    // tangent columns must satisfy the graph-compatibility structure
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..m {
            let mut want = if i == j { 1.0 } else { 0.0 };
            for q in 0..n - m {
                let lever = if i < m { gamma[i][q] } else { delta[i - m][q] };
                want -= lever * dbeta[q][j];
            }
            worst = worst.max((y0t[i][j] - want).abs());
        }
    }
    if worst > BLOCK_STRUCTURE_TOL * scale {
        return Err(AvError::Hypothesis(format!(
            "unperturbed monodromy does not carry the manifold block structure \
             (residual {worst:.3e}); the declared manifold is not a manifold of \
             periodic states"
        )));
    }

    Ok(TransverseBlocks { m, gamma, delta, dbeta, y0t })
}

/// The transverse response block must be invertible for the reduction to a
/// manifold-dimensional bifurcation problem.
pub fn check_transverse_invertible(blocks: &TransverseBlocks) -> Result<()> {
    let k = blocks.delta.len();
    if k == 0 {
        return Ok(());
    }
    let flat: Vec<f64> = blocks.delta.iter().flatten().copied().collect();
    let mat = nalgebra::DMatrix::from_row_slice(k, k, &flat);
    let norm = mat.norm().max(1.0);
    let smin = mat.svd(false, false).singular_values.iter().copied().fold(f64::MAX, f64::min);
    if smin < TRANSVERSE_INVERT_TOL * norm {
        return Err(AvError::Hypothesis(format!(
            "transverse displacement block is numerically singular \
             (smallest singular value {smin:.3e} against norm {norm:.3e})"
        )));
    }
    Ok(())
}

/// Samples a uniform grid over the manifold box and checks every grid point
/// is fixed by the unperturbed period map.
pub fn check_manifold_fixed(sys: &SystemDef, opts: &OdeOpts) -> Result<()> {
    const PER_DIM: usize = 5;
    let m = sys.manifold_dim();
    let boxes = match &sys.manifold {
        Some(mf) => mf.boxes.clone(),
        None => {
            return Err(AvError::Hypothesis(
                "system declares no manifold of periodic states".into(),
            ))
        }
    };
    let mut idx = vec![0usize; m];
    loop {
        let alpha: Vec<f64> = idx
            .iter()
            .zip(&boxes)
            .map(|(&i, &(lo, hi))| lo + (hi - lo) * i as f64 / (PER_DIM - 1) as f64)
            .collect();
        let z = sys.chart_point(&alpha)?;
        let end = flow_map(sys, &z, 0.0, opts)?;
        for (a, b) in end.iter().zip(&z) {
            if (a - b).abs() > MANIFOLD_FIX_TOL * (1.0 + b.abs()) {
                return Err(AvError::Hypothesis(format!(
                    "grid point {alpha:?} drifts by {:.3e} under the unperturbed \
                     period map; not a manifold of periodic states",
                    (a - b).abs()
                )));
            }
        }
        // advance mixed-radix counter
        let mut d = 0;
        loop {
            if d == m {
                return Ok(());
            }
            idx[d] += 1;
            if idx[d] < PER_DIM {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysdsl::{parse_system, to_standard_form};

    fn fixture(name: &str) -> SystemDef {
        let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        let text = std::fs::read_to_string(path).unwrap();
        to_standard_form(&parse_system(&text).unwrap()).unwrap()
    }

    #[test]
    fn resonant_pair_first_order_average_closed_form() {
        let sys = fixture("resonant_pair.avsys");
        let g = averaged_orders(&sys, &[1.1, 0.9, 1.3], 1, &OdeOpts::default()).unwrap();
        // order zero vanishes everywhere on the full-dimensional manifold
        for v in &g[0] {
            assert!(v.abs() < 1e-9);
        }
        let want = [
            4.9994989538523785e-02,
            -1.2942829189834074e-01,
            1.6779788767269532e-01,
        ];
        for (u, v) in g[1].iter().zip(&want) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn resonant_pair_average_vanishes_at_the_branch_root() {
        let sys = fixture("resonant_pair.avsys");
        let g = averaged_orders(
            &sys,
            &[1.0, 1.0, std::f64::consts::FRAC_PI_2],
            1,
            &OdeOpts::default(),
        )
        .unwrap();
        for v in &g[1] {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn damped_axis_zero_order_displacement_off_manifold() {
        let sys = fixture("damped_axis.avsys");
        let d = displacement_series(&sys, &[4.2, 1.1, 0.3], 1, &OdeOpts::default()).unwrap();
        let e = (-2.0 * std::f64::consts::PI).exp();
        assert!(d[0].coeff(0).abs() < 1e-9);
        assert!(d[1].coeff(0).abs() < 1e-9);
        assert!((d[2].coeff(0) - 0.3 * (e - 1.0)).abs() < 1e-10);
        // amplitude and height components of the first averaged order,
        // pinned against a closed form validated by quadrature
        let rho = 4.2_f64;
        let z = 1.1_f64;
        let pi = std::f64::consts::PI;
        let g11 = pi * rho * (rho * rho - 28.0 * z * z + 12.0) / 28.0;
        let g12 = -pi * z * (-7.0 * rho * rho + 4.0 * z * z + 108.0) / 7.0;
        assert!((d[0].coeff(1) + g11).abs() < 1e-8, "{} vs {}", d[0].coeff(1), -g11);
        assert!((d[1].coeff(1) + g12).abs() < 1e-8, "{} vs {}", d[1].coeff(1), -g12);
    }

    #[test]
    fn damped_axis_first_order_average_vanishes_at_known_root() {
        let sys = fixture("damped_axis.avsys");
        let g = averaged_orders(&sys, &[4.0, 1.0, 0.0], 1, &OdeOpts::default()).unwrap();
        assert!(g[1][0].abs() < 1e-9);
        assert!(g[1][1].abs() < 1e-9);
    }

    #[test]
    fn damped_axis_transverse_blocks() {
        let sys = fixture("damped_axis.avsys");
        let b = transverse_blocks(&sys, &[4.0, 1.0], &OdeOpts::default()).unwrap();
        let e = (-2.0 * std::f64::consts::PI).exp();
        assert_eq!(b.m, 2);
        assert!((b.delta[0][0] - (e - 1.0)).abs() < 1e-10);
        assert!(b.gamma[0][0].abs() < 1e-9);
        assert!(b.gamma[1][0].abs() < 1e-9);
        assert!(b.dbeta[0][0].abs() < 1e-12);
        assert!(b.dbeta[0][1].abs() < 1e-12);
        check_transverse_invertible(&b).unwrap();
    }

    #[test]
    fn resonant_pair_blocks_are_identity_monodromy() {
        let sys = fixture("resonant_pair.avsys");
        let b = transverse_blocks(&sys, &[1.0, 1.0, 1.5], &OdeOpts::default()).unwrap();
        assert_eq!(b.m, 3);
        assert!(b.gamma.is_empty());
        check_transverse_invertible(&b).unwrap();
    }

    #[test]
    fn manifold_grids_are_fixed_for_both_fixtures() {
        for name in ["resonant_pair.avsys", "damped_axis.avsys"] {
            let sys = fixture(name);
            check_manifold_fixed(&sys, &OdeOpts::default()).unwrap();
        }
    }
}
