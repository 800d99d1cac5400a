//! Direct-shooting verification of a stability prediction, either recomputed
//! on the spot or loaded from a sealed report file.

use averon_core::eps_series::EpsSeries;
use averon_core::flow::{flow_map, OdeOpts};
use averon_core::oracle::{compare, dyadic_sweep, oracle_at, require_agreement, OracleResult};
use averon_core::reduction::find_zeros;
use averon_core::report::{self, JVal};
use averon_core::stability::{BranchInfo, StabilityReport, Verdict};
use averon_core::sysdsl::to_standard_form;
use averon_core::{AvError, Result};
use num_complex::Complex64;
use rayon::prelude::*;
use serde_json::Value;

use crate::pipeline::{
    analyze_root, branch_orders, config_block, load_system, parse_float_list, parse_guess,
    series_val, system_block, write_out,
};
use crate::VerifyArgs;

/// A single value expands to the default sweep: three dyadic points up to
/// and including it.
fn parse_eps(spec: &str) -> Result<Vec<f64>> {
    let vals = parse_float_list(spec, "eps list")?;
    if vals.is_empty() {
        return Err(AvError::Parse("--eps needs at least one value".into()));
    }
    if vals.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(AvError::Parse("--eps values must be nonzero and finite".into()));
    }
    if vals.len() == 1 {
        return Ok(dyadic_sweep(vals[0], 3));
    }
    Ok(vals)
}

fn jget<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| AvError::Parse(format!("report is missing field `{key}`")))
}

fn jf64(v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| AvError::Parse(format!("expected a number in report, got {v}")))
}

fn jcomplex(v: &Value) -> Result<Complex64> {
    Ok(Complex64::new(jf64(jget(v, "re")?)?, jf64(jget(v, "im")?)?))
}

fn jarr<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    jget(v, key)?
        .as_array()
        .ok_or_else(|| AvError::Parse(format!("report field `{key}` is not an array")))
}

fn jcomplex_arr(v: &Value, key: &str) -> Result<Vec<Complex64>> {
    jarr(v, key)?.iter().map(jcomplex).collect()
}

fn jreal_arr(v: &Value, key: &str) -> Result<Vec<f64>> {
    jarr(v, key)?.iter().map(jf64).collect()
}

fn jverdict(v: &Value) -> Result<Verdict> {
    match v.as_str() {
        Some("Stable") => Ok(Verdict::Stable),
        Some("Unstable") => Ok(Verdict::Unstable),
        Some("Inconclusive") => Ok(Verdict::Inconclusive),
        _ => Err(AvError::Parse(format!("unknown verdict `{v}` in report"))),
    }
}

fn jbranch(v: &Value) -> Result<BranchInfo> {
    Ok(BranchInfo {
        base: jcomplex(jget(v, "base")?)?,
        coeffs: jcomplex_arr(v, "coeffs")?,
        indicator: jreal_arr(v, "indicator")?,
        decided_at: match jget(v, "decided_at")? {
            Value::Null => None,
            x => Some(jf64(x)? as usize),
        },
        stable_side: match jget(v, "stable_side")? {
            Value::Null => None,
            x => x.as_bool().ok_or_else(|| {
                AvError::Parse("stable_side must be a bool or null".into())
            })?.into(),
        },
    })
}

/// Rebuilds the prediction and the branch state series from a sealed report;
/// the seal is checked before anything is trusted.
fn load_prediction(path: &std::path::Path) -> Result<(StabilityReport, Vec<EpsSeries<f64>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AvError::Parse(format!("cannot read {}: {e}", path.display())))?;
    report::check_seal(&text)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| AvError::Parse(format!("report is not valid JSON: {e}")))?;
    let analyses = jarr(&doc, "analyses")?;
    let first = analyses
        .first()
        .ok_or_else(|| AvError::Parse("report contains no analyses".into()))?;
    let st = jget(first, "stability")?;

    let branches = |key: &str| -> Result<Vec<BranchInfo>> {
        jarr(st, key)?.iter().map(jbranch).collect()
    };
    let prediction = StabilityReport {
        verdict: jverdict(jget(st, "verdict")?)?,
        ell: jf64(jget(st, "leading_index")?)? as usize,
        reduced: jget(st, "reduced")?.as_bool().unwrap_or(false),
        map_spectrum: jcomplex_arr(st, "map_spectrum")?,
        field_spectrum: jcomplex_arr(st, "field_spectrum")?,
        multiplier_branches: branches("multiplier_branches")?,
        exponent_branches: branches("exponent_branches")?,
        notes: Vec::new(),
    };

    let series = jarr(jget(first, "branch")?, "state_series")?
        .iter()
        .map(|s| Ok(EpsSeries::new(jreal_arr(s, "coeffs")?)))
        .collect::<Result<Vec<_>>>()?;
    if series.is_empty() {
        return Err(AvError::Parse("report carries no state series".into()));
    }
    Ok((prediction, series))
}

fn moduli_csv(rows: &[averon_core::oracle::AgreementRow]) -> String {
    let mut out = String::from("eps,branch,predicted_modulus,direct_modulus,gap\n");
    for row in rows {
        for (bi, &(pred, direct, gap)) in row.moduli.iter().enumerate() {
            out.push_str(&format!(
                "{:.16e},{bi},{pred:.16e},{direct:.16e},{gap:.16e}\n",
                row.eps
            ));
        }
    }
    out
}

/// Section iterates from the unperturbed point toward the perturbed orbit at
/// the largest sweep value; raw plot data for attraction figures.
fn attraction_csv(
    sys: &averon_core::sysdsl::SystemDef,
    z0: &[f64],
    at: &OracleResult,
    opts: &OdeOpts,
) -> Result<String> {
    let dist = |p: &[f64]| -> f64 {
        p.iter()
            .zip(&at.z_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut out = String::from("iter,");
    out.push_str(&sys.state_names.join(","));
    out.push_str(",distance\n");
    let mut p = z0.to_vec();
    for it in 0..=120 {
        let cells: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&format!("{it},{},{:.16e}\n", cells.join(","), dist(&p)));
        if it < 120 {
            p = flow_map(sys, &p, at.eps, opts)?;
        }
    }
    Ok(out)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let c = &args.common;
    let loaded = load_system(c)?;
    let sys = to_standard_form(&loaded.raw)?;
    let eps_list = parse_eps(&args.eps)?;
    let guess = parse_guess(c)?;
    let orders = branch_orders(c);

    let (prediction, z) = match &args.against {
        Some(path) => load_prediction(path)?,
        None => {
            let opts = OdeOpts::default();
            let roots = find_zeros(&sys, guess.as_deref(), &opts)?;
            if roots.len() > 1 {
                println!("{} zeros found; verifying the first", roots.len());
            }
            let a = analyze_root(&sys, &roots[0], &orders, c.order, &opts)?;
            (a.report, a.z)
        }
    };

    // shooting residuals sit near the integration error, so the oracle side
    // runs tighter than the series side
    let opts = OdeOpts { rtol: 1e-12, atol: 1e-13, ..OdeOpts::default() };
    let mut results: Vec<OracleResult> = eps_list
        .par_iter()
        .map(|&e| oracle_at(&sys, e, &z, prediction.ell, &opts))
        .collect::<Result<_>>()?;
    let table = compare(&prediction, &mut results);

    let mut extra = vec![("eps", report::real_arr(&eps_list))];
    extra.push((
        "against",
        args.against
            .as_ref()
            .map_or(JVal::Null, |p| JVal::str(p.display().to_string())),
    ));
    let mut doc = JVal::obj();
    doc.push("tool", report::tool_block())
        .push(
            "config",
            config_block("verify", c, &loaded, guess.as_deref(), &orders, extra),
        )
        .push("system", system_block(&sys))
        .push("prediction", report::stability_val(&prediction))
        .push(
            "state_series",
            JVal::Arr(z.iter().map(series_val).collect()),
        )
        .push(
            "sweep",
            JVal::Arr(results.iter().map(report::oracle_val).collect()),
        )
        .push("agreement", report::agreement_val(&table));
    let text = report::seal(&mut doc)?;
    write_out(&c.out, "verify.json", &text)?;

    write_out(&c.out, "moduli.csv", &moduli_csv(&table.rows))?;
    let largest = results
        .iter()
        .max_by(|a, b| a.eps.abs().total_cmp(&b.eps.abs()))
        .expect("eps list is nonempty");
    let z0: Vec<f64> = z.iter().map(|s| s.coeff(0)).collect();
    write_out(&c.out, "attraction.csv", &attraction_csv(&sys, &z0, largest, &opts)?)?;

    for row in &table.rows {
        println!(
            "eps {:.6e}: oracle {} / predicted {} -> {:?} (max modulus gap {:.3e})",
            row.eps, row.oracle_verdict, row.predicted_verdict, row.agreement, row.max_deviation
        );
    }
    if let Some(ord) = table.fitted_order {
        println!("modulus deviation shrinks with fitted order {ord:.2}");
    }
    require_agreement(&table)?;
    Ok(())
}
