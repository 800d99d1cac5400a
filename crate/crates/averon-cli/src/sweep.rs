//! Parameter sweep: rerun the analysis across a linear grid of one scalar
//! parameter, tabulate verdicts with the decisive branch coefficients, and
//! bracket sign changes.

use averon_core::flow::OdeOpts;
use averon_core::reduction::find_zeros;
use averon_core::sysdsl::to_standard_form;
use averon_core::{AvError, Result};
use rayon::prelude::*;

use crate::pipeline::{analyze_root, branch_orders, load_system, parse_guess, write_out};
use crate::SweepArgs;

struct SweepRow {
    value: f64,
    verdict: String,
    /// first indicator coefficient per critical branch, exponent side first
    crits: Vec<f64>,
    error: Option<String>,
}

fn parse_range(spec: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, count] = parts.as_slice() else {
        return Err(AvError::Parse(format!(
            "--range expects LO:HI:COUNT, got `{spec}`"
        )));
    };
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|_| AvError::Parse(format!("range start `{lo}` is not a number")))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|_| AvError::Parse(format!("range end `{hi}` is not a number")))?;
    let count: usize = count
        .trim()
        .parse()
        .map_err(|_| AvError::Parse(format!("range count `{count}` is not an integer")))?;
    Ok((lo, hi, count))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let c = &args.common;
    let loaded = load_system(c)?;
    if !loaded.raw.params.contains_key(&args.name) {
        return Err(AvError::Parse(format!("unknown sweep parameter `{}`", args.name)));
    }
    let (lo, hi, count) = parse_range(&args.range)?;
    let values: Vec<f64> = match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    };
    let guess = parse_guess(c)?;
    let orders = branch_orders(c);

    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&v| {
            let run = || -> Result<SweepRow> {
                let mut raw = loaded.raw.clone();
                raw.set_param(&args.name, v)?;
                let sys = to_standard_form(&raw)?;
                let opts = OdeOpts::default();
                let roots = find_zeros(&sys, guess.as_deref(), &opts)?;
                let a = analyze_root(&sys, &roots[0], &orders, c.order, &opts)?;
                let crits: Vec<f64> = a
                    .report
                    .exponent_branches
                    .iter()
                    .chain(&a.report.multiplier_branches)
                    .map(|br| br.indicator.first().copied().unwrap_or(f64::NAN))
                    .collect();
                Ok(SweepRow {
                    value: v,
                    verdict: a.report.verdict.to_string(),
                    crits,
                    error: None,
                })
            };
            run().unwrap_or_else(|e| SweepRow {
                value: v,
                verdict: "error".into(),
                crits: Vec::new(),
                error: Some(e.to_string()),
            })
        })
        .collect();

    // a verdict flip between adjacent clean rows brackets a threshold; the
    // crossing is interpolated on the first indicator that changes sign
    let mut thresholds: Vec<f64> = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.error.is_some() || b.error.is_some() || a.verdict == b.verdict {
            continue;
        }
        let crossing = a
            .crits
            .iter()
            .zip(&b.crits)
            .find(|(x, y)| x.is_finite() && y.is_finite() && **x * **y < 0.0)
            .map(|(x, y)| a.value - x * (b.value - a.value) / (*y - *x))
            .unwrap_or_else(|| 0.5 * (a.value + b.value));
        thresholds.push(crossing);
    }

    let ncrit = rows.iter().map(|r| r.crits.len()).max().unwrap_or(0);
    let mut csv = String::new();
    csv.push_str(&format!("{},verdict", args.name));
    for i in 0..ncrit {
        csv.push_str(&format!(",crit_{i}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{:.16e},{}", r.value, r.verdict));
        for i in 0..ncrit {
            csv.push(',');
            if let Some(v) = r.crits.get(i) {
                csv.push_str(&format!("{v:.16e}"));
            }
        }
        csv.push('\n');
    }
    for t in &thresholds {
        csv.push_str(&format!("# sign_change {} = {:.9e}\n", args.name, t));
    }
    write_out(&c.out, "sweep.csv", &csv)?;

    for r in &rows {
        if let Some(e) = &r.error {
            println!("{} = {:.6}: {e}", args.name, r.value);
        }
    }
    for t in &thresholds {
        println!("verdict flips near {} = {:.6}", args.name, t);
    }
    if thresholds.is_empty() {
        println!("no verdict change across {} grid points", rows.len());
    }
    Ok(())
}
