//! Shared pipeline: load a system, locate zeros, expand the branch, classify
//! it, and assemble the deterministic report document.

use std::path::Path;

use averon_core::averaging::{transverse_blocks, TransverseBlocks};
use averon_core::eps_series::EpsSeries;
use averon_core::flow::OdeOpts;
use averon_core::reduction::{
    bifurcation_values, branch_alpha, expand_at, find_zeros, initial_condition_series,
    map_jacobian_along, MapJacobian, Root,
};
use averon_core::report::{self, JVal};
use averon_core::stability::{classify_direct, classify_reduced, reduce_blocks, StabilityReport};
use averon_core::sysdsl::{parse_system, to_standard_form, SystemDef};
use averon_core::{AvError, Result};

use crate::{AnalyzeArgs, CommonArgs, Format};

pub struct Loaded {
    /// parsed system with overrides applied, before the standard-form pass
    pub raw: SystemDef,
    pub overrides: Vec<(String, f64)>,
}

pub fn load_system(common: &CommonArgs) -> Result<Loaded> {
    let text = std::fs::read_to_string(&common.file)
        .map_err(|e| AvError::Parse(format!("cannot read {}: {e}", common.file.display())))?;
    let mut raw = parse_system(&text)?;
    let mut overrides = Vec::new();
    for spec in common.param.iter().flat_map(|s| s.split(',')) {
        let spec = spec.trim();
        if spec.is_empty() {
            continue;
        }
        let (name, value) = spec.split_once('=').ok_or_else(|| {
            AvError::Parse(format!("malformed parameter override `{spec}`; expected name=value"))
        })?;
        let v: f64 = value.trim().parse().map_err(|_| {
            AvError::Parse(format!("parameter `{name}` value `{value}` is not a number"))
        })?;
        raw.set_param(name.trim(), v)?;
        overrides.push((name.trim().to_string(), v));
    }
    overrides.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Loaded { raw, overrides })
}

pub fn parse_float_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| AvError::Parse(format!("{what}: `{p}` is not a number")))
        })
        .collect()
}

pub fn parse_guess(common: &CommonArgs) -> Result<Option<Vec<f64>>> {
    match &common.zero_guess {
        None => Ok(None),
        Some(s) => {
            let v = parse_float_list(s, "zero guess")?;
            if v.is_empty() {
                return Err(AvError::Parse("zero guess is empty".into()));
            }
            Ok(Some(v))
        }
    }
}

#[derive(Copy, Clone)]
pub struct BranchOrders {
    pub mu: usize,
    pub mu1: usize,
    pub mu2: usize,
}

pub fn branch_orders(common: &CommonArgs) -> BranchOrders {
    BranchOrders {
        mu: common.mu.unwrap_or(1),
        mu1: common.mu1.or(common.mu).unwrap_or(1),
        mu2: common.mu2.or(common.mu).unwrap_or(1),
    }
}

pub struct Analysis {
    pub root: Root,
    pub residual: f64,
    pub kmax: usize,
    pub zero_curve: Vec<Vec<f64>>,
    pub z: Vec<EpsSeries<f64>>,
    pub mj: MapJacobian,
    pub blocks: Option<TransverseBlocks>,
    pub reduced_monodromy: Option<Vec<Vec<f64>>>,
    pub reduced_leading: Option<Vec<Vec<f64>>>,
    pub report: StabilityReport,
}

fn run_once(
    sys: &SystemDef,
    root: &Root,
    orders: &BranchOrders,
    kmax: usize,
    opts: &OdeOpts,
) -> Result<Analysis> {
    let worder = kmax + 1;
    let exp = expand_at(sys, &root.alpha, kmax, worder, opts)?;
    let zero_curve = branch_alpha(&exp, root.leading, kmax - root.leading)?;
    let z = initial_condition_series(&exp, &zero_curve);
    let mj = map_jacobian_along(&exp, &z);

    let fr = bifurcation_values(sys, &root.alpha, root.leading, opts)?;
    let residual = fr[root.leading - 1].iter().fold(0.0_f64, |a, v| a.max(v.abs()));

    if sys.manifold_dim() == sys.dim() {
        let report = classify_direct(&mj, orders.mu)?;
        Ok(Analysis {
            root: root.clone(),
            residual,
            kmax,
            zero_curve,
            z,
            mj,
            blocks: None,
            reduced_monodromy: None,
            reduced_leading: None,
            report,
        })
    } else {
        let blocks = transverse_blocks(sys, &root.alpha, opts)?;
        let rs = reduce_blocks(&blocks, &mj)?;
        let report = classify_reduced(&rs, orders.mu1, orders.mu2)?;
        Ok(Analysis {
            root: root.clone(),
            residual,
            kmax,
            zero_curve,
            z,
            mj,
            blocks: Some(blocks),
            reduced_monodromy: Some(rs.n0.clone()),
            reduced_leading: Some(rs.m_ell.clone()),
            report,
        })
    }
}

/// Truncation order that serves the requested branch orders once the leading
/// index is known. The exponent side consumes `ell` (direct case) or
/// `m * ell` (reduced case, divided pencil) series orders.
fn needed_order(sys: &SystemDef, root: &Root, orders: &BranchOrders, ell: usize) -> usize {
    let base = sys.grade_count.max(1).max(root.leading);
    let m = sys.manifold_dim();
    if m == sys.dim() {
        base.max(root.leading + orders.mu).max(ell + orders.mu)
    } else {
        base.max(orders.mu1).max(m * ell + orders.mu2)
    }
}

fn orders_satisfied(sys: &SystemDef, a: &Analysis, orders: &BranchOrders) -> bool {
    let m = sys.manifold_dim();
    if m == sys.dim() {
        orders.mu <= a.kmax.saturating_sub(a.report.ell)
    } else {
        orders.mu1 <= a.kmax && orders.mu2 <= a.kmax.saturating_sub(m * a.report.ell)
    }
}

/// Expand and classify one zero. Without `--order` the truncation adapts: a
/// first pass at a probing order measures the leading index, a second pass
/// raises the truncation until the requested branch orders fit. A fixed
/// `--order` is a contract and analysis fails if the orders do not fit it.
pub fn analyze_root(
    sys: &SystemDef,
    root: &Root,
    orders: &BranchOrders,
    fixed_order: Option<usize>,
    opts: &OdeOpts,
) -> Result<Analysis> {
    if let Some(k) = fixed_order {
        if k < 1 {
            return Err(AvError::Parse("--order must be at least 1".into()));
        }
        let a = run_once(sys, root, orders, k, opts)?;
        if !orders_satisfied(sys, &a, orders) {
            return Err(AvError::Parse(format!(
                "requested branch orders do not fit --order {k}: the leading \
                 index is {} and dividing the pencil costs series orders; \
                 raise --order or lower the branch orders",
                a.report.ell
            )));
        }
        return Ok(a);
    }
    let mut kmax = needed_order(sys, root, orders, 1);
    let mut a = run_once(sys, root, orders, kmax, opts)?;
    for _ in 0..2 {
        let want = needed_order(sys, root, orders, a.report.ell);
        if orders_satisfied(sys, &a, orders) || want <= kmax {
            break;
        }
        kmax = want;
        a = run_once(sys, root, orders, kmax, opts)?;
    }
    Ok(a)
}

fn fmt_alpha(alpha: &[f64]) -> String {
    let parts: Vec<String> = alpha.iter().map(|v| format!("{v:.6}")).collect();
    format!("({})", parts.join(", "))
}

pub fn series_val(s: &EpsSeries<f64>) -> JVal {
    let mut o = JVal::obj();
    o.push("order", JVal::int(s.order()))
        .push("coeffs", report::real_arr(&(0..=s.order()).map(|i| s.coeff(i)).collect::<Vec<_>>()));
    o
}

pub fn system_block(sys: &SystemDef) -> JVal {
    let mut params = JVal::obj();
    for (k, v) in &sys.params {
        params.push(k, JVal::Num(*v));
    }
    let mut o = JVal::obj();
    o.push(
        "states",
        JVal::Arr(sys.state_names.iter().map(JVal::str).collect()),
    )
    .push("dim", JVal::int(sys.dim()))
    .push("manifold_dim", JVal::int(sys.manifold_dim()))
    .push("period", JVal::Num(sys.period))
    .push("grade_count", JVal::int(sys.grade_count))
    .push("params", params);
    o
}

/// Configuration echo with a fingerprint over its own rendering; identical
/// inputs hash identically because the rendering is deterministic.
pub fn config_block(
    command: &str,
    common: &CommonArgs,
    loaded: &Loaded,
    guess: Option<&[f64]>,
    orders: &BranchOrders,
    extra: Vec<(&str, JVal)>,
) -> JVal {
    let mut params = JVal::obj();
    for (k, v) in &loaded.overrides {
        params.push(k, JVal::Num(*v));
    }
    let mut o = JVal::obj();
    o.push("command", JVal::str(command))
        .push("file", JVal::str(common.file.display().to_string()))
        .push("param_overrides", params)
        .push(
            "zero_guess",
            guess.map_or(JVal::Null, report::real_arr),
        )
        .push("order", common.order.map_or(JVal::Null, JVal::int))
        .push("mu", JVal::int(orders.mu))
        .push("mu1", JVal::int(orders.mu1))
        .push("mu2", JVal::int(orders.mu2));
    for (k, v) in extra {
        o.push(k, v);
    }
    let fp = report::fingerprint(&o.render());
    o.push("fingerprint", JVal::str(fp));
    o
}

fn smat_coeff_val(mats: &[Vec<EpsSeries<f64>>], upto: usize) -> JVal {
    let per_order = (0..=upto)
        .map(|k| {
            JVal::Arr(
                mats.iter()
                    .map(|row| {
                        report::real_arr(&row.iter().map(|s| s.coeff(k)).collect::<Vec<_>>())
                    })
                    .collect(),
            )
        })
        .collect();
    JVal::Arr(per_order)
}

pub fn analysis_block(a: &Analysis) -> JVal {
    let mut zero = JVal::obj();
    zero.push("alpha", report::real_arr(&a.root.alpha))
        .push("bifurcation_order", JVal::int(a.root.leading))
        .push("residual", JVal::Num(a.residual))
        .push("produced_by", JVal::str("find_zeros"));

    let mut branch = JVal::obj();
    branch
        .push(
            "zero_curve",
            JVal::Arr(a.zero_curve.iter().map(|r| report::real_arr(r)).collect()),
        )
        .push(
            "state_series",
            JVal::Arr(a.z.iter().map(series_val).collect()),
        )
        .push("truncation_order", JVal::int(a.kmax))
        .push(
            "produced_by",
            JVal::str("branch_alpha, initial_condition_series"),
        );

    let order = a.mj.full[0][0].order();
    let mut jac = JVal::obj();
    jac.push("unperturbed", report::real_mat(&a.mj.y00))
        .push("eps_coefficients", smat_coeff_val(&a.mj.full, order))
        .push("produced_by", JVal::str("map_jacobian_along"));

    let transverse = match (&a.blocks, &a.reduced_monodromy, &a.reduced_leading) {
        (Some(b), Some(n0), Some(ml)) => {
            let mut t = JVal::obj();
            t.push("coupling", report::real_mat(&b.gamma))
                .push("response", report::real_mat(&b.delta))
                .push("graph_derivative", report::real_mat(&b.dbeta))
                .push("monodromy", report::real_mat(&b.y0t))
                .push("reduced_monodromy", report::real_mat(n0))
                .push("leading_coefficient", report::real_mat(ml))
                .push("produced_by", JVal::str("transverse_blocks, reduce_blocks"));
            t
        }
        _ => JVal::Null,
    };

    let mut o = JVal::obj();
    o.push("zero", zero)
        .push("branch", branch)
        .push("map_jacobian", jac)
        .push("transverse", transverse)
        .push("stability", report::stability_val(&a.report));
    o
}

pub fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| AvError::Numerics(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, text)
        .map_err(|e| AvError::Numerics(format!("cannot write {}: {e}", path.display())))
}

fn branches_csv(analyses: &[Analysis]) -> String {
    let mut out = String::from("analysis,kind,branch,order,re,im,indicator\n");
    for (ai, a) in analyses.iter().enumerate() {
        let sides = [
            ("exponent", &a.report.exponent_branches),
            ("multiplier", &a.report.multiplier_branches),
        ];
        for (kind, branches) in sides {
            for (bi, br) in branches.iter().enumerate() {
                out.push_str(&format!(
                    "{ai},{kind},{bi},0,{:.16e},{:.16e},\n",
                    br.base.re, br.base.im
                ));
                for (ci, c) in br.coeffs.iter().enumerate() {
                    let ind = br
                        .indicator
                        .get(ci)
                        .map_or(String::new(), |v| format!("{v:.16e}"));
                    out.push_str(&format!(
                        "{ai},{kind},{bi},{},{:.16e},{:.16e},{ind}\n",
                        ci + 1,
                        c.re,
                        c.im
                    ));
                }
            }
        }
    }
    out
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let c = &args.common;
    let loaded = load_system(c)?;
    let sys = to_standard_form(&loaded.raw)?;
    let opts = OdeOpts::default();
    let guess = parse_guess(c)?;
    let orders = branch_orders(c);

    let roots = find_zeros(&sys, guess.as_deref(), &opts)?;
    let analyses: Vec<Analysis> = roots
        .iter()
        .map(|rt| analyze_root(&sys, rt, &orders, c.order, &opts))
        .collect::<Result<_>>()?;

    let mut doc = JVal::obj();
    doc.push("tool", report::tool_block())
        .push(
            "config",
            config_block("analyze", c, &loaded, guess.as_deref(), &orders, vec![]),
        )
        .push("system", system_block(&sys))
        .push(
            "analyses",
            JVal::Arr(analyses.iter().map(analysis_block).collect()),
        );
    let text = report::seal(&mut doc)?;
    write_out(&c.out, "report.json", &text)?;
    if c.format == Format::Csv {
        write_out(&c.out, "branches.csv", &branches_csv(&analyses))?;
    }

    for a in &analyses {
        println!(
            "zero {} (residual {:.2e}): verdict {}",
            fmt_alpha(&a.root.alpha),
            a.residual,
            a.report.verdict
        );
        for br in &a.report.exponent_branches {
            if let Some(at) = br.decided_at {
                println!(
                    "  exponent branch at {:.6}{:+.6}i: decisive coefficient {:.6e} (order {at})",
                    br.base.re,
                    br.base.im,
                    br.indicator[at - 1]
                );
            }
        }
        for note in &a.report.notes {
            println!("  note: {note}");
        }
    }
    Ok(())
}
