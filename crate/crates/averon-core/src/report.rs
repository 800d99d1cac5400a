//! Deterministic report serialization.
//!
//! Reports are written by a purpose-built JSON emitter instead of a generic
//! serializer: object keys keep insertion order, every float prints with 17
//! significant digits, and the finished document embeds a digest of itself.
//! The same inputs therefore produce byte-identical files, and any edit to a
//! written report is detected when it is read back. Parsing reports (for the
//! tamper check and for tooling) goes through serde_json.

use crate::oracle::{Agreement, AgreementTable, OracleResult};
use crate::stability::{BranchInfo, StabilityReport};
use crate::{AvError, Result};
use num_complex::Complex64;

/// JSON value whose object fields stay in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub enum JVal {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<JVal>),
    Obj(Vec<(String, JVal)>),
}

impl JVal {
    pub fn obj() -> JVal {
        JVal::Obj(Vec::new())
    }

    /// Appends a field; panics if the key repeats, duplicate keys would make
    /// the tamper check ambiguous.
    pub fn push(&mut self, key: &str, val: JVal) -> &mut JVal {
        match self {
            JVal::Obj(fields) => {
                assert!(
                    fields.iter().all(|(k, _)| k != key),
                    "duplicate report key {key}"
                );
                fields.push((key.to_string(), val));
            }
            _ => panic!("push on a non-object report value"),
        }
        self
    }

    pub fn str(s: impl Into<String>) -> JVal {
        JVal::Str(s.into())
    }

    pub fn int(n: usize) -> JVal {
        JVal::Int(n as i64)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.write_into(&mut out, 0);
        out.push('\n');
        out
    }

    fn write_into(&self, out: &mut String, indent: usize) {
        match self {
            JVal::Null => out.push_str("null"),
            JVal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            JVal::Int(n) => out.push_str(&n.to_string()),
            JVal::Num(x) => out.push_str(&fmt_f64(*x)),
            JVal::Str(s) => escape_into(s, out),
            JVal::Arr(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    newline_indent(out, indent + 1);
                    item.write_into(out, indent + 1);
                }
                newline_indent(out, indent);
                out.push(']');
            }
            JVal::Obj(fields) => {
                if fields.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push('{');
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    newline_indent(out, indent + 1);
                    escape_into(k, out);
                    out.push_str(": ");
                    v.write_into(out, indent + 1);
                }
                newline_indent(out, indent);
                out.push('}');
            }
        }
    }
}

fn newline_indent(out: &mut String, indent: usize) {
    out.push('\n');
    for _ in 0..indent {
        out.push_str("  ");
    }
}

/// 17 significant digits round-trip any f64 exactly. Non-finite values have
/// no JSON number form and render as null.
fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

fn escape_into(s: &str, out: &mut String) {
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                out.push_str(&format!("\\u{:04x}", c as u32));
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn fingerprint(text: &str) -> String {
    format!("fnv1a64:{:016x}", fnv1a64(text.as_bytes()))
}

const CHECKSUM_KEY: &str = "checksum";

/// Renders the report with an embedded digest. The digest covers the full
/// rendered text with the checksum value blanked, so the sealed document
/// certifies every other byte of itself.
pub fn seal(report: &mut JVal) -> Result<String> {
    let JVal::Obj(fields) = report else {
        return Err(AvError::Parse("report root must be an object".into()));
    };
    match fields.iter_mut().find(|(k, _)| k == CHECKSUM_KEY) {
        Some(f) => f.1 = JVal::Str(String::new()),
        None => fields.push((CHECKSUM_KEY.to_string(), JVal::Str(String::new()))),
    }
    let digest = fingerprint(&report.render());
    let JVal::Obj(fields) = report else { unreachable!() };
    let slot = fields.iter_mut().find(|(k, _)| k == CHECKSUM_KEY).unwrap();
    slot.1 = JVal::Str(digest);
    Ok(report.render())
}

/// Recomputes the digest of a sealed document and compares it with the
/// stored one. Any modification of the text fails the comparison.
pub fn check_seal(text: &str) -> Result<()> {
    let needle = format!("\"{CHECKSUM_KEY}\": \"");
    let count = text.matches(&needle).count();
    if count != 1 {
        return Err(AvError::Parse(format!(
            "expected exactly one checksum field, found {count}"
        )));
    }
    let start = text.find(&needle).unwrap() + needle.len();
    let len = text[start..]
        .find('"')
        .ok_or_else(|| AvError::Parse("unterminated checksum field".into()))?;
    let stored = &text[start..start + len];
    let mut blank = String::with_capacity(text.len());
    blank.push_str(&text[..start]);
    blank.push_str(&text[start + len..]);
    let expect = fingerprint(&blank);
    if stored != expect {
        return Err(AvError::Parse(format!(
            "checksum mismatch: stored {stored}, recomputed {expect}; \
             the report file was modified after it was written"
        )));
    }
    Ok(())
}

pub fn complex_val(c: Complex64) -> JVal {
    let mut o = JVal::obj();
    o.push("re", JVal::Num(c.re)).push("im", JVal::Num(c.im));
    o
}

pub fn complex_arr(v: &[Complex64]) -> JVal {
    JVal::Arr(v.iter().map(|&c| complex_val(c)).collect())
}

pub fn real_arr(v: &[f64]) -> JVal {
    JVal::Arr(v.iter().map(|&x| JVal::Num(x)).collect())
}

pub fn real_mat(m: &[Vec<f64>]) -> JVal {
    JVal::Arr(m.iter().map(|r| real_arr(r)).collect())
}

fn branch_val(b: &BranchInfo) -> JVal {
    let mut o = JVal::obj();
    o.push("base", complex_val(b.base))
        .push("coeffs", complex_arr(&b.coeffs))
        .push("indicator", real_arr(&b.indicator))
        .push(
            "decided_at",
            b.decided_at.map_or(JVal::Null, JVal::int),
        )
        .push(
            "stable_side",
            b.stable_side.map_or(JVal::Null, JVal::Bool),
        );
    o
}

pub fn stability_val(r: &StabilityReport) -> JVal {
    let mut o = JVal::obj();
    o.push("verdict", JVal::str(r.verdict.to_string()))
        .push("leading_index", JVal::int(r.ell))
        .push("reduced", JVal::Bool(r.reduced))
        .push("map_spectrum", complex_arr(&r.map_spectrum))
        .push("field_spectrum", complex_arr(&r.field_spectrum))
        .push(
            "multiplier_branches",
            JVal::Arr(r.multiplier_branches.iter().map(branch_val).collect()),
        )
        .push(
            "exponent_branches",
            JVal::Arr(r.exponent_branches.iter().map(branch_val).collect()),
        )
        .push(
            "notes",
            JVal::Arr(r.notes.iter().map(JVal::str).collect()),
        );
    o
}

fn agreement_str(a: Agreement) -> &'static str {
    match a {
        Agreement::Match => "match",
        Agreement::Defer => "defer",
        Agreement::Conflict => "conflict",
    }
}

pub fn oracle_val(r: &OracleResult) -> JVal {
    let mut o = JVal::obj();
    o.push("eps", JVal::Num(r.eps))
        .push("fixed_point", real_arr(&r.z_star))
        .push("residual", JVal::Num(r.residual))
        .push("multipliers", complex_arr(&r.multipliers))
        .push("band", JVal::Num(r.band))
        .push("verdict", JVal::str(r.verdict.to_string()))
        .push(
            "agreement",
            r.agreement
                .map_or(JVal::Null, |a| JVal::str(agreement_str(a))),
        );
    o
}

pub fn agreement_val(t: &AgreementTable) -> JVal {
    let rows = t
        .rows
        .iter()
        .map(|row| {
            let moduli = row
                .moduli
                .iter()
                .map(|&(pred, oracle, gap)| {
                    let mut m = JVal::obj();
                    m.push("predicted", JVal::Num(pred))
                        .push("direct", JVal::Num(oracle))
                        .push("gap", JVal::Num(gap));
                    m
                })
                .collect();
            let mut o = JVal::obj();
            o.push("eps", JVal::Num(row.eps))
                .push("oracle_verdict", JVal::str(row.oracle_verdict.to_string()))
                .push(
                    "predicted_verdict",
                    JVal::str(row.predicted_verdict.to_string()),
                )
                .push("agreement", JVal::str(agreement_str(row.agreement)))
                .push("moduli", JVal::Arr(moduli))
                .push("max_deviation", JVal::Num(row.max_deviation));
            o
        })
        .collect();
    let mut o = JVal::obj();
    o.push("rows", JVal::Arr(rows))
        .push(
            "fitted_order",
            t.fitted_order.map_or(JVal::Null, JVal::Num),
        )
        .push("all_agree", JVal::Bool(t.all_agree));
    o
}

/// Tool identification block shared by all report files: version plus every
/// tolerance that shapes a verdict, so a report is interpretable on its own.
pub fn tool_block() -> JVal {
    let mut tols = JVal::obj();
    tols.push("zero_newton", JVal::Num(crate::reduction::NEWTON_TOL))
        .push(
            "leading_order_rel",
            JVal::Num(crate::reduction::LEADING_ORDER_RTOL),
        )
        .push("manifold_fix", JVal::Num(crate::averaging::MANIFOLD_FIX_TOL))
        .push(
            "transverse_invert",
            JVal::Num(crate::averaging::TRANSVERSE_INVERT_TOL),
        )
        .push("critical", JVal::Num(crate::stability::CRITICAL_TOL))
        .push("simple_gap", JVal::Num(crate::stability::SIMPLE_GAP))
        .push("indicator_rel", JVal::Num(crate::stability::LEADING_RTOL))
        .push("shooting", JVal::Num(crate::oracle::SHOOT_TOL))
        .push("band_factor", JVal::Num(crate::oracle::BAND_FACTOR));
    let mut o = JVal::obj();
    o.push("name", JVal::str("averon"))
        .push("version", JVal::str(env!("CARGO_PKG_VERSION")))
        .push("tolerances", tols);
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rendering_is_ordered_and_stable() {
        let mut inner = JVal::obj();
        inner.push("zeta", JVal::Int(1)).push("alpha", JVal::Int(2));
        let mut doc = JVal::obj();
        doc.push("b", inner)
            .push("a", JVal::Arr(vec![JVal::Null, JVal::Bool(true)]))
            .push("x", JVal::Num(0.5));
        let want = "{\n  \"b\": {\n    \"zeta\": 1,\n    \"alpha\": 2\n  },\n  \
                    \"a\": [\n    null,\n    true\n  ],\n  \
                    \"x\": 5.0000000000000000e-1\n}\n";
        assert_eq!(doc.render(), want);
        assert_eq!(doc.render(), doc.clone().render());
    }

    #[test]
    fn floats_keep_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-1234.5), "-1.2345000000000000e3");
        assert_eq!(fmt_f64(0.0), "0.0000000000000000e0");
        assert_eq!(fmt_f64(f64::NAN), "null");
    }

    #[test]
    fn output_is_json_serde_can_read() {
        let mut doc = JVal::obj();
        doc.push("s", JVal::str("line\nbreak \"q\" \\ \u{7}"))
            .push("v", real_arr(&[1.0, f64::MIN_POSITIVE, f64::MAX]));
        let text = doc.render();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["s"], "line\nbreak \"q\" \\ \u{7}");
        assert_eq!(parsed["v"][2], f64::MAX);
    }

    #[test]
    fn seal_then_check_round_trips() {
        let mut doc = JVal::obj();
        doc.push("payload", real_arr(&[3.25, -1.0]));
        let text = seal(&mut doc).unwrap();
        check_seal(&text).unwrap();

        // resealing an already sealed document gives the same bytes
        let again = seal(&mut doc).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn any_single_byte_edit_breaks_the_seal() {
        let mut doc = JVal::obj();
        doc.push("payload", JVal::str("original"));
        let text = seal(&mut doc).unwrap();
        let corrupted = text.replace("original", "originul");
        let err = check_seal(&corrupted).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");

        let missing = text.replace("checksum", "checksun");
        assert!(check_seal(&missing).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        // published test vectors for 64-bit FNV-1a
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    proptest! {
        #[test]
        fn floats_round_trip_through_parsing(x in proptest::num::f64::ANY) {
            prop_assume!(x.is_finite());
            let text = format!("{{\n  \"x\": {}\n}}\n", fmt_f64(x));
            let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(parsed["x"].as_f64().unwrap(), x);
        }

        #[test]
        fn strings_survive_escape_and_parse(s in "\\PC*") {
            let mut doc = JVal::obj();
            doc.push("s", JVal::str(s.clone()));
            let parsed: serde_json::Value =
                serde_json::from_str(&doc.render()).unwrap();
            prop_assert_eq!(parsed["s"].as_str().unwrap(), s);
        }
    }
}
