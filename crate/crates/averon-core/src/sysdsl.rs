//! The `.avsys` system description format: parser, evaluator, printer.
//!
//! A file declares states, the forcing period, parameters, the right-hand
//! side split into perturbation grades, and optionally a manifold of
//! unperturbed periodic states plus a chart (change of variables with a
//! distinguished angular time variable) in which the analysis runs.
//!
//! Grammar sketch, line oriented, `#` starts a comment:
//!
//! ```text
//! [states] x y z w
//! [period] 2*pi
//! [params] b = -1.1267, c = 150
//! [order 0]
//! <one expression per state>
//! [order 1]
//! ...
//! [manifold]
//! rho in [2, 6]          # box for a manifold coordinate
//! w = 0                  # graph component for a trailing coordinate
//! [transform]
//! vars rho z w
//! time theta
//! x = rho*sin(theta)     # old states in terms of chart vars and time
//! ```
//!
//! Expressions use `+ - * / ^` (integer powers, right associative), unary
//! minus, `sin`, `cos`, `exp`, and the constant `pi`. Identifiers resolve
//! against states, then the time symbol, then parameters.

use crate::jets::{jet_shape, Jet};
use crate::scalar::{ring_solve, Scalar};
use crate::{AvError, Result};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// AST and evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum ExprAst {
    Num(f64),
    Pi,
    Ident(String),
    Add(Box<ExprAst>, Box<ExprAst>),
    Sub(Box<ExprAst>, Box<ExprAst>),
    Mul(Box<ExprAst>, Box<ExprAst>),
    Div(Box<ExprAst>, Box<ExprAst>),
    Pow(Box<ExprAst>, i64),
    Neg(Box<ExprAst>),
    Sin(Box<ExprAst>),
    Cos(Box<ExprAst>),
    Exp(Box<ExprAst>),
}

pub struct EvalCtx<'a, T> {
    pub state_names: &'a [String],
    pub states: &'a [T],
    pub time_name: &'a str,
    pub time: Option<&'a T>,
    pub params: &'a BTreeMap<String, f64>,
}

impl ExprAst {
    pub fn eval<T: Scalar>(&self, ctx: &EvalCtx<T>) -> Result<T> {
        Ok(match self {
            ExprAst::Num(v) => T::from_f64(*v),
            ExprAst::Pi => T::from_f64(std::f64::consts::PI),
            ExprAst::Ident(name) => {
                if let Some(i) = ctx.state_names.iter().position(|s| s == name) {
                    ctx.states[i].clone()
                } else if name == ctx.time_name {
                    ctx.time
                        .ok_or_else(|| {
                            AvError::Parse(format!(
                                "time symbol `{name}` used where no time is available"
                            ))
                        })?
                        .clone()
                } else if let Some(v) = ctx.params.get(name) {
                    T::from_f64(*v)
                } else {
                    return Err(AvError::Parse(format!("unknown identifier `{name}`")));
                }
            }
            ExprAst::Add(a, b) => a.eval(ctx)?.add(&b.eval(ctx)?),
            ExprAst::Sub(a, b) => a.eval(ctx)?.sub(&b.eval(ctx)?),
            ExprAst::Mul(a, b) => a.eval(ctx)?.mul(&b.eval(ctx)?),
            ExprAst::Div(a, b) => {
                let den = b.eval(ctx)?;
                if den.value_mag() < 1e-300 {
                    return Err(AvError::Numerics(
                        "division by a value with vanishing constant part".into(),
                    ));
                }
                a.eval(ctx)?.div(&den)
            }
            ExprAst::Pow(a, n) => {
                let base = a.eval(ctx)?;
                if *n < 0 && base.value_mag() < 1e-300 {
                    return Err(AvError::Numerics(
                        "negative power of a value with vanishing constant part".into(),
                    ));
                }
                base.powi(*n)
            }
            ExprAst::Neg(a) => a.eval(ctx)?.neg(),
            ExprAst::Sin(a) => a.eval(ctx)?.sin(),
            ExprAst::Cos(a) => a.eval(ctx)?.cos(),
            ExprAst::Exp(a) => a.eval(ctx)?.exp(),
        })
    }

    fn idents(&self, out: &mut Vec<String>) {
        match self {
            ExprAst::Ident(n) => out.push(n.clone()),
            ExprAst::Add(a, b) | ExprAst::Sub(a, b) | ExprAst::Mul(a, b) | ExprAst::Div(a, b) => {
                a.idents(out);
                b.idents(out);
            }
            ExprAst::Pow(a, _)
            | ExprAst::Neg(a)
            | ExprAst::Sin(a)
            | ExprAst::Cos(a)
            | ExprAst::Exp(a) => a.idents(out),
            _ => {}
        }
    }

    /// Rendering with minimal parentheses; parses back to the same tree.
    pub fn to_text(&self) -> String {
        self.render(0)
    }

    // precedence levels: 0 add, 1 mul, 2 unary, 3 pow/atom
    fn render(&self, parent: u8) -> String {
        let (s, level) = match self {
            ExprAst::Num(v) => (format!("{v}"), 3),
            ExprAst::Pi => ("pi".to_string(), 3),
            ExprAst::Ident(n) => (n.clone(), 3),
            ExprAst::Add(a, b) => (format!("{} + {}", a.render(0), b.render(0)), 0),
            ExprAst::Sub(a, b) => (format!("{} - {}", a.render(0), b.render(1)), 0),
            ExprAst::Mul(a, b) => (format!("{}*{}", a.render(1), b.render(2)), 1),
            ExprAst::Div(a, b) => (format!("{}/{}", a.render(1), b.render(2)), 1),
            ExprAst::Pow(a, n) => {
                let base = a.render(3);
                if *n < 0 {
                    (format!("{base}^({n})"), 2)
                } else {
                    (format!("{base}^{n}"), 2)
                }
            }
            ExprAst::Neg(a) => (format!("-{}", a.render(2)), 2),
            ExprAst::Sin(a) => (format!("sin({})", a.render(0)), 3),
            ExprAst::Cos(a) => (format!("cos({})", a.render(0)), 3),
            ExprAst::Exp(a) => (format!("exp({})", a.render(0)), 3),
        };
        if level < parent {
            format!("({s})")
        } else {
            s
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenizer and expression parser
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Comma,
    Equals,
}

fn tokenize(line: &str) -> Result<Vec<Tok>> {
    let mut toks = Vec::new();
    let bytes: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' => i += 1,
            '#' => break,
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            '[' => {
                toks.push(Tok::LBracket);
                i += 1;
            }
            ']' => {
                toks.push(Tok::RBracket);
                i += 1;
            }
            '+' => {
                toks.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                toks.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                toks.push(Tok::Star);
                i += 1;
            }
            '/' => {
                toks.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                toks.push(Tok::Caret);
                i += 1;
            }
            ',' => {
                toks.push(Tok::Comma);
                i += 1;
            }
            '=' => {
                toks.push(Tok::Equals);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == '.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == 'e' || bytes[i] == 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == '+' || bytes[j] == '-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = bytes[start..i].iter().collect();
                let v = text
                    .parse::<f64>()
                    .map_err(|_| AvError::Parse(format!("bad number `{text}`")))?;
                toks.push(Tok::Num(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    i += 1;
                }
                toks.push(Tok::Ident(bytes[start..i].iter().collect()));
            }
            other => {
                return Err(AvError::Parse(format!("unexpected character `{other}`")));
            }
        }
    }
    Ok(toks)
}

struct ExprParser<'a> {
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> ExprParser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        match self.bump() {
            Some(t) if t == want => Ok(()),
            other => Err(AvError::Parse(format!("expected {want:?}, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<ExprAst> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = ExprAst::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = ExprAst::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<ExprAst> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = ExprAst::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = ExprAst::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<ExprAst> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            return Ok(ExprAst::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprAst> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            let n = self.exponent()?;
            return Ok(ExprAst::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i64> {
        // integer literal, optionally negated, optionally parenthesized
        match self.bump() {
            Some(Tok::Num(v)) => int_exponent(v),
            Some(Tok::Minus) => match self.bump() {
                Some(Tok::Num(v)) => Ok(-int_exponent(v)?),
                other => Err(AvError::Parse(format!("expected integer exponent, found {other:?}"))),
            },
            Some(Tok::LParen) => {
                let n = self.exponent()?;
                self.expect(Tok::RParen)?;
                Ok(n)
            }
            other => Err(AvError::Parse(format!("expected integer exponent, found {other:?}"))),
        }
    }

    fn atom(&mut self) -> Result<ExprAst> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(ExprAst::Num(v)),
            Some(Tok::Ident(name)) => match name.as_str() {
                "pi" => Ok(ExprAst::Pi),
                "sin" | "cos" | "exp" => {
                    self.expect(Tok::LParen)?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    Ok(match name.as_str() {
                        "sin" => ExprAst::Sin(Box::new(arg)),
                        "cos" => ExprAst::Cos(Box::new(arg)),
                        _ => ExprAst::Exp(Box::new(arg)),
                    })
                }
                _ => Ok(ExprAst::Ident(name)),
            },
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            other => Err(AvError::Parse(format!("expected expression atom, found {other:?}"))),
        }
    }
}

fn int_exponent(v: f64) -> Result<i64> {
    if v.fract() != 0.0 || v.abs() > 64.0 {
        return Err(AvError::Parse(format!("exponent must be a small integer, got {v}")));
    }
    Ok(v as i64)
}

pub fn parse_expr(text: &str) -> Result<ExprAst> {
    let toks = tokenize(text)?;
    let mut p = ExprParser { toks: &toks, pos: 0 };
    let e = p.expr()?;
    if p.pos != toks.len() {
        return Err(AvError::Parse(format!(
            "trailing tokens after expression in `{text}`"
        )));
    }
    Ok(e)
}

fn const_eval(e: &ExprAst, params: &BTreeMap<String, f64>) -> Result<f64> {
    let ctx = EvalCtx::<f64> {
        state_names: &[],
        states: &[],
        time_name: "",
        time: None,
        params,
    };
    e.eval(&ctx)
}

// ---------------------------------------------------------------------------
// System definition
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ManifoldDef {
    /// Number of manifold coordinates m; they are the first m states.
    pub dim: usize,
    pub boxes: Vec<(f64, f64)>,
    /// Graph components for the trailing n - m coordinates.
    pub graph: Vec<ExprAst>,
}

#[derive(Clone, Debug)]
struct RawTransform {
    vars: Vec<String>,
    time_var: String,
    map: Vec<ExprAst>,
}

#[derive(Clone, Debug)]
enum RhsKind {
    Graded(Vec<Vec<ExprAst>>),
    /// The system was rewritten into chart variables: the Cartesian field is
    /// evaluated at the chart image and pulled back through the chart
    /// Jacobian, with the chart's time variable as the new independent
    /// variable.
    Chart { cart: Box<SystemDef>, map: Vec<ExprAst> },
}

#[derive(Clone, Debug)]
pub struct SystemDef {
    pub state_names: Vec<String>,
    pub time_name: String,
    pub period: f64,
    /// Highest stored perturbation grade k (grades 0..=k present).
    pub grade_count: usize,
    /// Whether grades beyond `grade_count` vanish identically. True for
    /// graded files; false once a chart division has mixed all orders.
    pub exact_grading: bool,
    pub params: BTreeMap<String, f64>,
    pub manifold: Option<ManifoldDef>,
    rhs: RhsKind,
    pending_transform: Option<RawTransform>,
    pending_manifold: Option<Vec<(String, ManifoldLine)>>,
}

#[derive(Clone, Debug)]
enum ManifoldLine {
    Box(f64, f64),
    Graph(ExprAst),
}

impl SystemDef {
    pub fn dim(&self) -> usize {
        self.state_names.len()
    }

    pub fn manifold_dim(&self) -> usize {
        self.manifold.as_ref().map_or(self.dim(), |m| m.dim)
    }

    pub fn needs_standard_form(&self) -> bool {
        self.pending_transform.is_some() || self.pending_manifold.is_some()
    }

    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(AvError::Parse(format!("unknown parameter `{name}`")));
        }
        self.params.insert(name.to_string(), value);
        if let RhsKind::Chart { cart, .. } = &mut self.rhs {
            cart.set_param(name, value)?;
        }
        Ok(())
    }

    /// Full right-hand side at a concrete time, generic over the coefficient
    /// tower carried by the states and the perturbation parameter.
    pub fn eval_rhs<T: Scalar>(&self, t: f64, x: &[T], eps: &T) -> Result<Vec<T>> {
        assert_eq!(x.len(), self.dim());
        match &self.rhs {
            RhsKind::Graded(orders) => {
                let tval = T::from_f64(t);
                let ctx = EvalCtx {
                    state_names: &self.state_names,
                    states: x,
                    time_name: &self.time_name,
                    time: Some(&tval),
                    params: &self.params,
                };
                // Horner in eps across grades
                let top = orders.len() - 1;
                let mut acc: Vec<T> =
                    orders[top].iter().map(|e| e.eval(&ctx)).collect::<Result<_>>()?;
                for grade in (0..top).rev() {
                    for (j, slot) in acc.iter_mut().enumerate() {
                        let base = orders[grade][j].eval(&ctx)?;
                        *slot = slot.mul(eps).add(&base);
                    }
                }
                Ok(acc)
            }
            RhsKind::Chart { cart, map } => {
                let nv = self.dim();
                let shape = jet_shape(nv + 1, 1);
                let jx: Vec<Jet<T>> = x
                    .iter()
                    .enumerate()
                    .map(|(j, v)| Jet::variable(&shape, v.clone(), j))
                    .collect();
                let jt = Jet::variable(&shape, T::from_f64(t), nv);
                let ctx = EvalCtx {
                    state_names: &self.state_names,
                    states: &jx,
                    time_name: &self.time_name,
                    time: Some(&jt),
                    params: &self.params,
                };
                let phi: Vec<Jet<T>> =
                    map.iter().map(|e| e.eval(&ctx)).collect::<Result<_>>()?;

                let vals: Vec<T> = phi.iter().map(|p| p.value()).collect();
                let jeps = Jet::constant(eps.clone());
                let g = cart.eval_rhs(0.0, &vals, eps)?;

                // chart Jacobian [d phi/d vars | d phi/d time] * (vdot, tdot) = g
                let _ = jeps;
                let mut jmat = Vec::with_capacity(nv + 1);
                let mut rhs = Vec::with_capacity(nv + 1);
                for (i, p) in phi.iter().enumerate() {
                    let mut row = Vec::with_capacity(nv + 1);
                    for d in 0..=nv {
                        let mut e = vec![0u8; nv + 1];
                        e[d] = 1;
                        row.push(p.coeff(&e));
                    }
                    jmat.push(row);
                    rhs.push(vec![g[i].clone()]);
                }
                let v = ring_solve(&jmat, &rhs)?;
                let tdot = v[nv][0].clone();
                if tdot.value_mag() < 1e-8 {
                    return Err(AvError::Numerics(
                        "chart time derivative vanishes; chart is degenerate here".into(),
                    ));
                }
                let tinv = tdot.inv();
                Ok((0..nv).map(|j| v[j][0].mul(&tinv)).collect())
            }
        }
    }

    /// Point on the manifold: the chart of `alpha` through the graph map.
    pub fn chart_point(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let m = self.manifold_dim();
        assert_eq!(alpha.len(), m);
        let mut z = alpha.to_vec();
        if let Some(mf) = &self.manifold {
            let names = &self.state_names[..m];
            let ctx = EvalCtx::<f64> {
                state_names: names,
                states: alpha,
                time_name: "",
                time: None,
                params: &self.params,
            };
            for g in &mf.graph {
                z.push(g.eval(&ctx)?);
            }
        }
        Ok(z)
    }

    /// Jets of the chart map `alpha -> (alpha, beta(alpha))`.
    pub fn chart_jets(&self, alpha0: &[f64], order: usize) -> Result<Vec<Jet<f64>>> {
        let m = self.manifold_dim();
        let shape = jet_shape(m, order);
        let avars: Vec<Jet<f64>> = alpha0
            .iter()
            .enumerate()
            .map(|(j, &v)| Jet::variable(&shape, v, j))
            .collect();
        let mut out = avars.clone();
        if let Some(mf) = &self.manifold {
            let names = &self.state_names[..m];
            let ctx = EvalCtx {
                state_names: names,
                states: &avars,
                time_name: "",
                time: None,
                params: &self.params,
            };
            for g in &mf.graph {
                out.push(g.eval(&ctx)?);
            }
        }
        Ok(out)
    }

    /// Deterministic sample points used by the consistency spot checks.
    fn sample_states(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..5)
            .map(|_| (0..n).map(|_| 0.2 + 1.3 * next()).collect())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// File parsing
// ---------------------------------------------------------------------------

pub fn parse_system(text: &str) -> Result<SystemDef> {
    #[derive(PartialEq)]
    enum Section {
        None,
        States,
        Period,
        Params,
        Order(usize),
        Manifold,
        Transform,
    }

    let mut states: Vec<String> = Vec::new();
    let mut period_expr: Option<ExprAst> = None;
    let mut params: BTreeMap<String, f64> = BTreeMap::new();
    let mut orders: Vec<(usize, Vec<ExprAst>)> = Vec::new();
    let mut manifold_lines: Vec<(String, ManifoldLine)> = Vec::new();
    let mut tf_vars: Vec<String> = Vec::new();
    let mut tf_time: Option<String> = None;
    let mut tf_map: Vec<(String, ExprAst)> = Vec::new();
    let mut have_transform = false;

    let mut section = Section::None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| AvError::Parse(format!("line {}: {msg}", lineno + 1));

        if line.starts_with('[') {
            let close = line
                .find(']')
                .ok_or_else(|| err("malformed section header".into()))?;
            let inner = line[1..close].trim();
            let rest = line[close + 1..].trim();
            let mut parts = inner.split_whitespace();
            section = match parts.next() {
                Some("states") => {
                    // state names may follow on the same line
                    for name in rest.split_whitespace() {
                        states.push(name.to_string());
                    }
                    Section::States
                }
                Some("period") => {
                    if !rest.is_empty() {
                        period_expr = Some(parse_expr(rest).map_err(|e| err(e.to_string()))?);
                    }
                    Section::Period
                }
                Some("params") => {
                    if !rest.is_empty() {
                        parse_params_line(rest, &mut params).map_err(|e| err(e.to_string()))?;
                    }
                    Section::Params
                }
                Some("order") => {
                    let n: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err("[order N] needs a grade number".into()))?;
                    orders.push((n, Vec::new()));
                    Section::Order(n)
                }
                Some("manifold") => Section::Manifold,
                Some("transform") => {
                    have_transform = true;
                    Section::Transform
                }
                other => return Err(err(format!("unknown section {other:?}"))),
            };
            continue;
        }

        match &section {
            Section::None => return Err(err("content before any section header".into())),
            Section::States => {
                for name in line.split_whitespace() {
                    states.push(name.to_string());
                }
            }
            Section::Period => {
                if period_expr.is_some() {
                    return Err(err("duplicate period".into()));
                }
                period_expr = Some(parse_expr(line).map_err(|e| err(e.to_string()))?);
            }
            Section::Params => {
                parse_params_line(line, &mut params).map_err(|e| err(e.to_string()))?;
            }
            Section::Order(_) => {
                let e = parse_expr(line).map_err(|e| err(e.to_string()))?;
                orders.last_mut().unwrap().1.push(e);
            }
            Section::Manifold => {
                // either `name in [lo, hi]` or `name = expr`
                let toks = tokenize(line).map_err(|e| err(e.to_string()))?;
                match toks.as_slice() {
                    [Tok::Ident(name), Tok::Ident(kw), rest @ ..] if kw == "in" => {
                        let (lo, hi) = parse_box(rest).map_err(|e| err(e.to_string()))?;
                        let lo = const_eval(&lo, &params).map_err(|e| err(e.to_string()))?;
                        let hi = const_eval(&hi, &params).map_err(|e| err(e.to_string()))?;
                        if lo >= hi {
                            return Err(err(format!("empty box for `{name}`")));
                        }
                        manifold_lines.push((name.clone(), ManifoldLine::Box(lo, hi)));
                    }
                    [Tok::Ident(name), Tok::Equals, ..] => {
                        let rhs = line.split_once('=').unwrap().1;
                        let e = parse_expr(rhs).map_err(|e| err(e.to_string()))?;
                        manifold_lines.push((name.clone(), ManifoldLine::Graph(e)));
                    }
                    _ => return Err(err(format!("bad manifold line `{line}`"))),
                }
            }
            Section::Transform => {
                if let Some(rest) = line.strip_prefix("vars ") {
                    tf_vars = rest.split_whitespace().map(str::to_string).collect();
                } else if let Some(rest) = line.strip_prefix("time ") {
                    tf_time = Some(rest.trim().to_string());
                } else if let Some((lhs, rhs)) = line.split_once('=') {
                    let e = parse_expr(rhs).map_err(|e| err(e.to_string()))?;
                    tf_map.push((lhs.trim().to_string(), e));
                } else {
                    return Err(err(format!("bad transform line `{line}`")));
                }
            }
        }
    }

    // assemble
    if states.is_empty() {
        return Err(AvError::Parse("no [states] section".into()));
    }
    if states.len() != states.iter().collect::<std::collections::BTreeSet<_>>().len() {
        return Err(AvError::Parse("duplicate state names".into()));
    }
    let period_expr =
        period_expr.ok_or_else(|| AvError::Parse("no [period] section".into()))?;
    let period = const_eval(&period_expr, &params)?;
    if !(period.is_finite() && period > 0.0) {
        return Err(AvError::Parse(format!("period must be positive, got {period}")));
    }

    orders.sort_by_key(|(n, _)| *n);
    if orders.is_empty() {
        return Err(AvError::Parse("no [order N] sections".into()));
    }
    for (want, (n, exprs)) in orders.iter().enumerate() {
        if *n != want {
            return Err(AvError::Parse(format!(
                "perturbation grades must be contiguous from 0; missing grade {want}"
            )));
        }
        if exprs.len() != states.len() {
            return Err(AvError::Parse(format!(
                "[order {n}] has {} expressions for {} states",
                exprs.len(),
                states.len()
            )));
        }
    }
    let grade_count = orders.len() - 1;
    let grades: Vec<Vec<ExprAst>> = orders.into_iter().map(|(_, e)| e).collect();

    let time_name = if have_transform { String::new() } else { "t".to_string() };

    // identifier validation on the Cartesian side
    let known_time = if have_transform { None } else { Some("t") };
    for grade in &grades {
        for e in grade {
            let mut ids = Vec::new();
            e.idents(&mut ids);
            for id in ids {
                let ok = states.contains(&id)
                    || params.contains_key(&id)
                    || known_time == Some(id.as_str());
                if !ok {
                    return Err(AvError::Parse(format!(
                        "unknown identifier `{id}` in system right-hand side"
                    )));
                }
            }
        }
    }

    let pending_transform = if have_transform {
        let time_var = tf_time
            .ok_or_else(|| AvError::Parse("[transform] needs a `time` line".into()))?;
        if tf_vars.is_empty() {
            return Err(AvError::Parse("[transform] needs a `vars` line".into()));
        }
        if tf_vars.len() + 1 != states.len() {
            return Err(AvError::Parse(format!(
                "chart must trade one state for time: {} vars + time != {} states",
                tf_vars.len(),
                states.len()
            )));
        }
        // map lines must cover the states exactly, in order
        if tf_map.len() != states.len() {
            return Err(AvError::Parse(format!(
                "[transform] defines {} of {} states",
                tf_map.len(),
                states.len()
            )));
        }
        for (given, want) in tf_map.iter().zip(&states) {
            if &given.0 != want {
                return Err(AvError::Parse(format!(
                    "transform lines must follow state order; expected `{want}`, found `{}`",
                    given.0
                )));
            }
        }
        let map: Vec<ExprAst> = tf_map.into_iter().map(|(_, e)| e).collect();
        for e in &map {
            let mut ids = Vec::new();
            e.idents(&mut ids);
            for id in ids {
                let ok = tf_vars.contains(&id) || id == time_var || params.contains_key(&id);
                if !ok {
                    return Err(AvError::Parse(format!(
                        "unknown identifier `{id}` in transform map"
                    )));
                }
            }
        }
        Some(RawTransform { vars: tf_vars, time_var, map })
    } else {
        None
    };

    let sys = SystemDef {
        state_names: states,
        time_name,
        period,
        grade_count,
        exact_grading: true,
        params,
        manifold: None,
        rhs: RhsKind::Graded(grades),
        pending_transform,
        pending_manifold: if manifold_lines.is_empty() {
            None
        } else {
            Some(manifold_lines)
        },
    };
    Ok(sys)
}

fn parse_params_line(line: &str, params: &mut BTreeMap<String, f64>) -> Result<()> {
    for piece in line.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let (name, rhs) = piece
            .split_once('=')
            .ok_or_else(|| AvError::Parse(format!("expected `name = value` in `{piece}`")))?;
        let name = name.trim().to_string();
        let e = parse_expr(rhs.trim())?;
        let v = const_eval(&e, params)?;
        params.insert(name, v);
    }
    Ok(())
}

fn parse_box(toks: &[Tok]) -> Result<(ExprAst, ExprAst)> {
    // [ expr , expr ]
    if toks.first() != Some(&Tok::LBracket) || toks.last() != Some(&Tok::RBracket) {
        return Err(AvError::Parse("box must be `[lo, hi]`".into()));
    }
    let inner = &toks[1..toks.len() - 1];
    let comma = inner
        .iter()
        .position(|t| *t == Tok::Comma)
        .ok_or_else(|| AvError::Parse("box needs two comma-separated bounds".into()))?;
    let mut lo = ExprParser { toks: &inner[..comma], pos: 0 };
    let mut hi = ExprParser { toks: &inner[comma + 1..], pos: 0 };
    let le = lo.expr()?;
    let he = hi.expr()?;
    if lo.pos != comma || hi.pos != inner.len() - comma - 1 {
        return Err(AvError::Parse("trailing tokens in box bounds".into()));
    }
    Ok((le, he))
}

// ---------------------------------------------------------------------------
// Standard form
// ---------------------------------------------------------------------------

/// Rewrites the system into its analysis coordinates: applies the declared
/// chart (if any), attaches the manifold, and runs structural spot checks
/// (time periodicity of the right-hand side; chart nondegeneracy).
pub fn to_standard_form(sys: &SystemDef) -> Result<SystemDef> {
    let mut out = match &sys.pending_transform {
        None => {
            let mut s = sys.clone();
            s.pending_manifold = None;
            s
        }
        Some(tf) => {
            let mut cart = sys.clone();
            cart.pending_transform = None;
            cart.pending_manifold = None;
            // the chart substitutes its own time for the Cartesian clock, so
            // the Cartesian field must not reference time
            if let RhsKind::Graded(grades) = &cart.rhs {
                for e in grades.iter().flatten() {
                    let mut ids = Vec::new();
                    e.idents(&mut ids);
                    if ids.iter().any(|i| i == "t") {
                        return Err(AvError::Parse(
                            "chart rewriting requires an autonomous system".into(),
                        ));
                    }
                }
            }
            SystemDef {
                state_names: tf.vars.clone(),
                time_name: tf.time_var.clone(),
                period: sys.period,
                grade_count: sys.grade_count,
                // the chart's time-derivative division mixes all grades
                exact_grading: false,
                params: sys.params.clone(),
                manifold: None,
                rhs: RhsKind::Chart { cart: Box::new(cart), map: tf.map.clone() },
                pending_transform: None,
                pending_manifold: None,
            }
        }
    };

    // attach manifold (coordinates refer to the analysis states)
    if let Some(lines) = &sys.pending_manifold {
        let n = out.dim();
        let mut boxes = Vec::new();
        let mut graph = Vec::new();
        let mut seen_graph = false;
        for (i, (name, line)) in lines.iter().enumerate() {
            if i >= n {
                return Err(AvError::Parse("more manifold lines than states".into()));
            }
            if name != &out.state_names[i] {
                return Err(AvError::Parse(format!(
                    "manifold lines must follow state order; expected `{}`, found `{name}`",
                    out.state_names[i]
                )));
            }
            match line {
                ManifoldLine::Box(lo, hi) => {
                    if seen_graph {
                        return Err(AvError::Parse(
                            "manifold coordinates must precede graph components".into(),
                        ));
                    }
                    boxes.push((*lo, *hi));
                }
                ManifoldLine::Graph(e) => {
                    seen_graph = true;
                    graph.push(e.clone());
                }
            }
        }
        if boxes.len() + graph.len() != n {
            return Err(AvError::Parse(format!(
                "manifold must constrain every state: {} of {n} covered",
                boxes.len() + graph.len()
            )));
        }
        let m = boxes.len();
        // graph components may reference manifold coordinates and params only
        for e in &graph {
            let mut ids = Vec::new();
            e.idents(&mut ids);
            for id in ids {
                let ok = out.state_names[..m].contains(&id) || out.params.contains_key(&id);
                if !ok {
                    return Err(AvError::Parse(format!(
                        "unknown identifier `{id}` in manifold graph"
                    )));
                }
            }
        }
        out.manifold = Some(ManifoldDef { dim: m, boxes, graph });
    }

    // spot checks; small eps keeps chart denominators comfortably nonzero
    // while still exposing any grade's time dependence
    let samples = out.sample_states();
    let eps_samples = [0.0, 1e-3];
    for x in &samples {
        for &eps in &eps_samples {
            let a = out.eval_rhs(0.37, x, &eps)?;
            let b = out.eval_rhs(0.37 + out.period, x, &eps)?;
            let scale = a.iter().map(|v| v.abs()).fold(1.0_f64, f64::max);
            for (u, v) in a.iter().zip(&b) {
                if (u - v).abs() > 1e-10 * scale {
                    return Err(AvError::Parse(format!(
                        "right-hand side is not period-{} in time (drift {:.3e})",
                        out.period,
                        (u - v).abs()
                    )));
                }
            }
        }
    }

    Ok(out)
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

/// Canonical text form; `parse_system` of the output reproduces the same
/// definition. Only pre-standardization systems (with their raw transform
/// still attached) can be printed.
pub fn print_system(sys: &SystemDef) -> String {
    let mut out = String::new();
    out.push_str(&format!("[states] {}\n", sys.state_names.join(" ")));
    out.push_str(&format!("[period] {}\n", sys.period));
    if !sys.params.is_empty() {
        let body = sys
            .params
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        out.push_str(&format!("[params] {body}\n"));
    }
    if let RhsKind::Graded(grades) = &sys.rhs {
        for (i, grade) in grades.iter().enumerate() {
            out.push_str(&format!("\n[order {i}]\n"));
            for e in grade {
                out.push_str(&e.to_text());
                out.push('\n');
            }
        }
    }
    if let Some(lines) = &sys.pending_manifold {
        out.push_str("\n[manifold]\n");
        for (name, line) in lines {
            match line {
                ManifoldLine::Box(lo, hi) => {
                    out.push_str(&format!("{name} in [{lo}, {hi}]\n"));
                }
                ManifoldLine::Graph(e) => {
                    out.push_str(&format!("{name} = {}\n", e.to_text()));
                }
            }
        }
    }
    if let Some(tf) = &sys.pending_transform {
        out.push_str("\n[transform]\n");
        out.push_str(&format!("vars {}\n", tf.vars.join(" ")));
        out.push_str(&format!("time {}\n", tf.time_var));
        for (name, e) in sys.state_names.iter().zip(&tf.map) {
            out.push_str(&format!("{name} = {}\n", e.to_text()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "\
# harmonic oscillator with weak cubic damping
[states] x y
[period] 2*pi
[params] a = 1/4

[order 0]
y
-x

[order 1]
0
a*y - y^3
";

    #[test]
    fn parses_and_evaluates_grades() {
        let sys = parse_system(TINY).unwrap();
        assert_eq!(sys.state_names, vec!["x", "y"]);
        assert_eq!(sys.grade_count, 1);
        assert!((sys.period - 2.0 * std::f64::consts::PI).abs() < 1e-15);
        let rhs = sys.eval_rhs(0.0, &[1.0, 2.0], &0.0).unwrap();
        assert_eq!(rhs, vec![2.0, -1.0]);
        let rhs = sys.eval_rhs(0.0, &[1.0, 2.0], &1.0).unwrap();
        assert_eq!(rhs, vec![2.0, -1.0 + 0.5 - 8.0]);
    }

    #[test]
    fn print_parse_round_trip() {
        let sys = parse_system(TINY).unwrap();
        let text = print_system(&sys);
        let sys2 = parse_system(&text).unwrap();
        assert_eq!(sys.state_names, sys2.state_names);
        let a = sys.eval_rhs(0.3, &[0.7, -1.1], &0.25).unwrap();
        let b = sys2.eval_rhs(0.3, &[0.7, -1.1], &0.25).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn expression_precedence_and_powers() {
        let e = parse_expr("2 + 3*x^2 - -y").unwrap();
        let names = vec!["x".to_string(), "y".to_string()];
        let ctx = EvalCtx::<f64> {
            state_names: &names,
            states: &[2.0, 5.0],
            time_name: "t",
            time: None,
            params: &BTreeMap::new(),
        };
        assert_eq!(e.eval(&ctx).unwrap(), 2.0 + 12.0 + 5.0);
        let e2 = parse_expr("x^(-2)").unwrap();
        assert_eq!(e2.eval(&ctx).unwrap(), 0.25);
        // unary minus binds tighter than * on the right operand
        let e3 = parse_expr("2*-3").unwrap();
        let empty = EvalCtx::<f64> {
            state_names: &[],
            states: &[],
            time_name: "",
            time: None,
            params: &BTreeMap::new(),
        };
        assert_eq!(e3.eval(&empty).unwrap(), -6.0);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(parse_system("").is_err());
        assert!(parse_system("[states] x\n[period] 1\n[order 0]\nx\n[order 2]\nx\n").is_err());
        assert!(parse_system("[states] x\n[period] 1\n[order 0]\nx + q\n").is_err());
        assert!(parse_system("[states] x\n[period] 0\n[order 0]\nx\n").is_err());
        assert!(parse_system("[states] x x\n[period] 1\n[order 0]\nx\n").is_err());
    }

    const CHARTED: &str = "\
[states] x y
[period] 2*pi
[params] k = 2

[order 0]
-k*y
k*x

[order 1]
x^2
0

[manifold]
rho in [1/2, 2]

[transform]
vars rho
time theta
x = rho*cos(theta)
y = rho*sin(theta)
";

    #[test]
    fn chart_rewriting_matches_hand_computation() {
        let sys = parse_system(CHARTED).unwrap();
        assert!(sys.needs_standard_form());
        let std = to_standard_form(&sys).unwrap();
        assert_eq!(std.state_names, vec!["rho"]);
        assert_eq!(std.manifold_dim(), 1);

        // xdot = -k y + eps x^2, ydot = k x:
        // rhodot = (x xdot + y ydot)/rho = eps x^2 cos,
        // thetadot = (ydot x - xdot y)/rho^2 = k - eps x^2 sin/rho.
        // d rho/d theta at theta, rho: eps rho^2 cos^3 / (k - eps rho cos^2 sin)
        let theta = 0.8_f64;
        let rho = 1.3_f64;
        let eps = 0.2_f64;
        let k = 2.0;
        let got = std.eval_rhs(theta, &[rho], &eps).unwrap()[0];
        let c = theta.cos();
        let s = theta.sin();
        let want = eps * rho * rho * c * c * c / (k - eps * rho * c * c * s);
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");

        // unperturbed chart motion is a pure rotation
        let g0 = std.eval_rhs(theta, &[rho], &0.0).unwrap()[0];
        assert!(g0.abs() < 1e-14);
    }

    #[test]
    fn chart_system_accepts_series_states() {
        use crate::eps_series::EpsSeries;
        let sys = parse_system(CHARTED).unwrap();
        let std = to_standard_form(&sys).unwrap();
        let rho = EpsSeries::new(vec![1.3, 0.0, 0.0]);
        let eps = EpsSeries::<f64>::eps(2);
        let out = std.eval_rhs(0.8, &[rho], &eps).unwrap();
        // grade 0 vanishes, grade 1 matches the f64 computation's derivative
        assert!(out[0].coeff(0).abs() < 1e-14);
        let c = 0.8_f64.cos();
        let want1 = 1.3 * 1.3 * c * c * c / 2.0;
        assert!((out[0].coeff(1) - want1).abs() < 1e-13);
    }

    #[test]
    fn manifold_graph_and_chart_point() {
        let text = "\
[states] u v
[period] 1
[order 0]
v
0
[manifold]
u in [0, 1]
v = u^2
";
        let sys = parse_system(text).unwrap();
        let std = to_standard_form(&sys).unwrap();
        assert_eq!(std.manifold_dim(), 1);
        let z = std.chart_point(&[0.5]).unwrap();
        assert_eq!(z, vec![0.5, 0.25]);
        let jets = std.chart_jets(&[0.5], 2).unwrap();
        assert_eq!(jets[1].extract(&[1]), 1.0); // d(u^2)/du = 2u = 1
        assert_eq!(jets[1].extract(&[2]), 2.0);
    }

    #[test]
    fn nonperiodic_rhs_is_rejected() {
        let text = "\
[states] x
[period] 1
[order 0]
sin(t)*x
";
        let sys = parse_system(text).unwrap();
        assert!(to_standard_form(&sys).is_err());
    }

    fn fixture(name: &str) -> SystemDef {
        let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        let text = std::fs::read_to_string(path).unwrap();
        to_standard_form(&parse_system(&text).unwrap()).unwrap()
    }

    #[test]
    fn resonant_pair_fixture_spot_values() {
        let sys = fixture("resonant_pair.avsys");
        assert_eq!(sys.state_names, vec!["rho", "r", "alpha"]);
        assert_eq!(sys.manifold_dim(), 3);
        assert_eq!(sys.grade_count, 2);
        assert!(!sys.exact_grading);

        // unperturbed chart motion freezes completely
        let g0 = sys.eval_rhs(0.7, &[1.1, 0.9, 1.3], &0.0).unwrap();
        for v in &g0 {
            assert!(v.abs() < 1e-14);
        }
        // values pinned from an independent Cartesian-side computation
        let g = sys.eval_rhs(0.7, &[1.1, 0.9, 1.3], &0.02).unwrap();
        let want = [
            -1.6338099597214756e-03,
            9.3943774262257530e-04,
            7.3119571586606489e-03,
        ];
        for (u, v) in g.iter().zip(&want) {
            assert!((u - v).abs() < 1e-14, "{u} vs {v}");
        }
    }

    #[test]
    fn damped_axis_fixture_spot_values() {
        let sys = fixture("damped_axis.avsys");
        assert_eq!(sys.state_names, vec!["rho", "z", "w"]);
        assert_eq!(sys.manifold_dim(), 2);
        assert_eq!(sys.grade_count, 1);

        // unperturbed motion contracts the damped axis only
        let g0 = sys.eval_rhs(0.7, &[4.2, 1.1, 0.4], &0.0).unwrap();
        assert!(g0[0].abs() < 1e-14);
        assert!(g0[1].abs() < 1e-14);
        assert!((g0[2] - (-0.4)).abs() < 1e-14);

        let g = sys.eval_rhs(0.7, &[4.2, 1.1, 0.4], &0.02).unwrap();
        let want = [
            -7.9357242747795953e-01,
            -5.4734573644925033e-01,
            -1.1527239593240601e+00,
        ];
        for (u, v) in g.iter().zip(&want) {
            assert!((u - v).abs() < 1e-13, "{u} vs {v}");
        }

        let z = sys.chart_point(&[4.0, 1.0]).unwrap();
        assert_eq!(z, vec![4.0, 1.0, 0.0]);
    }

    #[test]
    fn param_override_reaches_chart_interior() {
        let sys = parse_system(CHARTED).unwrap();
        let mut std = to_standard_form(&sys).unwrap();
        std.set_param("k", 4.0).unwrap();
        let got = std.eval_rhs(0.8, &[1.3], &0.2).unwrap()[0];
        let c = 0.8_f64.cos();
        let s = 0.8_f64.sin();
        let want = 0.2 * 1.3 * 1.3 * c * c * c / (4.0 - 0.2 * 1.3 * c * c * s);
        assert!((got - want).abs() < 1e-13);
        assert!(std.set_param("nope", 1.0).is_err());
    }
}
