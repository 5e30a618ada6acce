//! Closed-form expressions for function-valued model parameters.
//!
//! Grammar (usual precedence, `^` right-associative):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | variable | func '(' expr ')' | 'dot' '(' number, .. ')' | '(' expr ')'
//! ```
//!
//! Functions on the simplex use the variables `r1 .. rd`; functions of one
//! real argument use `w`. `dot(c1, .., cd)` expands to `c1*r1 + .. + cd*rd`.
//! Available functions: `exp`, `log` (alias `ln`), `sqrt`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// `r1 .. rd`, coordinates of a point of the simplex.
    Simplex(usize),
    /// A single real variable `w`.
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sqrt(Box<Expr>),
}

fn c(v: f64) -> Expr {
    Expr::Const(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => c(x + y),
        (Expr::Const(x), _) if *x == 0.0 => b,
        (_, Expr::Const(y)) if *y == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => c(x - y),
        (_, Expr::Const(y)) if *y == 0.0 => a,
        (Expr::Const(x), _) if *x == 0.0 => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => c(x * y),
        (Expr::Const(x), _) | (_, Expr::Const(x)) if *x == 0.0 => c(0.0),
        (Expr::Const(x), _) if *x == 1.0 => b,
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => c(x / y),
        (Expr::Const(x), _) if *x == 0.0 => c(0.0),
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(x) => c(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => c(x.powf(*y)),
        (_, Expr::Const(y)) if *y == 1.0 => a,
        (_, Expr::Const(y)) if *y == 0.0 => c(1.0),
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

impl Expr {
    pub fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(i) => vars[*i],
            Expr::Add(a, b) => a.eval(vars) + b.eval(vars),
            Expr::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Expr::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Expr::Div(a, b) => a.eval(vars) / b.eval(vars),
            Expr::Neg(a) => -a.eval(vars),
            Expr::Pow(a, b) => {
                let base = a.eval(vars);
                match **b {
                    Expr::Const(e) if e == e.round() && e.abs() <= 64.0 => base.powi(e as i32),
                    _ => base.powf(b.eval(vars)),
                }
            }
            Expr::Exp(a) => a.eval(vars).exp(),
            Expr::Log(a) => a.eval(vars).ln(),
            Expr::Sqrt(a) => a.eval(vars).sqrt(),
        }
    }

    /// Symbolic partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => c(0.0),
            Expr::Var(i) => c(if *i == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Expr::Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Expr::Mul(a, b) => add(
                mul(a.derivative(var), (**b).clone()),
                mul((**a).clone(), b.derivative(var)),
            ),
            Expr::Div(a, b) => div(
                sub(
                    mul(a.derivative(var), (**b).clone()),
                    mul((**a).clone(), b.derivative(var)),
                ),
                pow((**b).clone(), c(2.0)),
            ),
            Expr::Neg(a) => neg(a.derivative(var)),
            Expr::Pow(a, b) => {
                let da = a.derivative(var);
                if let Expr::Const(e) = **b {
                    mul(mul(c(e), pow((**a).clone(), c(e - 1.0))), da)
                } else {
                    let db = b.derivative(var);
                    mul(
                        self.clone(),
                        add(
                            mul(db, Expr::Log(a.clone())),
                            div(mul((**b).clone(), da), (**a).clone()),
                        ),
                    )
                }
            }
            Expr::Exp(a) => mul(self.clone(), a.derivative(var)),
            Expr::Log(a) => div(a.derivative(var), (**a).clone()),
            Expr::Sqrt(a) => div(a.derivative(var), mul(c(2.0), self.clone())),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Const(_) => true,
            Expr::Var(_) => false,
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.is_constant() && b.is_constant(),
            Expr::Neg(a) | Expr::Exp(a) | Expr::Log(a) | Expr::Sqrt(a) => a.is_constant(),
        }
    }
}

/// A parsed expression together with its source text and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    source: String,
    domain: Domain,
    expr: Expr,
}

impl Function {
    pub fn parse(source: &str, domain: Domain) -> Result<Self> {
        let expr = Parser::new(source, domain)?.parse_all()?;
        Ok(Self {
            source: source.to_string(),
            domain,
            expr,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.expr.eval(vars)
    }

    /// Evaluates a function of the scalar variable `w`.
    pub fn eval1(&self, w: f64) -> f64 {
        self.expr.eval(&[w])
    }

    pub fn derivative(&self, var: usize) -> Function {
        Function {
            source: format!("d/d{}({})", var_name(self.domain, var), self.source),
            domain: self.domain,
            expr: self.expr.derivative(var),
        }
    }
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn var_name(domain: Domain, var: usize) -> String {
    match domain {
        Domain::Simplex(_) => format!("r{}", var + 1),
        Domain::Scalar => "w".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let ch = bytes[i] as char;
        if ch.is_ascii_whitespace() {
            i += 1;
        } else if ch.is_ascii_digit() || ch == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let value: f64 = text
                .parse()
                .map_err(|_| Error::Expression(format!("bad number '{text}' at offset {start}")))?;
            tokens.push((start, Token::Num(value)));
        } else if ch.is_ascii_alphabetic() || ch == '_' {
            let start = i;
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            tokens.push((start, Token::Ident(src[start..i].to_string())));
        } else {
            let tok = match ch {
                '+' | '-' | '*' | '/' | '^' => Token::Op(ch),
                '(' => Token::LParen,
                ')' => Token::RParen,
                ',' => Token::Comma,
                _ => {
                    return Err(Error::Expression(format!(
                        "unexpected character '{ch}' at offset {i}"
                    )))
                }
            };
            tokens.push((i, tok));
            i += 1;
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    domain: Domain,
    len: usize,
}

impl Parser {
    fn new(src: &str, domain: Domain) -> Result<Self> {
        Ok(Self {
            tokens: tokenize(src)?,
            pos: 0,
            domain,
            len: src.len(),
        })
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.len, |(o, _)| *o)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Token) -> Result<()> {
        let at = self.offset();
        match self.next() {
            Some(t) if t == want => Ok(()),
            Some(t) => Err(Error::Expression(format!(
                "expected {want:?}, found {t:?} at offset {at}"
            ))),
            None => Err(Error::Expression(format!(
                "expected {want:?} at end of input"
            ))),
        }
    }

    fn parse_all(mut self) -> Result<Expr> {
        if self.tokens.is_empty() {
            return Err(Error::Expression("empty expression".into()));
        }
        let e = self.expr()?;
        if self.pos < self.tokens.len() {
            return Err(Error::Expression(format!(
                "trailing input at offset {}",
                self.offset()
            )));
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                add(lhs, rhs)
            } else {
                sub(lhs, rhs)
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                mul(lhs, rhs)
            } else {
                div(lhs, rhs)
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(neg(self.unary()?));
        }
        if let Some(Token::Op('+')) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(pow(base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let at = self.offset();
        match self.next() {
            Some(Token::Num(v)) => Ok(c(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(e)
            }
            Some(Token::Ident(name)) => self.ident(&name, at),
            Some(t) => Err(Error::Expression(format!(
                "unexpected {t:?} at offset {at}"
            ))),
            None => Err(Error::Expression("unexpected end of input".into())),
        }
    }

    fn ident(&mut self, name: &str, at: usize) -> Result<Expr> {
        match name {
            "exp" | "log" | "ln" | "sqrt" => {
                self.expect(Token::LParen)?;
                let arg = Box::new(self.expr()?);
                self.expect(Token::RParen)?;
                let e = match name {
                    "exp" => Expr::Exp(arg),
                    "sqrt" => Expr::Sqrt(arg),
                    _ => Expr::Log(arg),
                };
                Ok(if e.is_constant() { c(e.eval(&[])) } else { e })
            }
            "dot" => self.dot(at),
            "pi" => Ok(c(core::f64::consts::PI)),
            "w" if self.domain == Domain::Scalar => Ok(Expr::Var(0)),
            _ => {
                if let (Domain::Simplex(d), Some(rest)) = (self.domain, name.strip_prefix('r')) {
                    if let Ok(k) = rest.parse::<usize>() {
                        if (1..=d).contains(&k) {
                            return Ok(Expr::Var(k - 1));
                        }
                        return Err(Error::Expression(format!(
                            "variable {name} out of range 1..{d} at offset {at}"
                        )));
                    }
                }
                Err(Error::Expression(format!(
                    "unknown identifier '{name}' at offset {at}"
                )))
            }
        }
    }

    fn dot(&mut self, at: usize) -> Result<Expr> {
        let d = match self.domain {
            Domain::Simplex(d) => d,
            Domain::Scalar => {
                return Err(Error::Expression(format!(
                    "dot() needs simplex variables (offset {at})"
                )))
            }
        };
        self.expect(Token::LParen)?;
        let mut coeffs = Vec::new();
        loop {
            let e = self.expr()?;
            if !e.is_constant() {
                return Err(Error::Expression(format!(
                    "dot() coefficients must be constant (offset {at})"
                )));
            }
            coeffs.push(e.eval(&[]));
            match self.next() {
                Some(Token::Comma) => continue,
                Some(Token::RParen) => break,
                _ => return Err(Error::Expression(format!("malformed dot() at offset {at}"))),
            }
        }
        if coeffs.len() != d {
            return Err(Error::Expression(format!(
                "dot() takes {d} coefficients, got {} (offset {at})",
                coeffs.len()
            )));
        }
        let mut e = c(0.0);
        for (i, k) in coeffs.into_iter().enumerate() {
            e = add(e, mul(c(k), Expr::Var(i)));
        }
        Ok(e)
    }
}

/// Checks that `f` is finite and positive on `samples` evenly spaced points of `[lo, hi]`.
pub(crate) fn check_positive_scalar(f: &Function, lo: f64, hi: f64, what: &str) -> Result<()> {
    for k in 0..=64 {
        let w = lo + (hi - lo) * k as f64 / 64.0;
        let v = f.eval1(w);
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "{what} = '{f}' is not positive at w = {w}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(src: &str, d: usize) -> Function {
        Function::parse(src, Domain::Simplex(d)).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        let e = f("1 + 2*3^2^0.5 - 4/2", 2);
        let expected = 1.0 + 2.0 * 3f64.powf(2f64.powf(0.5)) - 2.0;
        assert!((e.eval(&[0.0, 0.0]) - expected).abs() < 1e-14);
        assert_eq!(f("-2^2", 2).eval(&[0.0, 0.0]), -4.0);
        assert_eq!(f("2*-3", 2).eval(&[0.0, 0.0]), -6.0);
    }

    #[test]
    fn variables_functions_and_dot() {
        let e = f("exp(r1) + log(r2) * sqrt(r3) + dot(1, 2, 3)", 3);
        let r = [0.2, 0.3, 0.5];
        let expected = 0.2f64.exp() + 0.3f64.ln() * 0.5f64.sqrt() + 0.2 + 0.6 + 1.5;
        assert!((e.eval(&r) - expected).abs() < 1e-14);
        let g = Function::parse("1 + w*1e-1", Domain::Scalar).unwrap();
        assert!((g.eval1(2.0) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(Function::parse("r4", Domain::Simplex(3)).is_err());
        assert!(Function::parse("w", Domain::Simplex(3)).is_err());
        assert!(Function::parse("r1", Domain::Scalar).is_err());
        assert!(Function::parse("(1 + 2", Domain::Scalar).is_err());
        assert!(Function::parse("1 $ 2", Domain::Scalar).is_err());
        assert!(Function::parse("", Domain::Scalar).is_err());
        assert!(Function::parse("dot(1,2)", Domain::Simplex(3)).is_err());
        assert!(Function::parse("foo(1)", Domain::Scalar).is_err());
    }

    #[test]
    fn derivatives_of_elementary_forms() {
        let e = f("r1^3 * exp(2*r2) / (1 + r1) + log(r2) + r1^r2", 2);
        let r = [0.4, 0.7];
        for var in 0..2 {
            let h = 1e-6;
            let mut p = r;
            let mut m = r;
            p[var] += h;
            m[var] -= h;
            let fd = (e.eval(&p) - e.eval(&m)) / (2.0 * h);
            let sym = e.derivative(var).eval(&r);
            assert!((fd - sym).abs() < 1e-7, "var {var}: {fd} vs {sym}");
        }
        let s = f("sqrt(r1)", 1);
        assert!((s.derivative(0).eval(&[0.25]) - 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn symbolic_derivative_matches_finite_differences(
            a in 0.1f64..2.0, b in -1.0f64..1.0, x in 0.1f64..0.9, y in 0.1f64..0.9,
        ) {
            let src = alloc::format!("{a}*r1*r2 + exp({b}*r1) - log(1 + r2^2) / (r1 + 1)");
            let e = f(&src, 2);
            let h = 1e-5;
            for var in 0..2 {
                let mut p = [x, y];
                let mut m = [x, y];
                p[var] += h;
                m[var] -= h;
                let fd = (e.eval(&p) - e.eval(&m)) / (2.0 * h);
                prop_assert!((fd - e.derivative(var).eval(&[x, y])).abs() < 1e-7);
            }
        }
    }
}
