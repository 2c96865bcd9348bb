//! Coefficient expressions: a small recursive-descent parser, a generic
//! evaluator and exact symbolic differentiation.
//!
//! Grammar (whitespace is ignored):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' integer)?
//! atom    := number | 'pi' | 'x' index | func '(' sum ')' | '(' sum ')'
//! func    := 'sin' | 'cos' | 'exp'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x1^2` is `-(x1^2)`.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("exponent at byte {offset} is not a nonnegative integer")]
    NonIntegerExponent { offset: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("variable x{index} is not bound (point has dimension {dim})")]
    UnboundVariable { index: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
        }
    }
}

/// Expression tree. Variables are stored zero-based (`x1` is `Var(0)`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Pi,
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Box<Expr>),
}

pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let e = p.sum()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.syntax(format!("unexpected `{}`", p.src[p.pos] as char)));
    }
    Ok(e)
}

impl FromStr for Expr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn syntax(&self, message: impl Into<String>) -> ExprError {
        ExprError::Syntax { offset: self.pos, message: message.into() }
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.peek() != Some(b'^') {
            return Ok(base);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let digits = &self.src[start..self.pos];
        let next = self.src.get(self.pos).copied();
        if digits.is_empty() || matches!(next, Some(b'.') | Some(b'e') | Some(b'E')) {
            return Err(ExprError::NonIntegerExponent { offset: start });
        }
        let k: u32 = std::str::from_utf8(digits)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(ExprError::NonIntegerExponent { offset: start })?;
        Ok(Expr::Pow(Box::new(base), k))
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                if self.peek() != Some(b')') {
                    return Err(self.syntax("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(c) => Err(self.syntax(format!("unexpected `{}`", c as char))),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i < s.len() && s[i] == b'.' {
            i += 1;
            while i < s.len() && s[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).unwrap_or("");
        let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
            offset: start,
            message: format!("malformed number `{text}`"),
        })?;
        self.pos = i;
        Ok(Expr::Const(v))
    }

    fn identifier(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("").to_string();
        let func = match name.as_str() {
            "pi" => return Ok(Expr::Pi),
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(k) = rest.parse::<usize>() {
                        if k >= 1 && !rest.starts_with('0') {
                            return Ok(Expr::Var(k - 1));
                        }
                    }
                }
                return Err(ExprError::UnknownIdentifier { name, offset: start });
            }
        };
        if self.peek() != Some(b'(') {
            return Err(self.syntax(format!("expected `(` after `{}`", func.name())));
        }
        self.pos += 1;
        let arg = self.sum()?;
        if self.peek() != Some(b')') {
            return Err(self.syntax("expected `)`"));
        }
        self.pos += 1;
        Ok(Expr::Call(func, Box::new(arg)))
    }
}

// Smart constructors with light constant folding, so that repeated
// differentiation does not drown in `0*` and `1*` nodes.

pub fn constant(v: f64) -> Expr {
    Expr::Const(v)
}

pub fn var(i: usize) -> Expr {
    Expr::Var(i)
}

impl Expr {
    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            Expr::Pi => Some(std::f64::consts::PI),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(v) if *v == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Expr::Const(v) if *v == 1.0)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if a.is_zero() {
            return b;
        }
        if b.is_zero() {
            return a;
        }
        if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
            return Expr::Const(x + y);
        }
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if b.is_zero() {
            return a;
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
            return Expr::Const(x - y);
        }
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if a.is_zero() || b.is_zero() {
            return Expr::Const(0.0);
        }
        if a.is_one() {
            return b;
        }
        if b.is_one() {
            return a;
        }
        if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
            return Expr::Const(x * y);
        }
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if a.is_zero() && !b.is_zero() {
            return Expr::Const(0.0);
        }
        if b.is_one() {
            return a;
        }
        Expr::Div(Box::new(a), Box::new(b))
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(v) => Expr::Const(-v),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn pow(a: Expr, k: u32) -> Expr {
        match k {
            0 => Expr::Const(1.0),
            1 => a,
            _ => match a {
                Expr::Const(v) => Expr::Const(v.powi(k as i32)),
                other => Expr::Pow(Box::new(other), k),
            },
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        Expr::Call(f, Box::new(a))
    }

    /// Largest variable index used plus one (0 for closed expressions).
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Pi => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.arity().max(b.arity())
            }
        }
    }

    pub fn eval<T: Float>(&self, x: &[T]) -> Result<T, ExprError> {
        Ok(match self {
            Expr::Const(v) => T::from(*v).unwrap(),
            Expr::Pi => T::from(std::f64::consts::PI).unwrap(),
            Expr::Var(i) => *x
                .get(*i)
                .ok_or(ExprError::UnboundVariable { index: i + 1, dim: x.len() })?,
            Expr::Neg(a) => -a.eval(x)?,
            Expr::Add(a, b) => a.eval(x)? + b.eval(x)?,
            Expr::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            Expr::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            Expr::Div(a, b) => {
                let d = b.eval(x)?;
                if d == T::zero() {
                    return Err(ExprError::DivisionByZero);
                }
                a.eval(x)? / d
            }
            Expr::Pow(a, k) => a.eval(x)?.powi(*k as i32),
            Expr::Call(f, a) => {
                let v = a.eval(x)?;
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                }
            }
        })
    }

    /// Evaluation for callers that have already checked arity and
    /// denominators; errors become NaN.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.eval(x).unwrap_or(f64::NAN)
    }

    /// Exact partial derivative with respect to the zero-based variable `j`.
    pub fn diff(&self, j: usize) -> Expr {
        match self {
            Expr::Const(_) | Expr::Pi => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == j { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::neg(a.diff(j)),
            Expr::Add(a, b) => Expr::add(a.diff(j), b.diff(j)),
            Expr::Sub(a, b) => Expr::sub(a.diff(j), b.diff(j)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.diff(j), (**b).clone()),
                Expr::mul((**a).clone(), b.diff(j)),
            ),
            Expr::Div(a, b) => {
                let num = Expr::sub(
                    Expr::mul(a.diff(j), (**b).clone()),
                    Expr::mul((**a).clone(), b.diff(j)),
                );
                Expr::div(num, Expr::pow((**b).clone(), 2))
            }
            Expr::Pow(a, k) => {
                if *k == 0 {
                    return Expr::Const(0.0);
                }
                Expr::mul(
                    Expr::mul(Expr::Const(*k as f64), Expr::pow((**a).clone(), k - 1)),
                    a.diff(j),
                )
            }
            Expr::Call(f, a) => {
                let inner = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, inner),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, inner)),
                    Func::Exp => Expr::call(Func::Exp, inner),
                };
                Expr::mul(outer, a.diff(j))
            }
        }
    }

    /// Replace every `Var(k)` with `subs[k]`.
    pub fn substitute(&self, subs: &[Expr]) -> Expr {
        match self {
            Expr::Const(_) | Expr::Pi => self.clone(),
            Expr::Var(i) => subs.get(*i).cloned().unwrap_or_else(|| self.clone()),
            Expr::Neg(a) => Expr::neg(a.substitute(subs)),
            Expr::Add(a, b) => Expr::add(a.substitute(subs), b.substitute(subs)),
            Expr::Sub(a, b) => Expr::sub(a.substitute(subs), b.substitute(subs)),
            Expr::Mul(a, b) => Expr::mul(a.substitute(subs), b.substitute(subs)),
            Expr::Div(a, b) => Expr::div(a.substitute(subs), b.substitute(subs)),
            Expr::Pow(a, k) => Expr::pow(a.substitute(subs), *k),
            Expr::Call(f, a) => Expr::call(*f, a.substitute(subs)),
        }
    }

    pub fn gradient(&self, n: usize) -> Vec<Expr> {
        (0..n).map(|j| self.diff(j)).collect()
    }

    /// Row-major symmetric Hessian.
    pub fn hessian(&self, n: usize) -> Vec<Expr> {
        let g = self.gradient(n);
        let mut h = vec![Expr::Const(0.0); n * n];
        for i in 0..n {
            for j in i..n {
                let d = g[i].diff(j);
                h[j * n + i] = d.clone();
                h[i * n + j] = d;
            }
        }
        h
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => {
                if *v < 0.0 {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Pi => write!(f, "pi"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, k) => write!(f, "({a})^{k}"),
            Expr::Call(g, a) => write!(f, "{}({a})", g.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_power_of_variable() {
        assert_eq!(parse("x1^2").unwrap(), Expr::Pow(Box::new(Expr::Var(0)), 2));
    }

    #[test]
    fn grushin_coefficient_vanishes_on_the_axis() {
        let e = parse("x1^2").unwrap();
        assert_eq!(e.eval(&[3.0, 0.0]).unwrap(), 9.0);
        assert_eq!(e.eval(&[0.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn closed_expression() {
        let e = parse("sin(pi/2)").unwrap();
        assert!((e.eval::<f64>(&[]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn periodic_coefficient_parses() {
        let e = parse("sin(2*pi*x1)^2").unwrap();
        assert!((e.value(&[0.25]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unary_minus_binds_below_power() {
        assert_eq!(parse("-x1^2").unwrap().value(&[3.0]), -9.0);
        assert_eq!(parse("2 - -x1").unwrap().value(&[3.0]), 5.0);
        assert!(parse("2^3^1").is_err());
    }

    #[test]
    fn whitespace_is_ignored() {
        let a = parse(" x1 *\t( 2 + x2 ) ").unwrap();
        let b = parse("x1*(2+x2)").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_carry_offsets() {
        match parse("x1 + * 2") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match parse("1 + y") {
            Err(ExprError::UnknownIdentifier { name, offset }) => {
                assert_eq!(name, "y");
                assert_eq!(offset, 4);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("x1^2.5"), Err(ExprError::NonIntegerExponent { offset: 3 })));
        assert!(matches!(parse("x1^x2"), Err(ExprError::NonIntegerExponent { .. })));
        assert!(matches!(parse("x0"), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(parse("(x1"), Err(ExprError::Syntax { .. })));
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let e = parse("1/x1").unwrap();
        assert_eq!(e.eval(&[0.0]), Err(ExprError::DivisionByZero));
        assert_eq!(e.eval(&[4.0]).unwrap(), 0.25);
    }

    #[test]
    fn unbound_variable() {
        let e = parse("x3").unwrap();
        assert!(matches!(e.eval(&[1.0, 2.0]), Err(ExprError::UnboundVariable { index: 3, dim: 2 })));
    }

    #[test]
    fn derivative_of_square() {
        let d = parse("x1^2").unwrap().diff(0);
        for x in [-1.5, 0.0, 0.3, 2.0] {
            assert_eq!(d.value(&[x]), 2.0 * x);
        }
    }

    #[test]
    fn derivative_of_sine() {
        let d = parse("sin(x1)").unwrap().diff(0);
        for x in [-1.5, 0.0, 0.3, 2.0] {
            assert!((d.value(&[x]) - x.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn generic_evaluation_in_single_precision() {
        let e = parse("cos(x1)*x2 + 1/2").unwrap();
        let v: f32 = e.eval(&[0.0f32, 3.0f32]).unwrap();
        assert!((v - 3.5).abs() < 1e-6);
    }

    #[test]
    fn substitution_rescales() {
        let e = parse("x1^2").unwrap();
        let s = e.substitute(&[Expr::mul(constant(0.5), var(0))]);
        assert!((s.value(&[3.0]) - 2.25).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_oracle_on_fixed_points() {
        let exprs = [
            "x1^3*x2 - 2*x2^2",
            "sin(2*pi*x1)^2*cos(pi*x2)",
            "exp(sin(x1) - x2/3)",
            "(1 + x1^2)/(2 + cos(x2))",
        ];
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        };
        for s in exprs {
            let e = parse(s).unwrap();
            for _ in 0..100 {
                let x = [next(), next()];
                for j in 0..2 {
                    let step = 1e-4;
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += step;
                    xm[j] -= step;
                    let fd = (e.value(&xp) - e.value(&xm)) / (2.0 * step);
                    let exact = e.diff(j).value(&x);
                    // central differences carry a step²/6 times third-derivative error
                    let third = e.diff(j).diff(j).diff(j).value(&x).abs();
                    let tol = f64::max(1e-6, 1.5 * step * step / 6.0 * third + 1e-9);
                    assert!((fd - exact).abs() <= tol, "{s} d{j} at {x:?}: {fd} vs {exact}");
                }
            }
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(|v| Expr::Const((v * 8.0).round() / 8.0)),
            Just(Expr::Pi),
            (0usize..2).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), 0u32..4).prop_map(|(a, k)| Expr::Pow(Box::new(a), k)),
                inner.clone().prop_map(|a| Expr::Call(Func::Sin, Box::new(a))),
                inner.prop_map(|a| Expr::Call(Func::Cos, Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr(), x1 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
            let printed = e.to_string();
            let back = parse(&printed).unwrap();
            let a = e.value(&[x1, x2]);
            let b = back.value(&[x1, x2]);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{printed}: {a} vs {b}");
        }

        #[test]
        fn derivative_matches_central_difference(e in arb_expr(), x1 in -1.0f64..1.0, x2 in -1.0f64..1.0, j in 0usize..2) {
            let x = [x1, x2];
            let step = 1e-4;
            let mut xp = x;
            let mut xm = x;
            xp[j] += step;
            xm[j] -= step;
            let fd = (e.value(&xp) - e.value(&xm)) / (2.0 * step);
            let exact = e.diff(j).value(&x);
            // third derivatives of these trees stay moderate on [-1,1]^2, so the
            // O(step^2) truncation error is scaled by the value magnitude
            let scale = 1.0 + exact.abs() + e.value(&x).abs();
            prop_assert!((fd - exact).abs() <= 1e-6 * scale, "{e}: {fd} vs {exact}");
        }
    }
}
