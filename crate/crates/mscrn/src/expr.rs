//! Arithmetic expressions used as custom rate laws.

use std::fmt;

use crate::symbolic::{Poly, RationalFn};

/// Expression tree over variables identified by index.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
}

/// Failure while parsing an expression. `offset..offset+len` is a byte range of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprError {
    pub offset: usize,
    pub len: usize,
    pub message: String,
}

impl Expr {
    pub fn eval(&self, var: &dyn Fn(usize) -> f64) -> f64 {
        match self {
            Expr::Num(x) => *x,
            Expr::Var(i) => var(*i),
            Expr::Neg(a) => -a.eval(var),
            Expr::Add(a, b) => a.eval(var) + b.eval(var),
            Expr::Sub(a, b) => a.eval(var) - b.eval(var),
            Expr::Mul(a, b) => a.eval(var) * b.eval(var),
            Expr::Div(a, b) => a.eval(var) / b.eval(var),
            Expr::Pow(a, b) => a.eval(var).powf(b.eval(var)),
        }
    }

    pub fn map_vars(&self, f: &dyn Fn(usize) -> usize) -> Expr {
        let m = |e: &Expr| Box::new(e.map_vars(f));
        match self {
            Expr::Num(x) => Expr::Num(*x),
            Expr::Var(i) => Expr::Var(f(*i)),
            Expr::Neg(a) => Expr::Neg(m(a)),
            Expr::Add(a, b) => Expr::Add(m(a), m(b)),
            Expr::Sub(a, b) => Expr::Sub(m(a), m(b)),
            Expr::Mul(a, b) => Expr::Mul(m(a), m(b)),
            Expr::Div(a, b) => Expr::Div(m(a), m(b)),
            Expr::Pow(a, b) => Expr::Pow(m(a), m(b)),
        }
    }

    pub fn vars(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(i) => {
                if !out.contains(i) {
                    out.push(*i)
                }
            }
            Expr::Neg(a) => a.vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.vars(out);
                b.vars(out);
            }
        }
    }

    /// Rational-function form, available when every power has a constant integer exponent.
    pub fn to_rational(&self, name: &dyn Fn(usize) -> String) -> Option<RationalFn> {
        Some(match self {
            Expr::Num(x) => RationalFn::constant(*x),
            Expr::Var(i) => RationalFn::from(Poly::var(&name(*i))),
            Expr::Neg(a) => a.to_rational(name)?.scale(-1.0),
            Expr::Add(a, b) => a.to_rational(name)?.add(&b.to_rational(name)?),
            Expr::Sub(a, b) => a.to_rational(name)?.add(&b.to_rational(name)?.scale(-1.0)),
            Expr::Mul(a, b) => a.to_rational(name)?.mul(&b.to_rational(name)?),
            Expr::Div(a, b) => a.to_rational(name)?.div(&b.to_rational(name)?)?,
            Expr::Pow(a, b) => {
                let mut vs = Vec::new();
                b.vars(&mut vs);
                if !vs.is_empty() {
                    return None;
                }
                let e = b.eval(&|_| 0.0);
                if e.fract() != 0.0 || e.abs() > 64.0 {
                    return None;
                }
                a.to_rational(name)?.pow(e as i32)?
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(x) if *x < 0.0 => 3,
            Expr::Num(_) | Expr::Var(_) => 5,
        }
    }

    /// Display adapter resolving variables through `names`.
    pub fn display<'a>(&'a self, names: &'a dyn Fn(usize) -> String) -> impl fmt::Display + 'a {
        ExprDisplay { expr: self, names }
    }
}

struct ExprDisplay<'a> {
    expr: &'a Expr,
    names: &'a dyn Fn(usize) -> String,
}

impl ExprDisplay<'_> {
    fn write(&self, f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
        let paren = e.precedence() < min_prec;
        if paren {
            write!(f, "(")?;
        }
        match e {
            Expr::Num(x) => write!(f, "{x}")?,
            Expr::Var(i) => write!(f, "{}", (self.names)(*i))?,
            Expr::Neg(a) => {
                write!(f, "-")?;
                self.write(f, a, 4)?;
            }
            Expr::Add(a, b) => {
                self.write(f, a, 1)?;
                write!(f, "+")?;
                self.write(f, b, 2)?;
            }
            Expr::Sub(a, b) => {
                self.write(f, a, 1)?;
                write!(f, "-")?;
                self.write(f, b, 2)?;
            }
            Expr::Mul(a, b) => {
                self.write(f, a, 2)?;
                write!(f, "*")?;
                self.write(f, b, 3)?;
            }
            Expr::Div(a, b) => {
                self.write(f, a, 2)?;
                write!(f, "/")?;
                self.write(f, b, 4)?;
            }
            Expr::Pow(a, b) => {
                self.write(f, a, 5)?;
                write!(f, "^")?;
                self.write(f, b, 4)?;
            }
        }
        if paren {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(f, self.expr, 0)
    }
}

/// Parse `text`, resolving identifiers to variable indices through `resolve`.
pub fn parse_expr(text: &str, resolve: &dyn Fn(&str) -> Option<usize>) -> Result<Expr, ExprError> {
    let mut p = Parser { src: text, pos: 0, resolve };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < text.len() {
        return Err(p.error_here("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    resolve: &'a dyn Fn(&str) -> Option<usize>,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek().filter(|c| c.is_whitespace()) {
            self.pos += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn error_here(&self, message: &str) -> ExprError {
        let len = self.peek().map_or(0, char::len_utf8);
        ExprError { offset: self.pos, len, message: message.to_string() }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat('-') {
            return Ok(match self.unary()? {
                Expr::Num(x) => Expr::Num(-x),
                e => Expr::Neg(Box::new(e)),
            });
        }
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Expr::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error_here("expected ')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
                    self.pos += 1;
                }
                if matches!(self.peek(), Some('e' | 'E')) {
                    let save = self.pos;
                    self.pos += 1;
                    if matches!(self.peek(), Some('+' | '-')) {
                        self.pos += 1;
                    }
                    if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                            self.pos += 1;
                        }
                    } else {
                        self.pos = save;
                    }
                }
                let s = &self.src[start..self.pos];
                s.parse::<f64>().map(Expr::Num).map_err(|_| ExprError {
                    offset: start,
                    len: s.len(),
                    message: format!("invalid number '{s}'"),
                })
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                while self.peek().is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '\'') {
                    self.pos += self.peek().map_or(1, char::len_utf8);
                }
                let name = &self.src[start..self.pos];
                (self.resolve)(name).map(Expr::Var).ok_or_else(|| ExprError {
                    offset: start,
                    len: name.len(),
                    message: format!("unknown identifier '{name}'"),
                })
            }
            _ => Err(self.error_here("expected a number, identifier or '('")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<&'static str> {
        vec!["A", "B"]
    }

    fn parse(s: &str) -> Expr {
        let n = names();
        parse_expr(s, &|id| n.iter().position(|x| *x == id)).unwrap()
    }

    #[test]
    fn precedence_and_evaluation() {
        let e = parse("2*A/(1+B)^2 - -A");
        let v = e.eval(&|i| [3.0, 1.0][i]);
        assert!((v - (6.0 / 4.0 + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn display_round_trips() {
        let n = names();
        for s in ["A*B/(1+A)", "A-(B-1)", "2^A^2", "-A*B", "(A+B)*(A-B)", "1.5e-3*A", "-1+A", "A--2", "2^-1"] {
            let e = parse(s);
            let printed = e.display(&|i| n[i].to_string()).to_string();
            assert_eq!(parse(&printed), e, "{s} -> {printed}");
        }
    }

    #[test]
    fn unknown_identifier_has_span() {
        let err = parse_expr("A + Cx", &|id| (id == "A").then_some(0)).unwrap_err();
        assert_eq!((err.offset, err.len), (4, 2));
    }

    #[test]
    fn rational_conversion() {
        let e = parse("A*B/(2+A)");
        let r = e.to_rational(&|i| ["vA", "vB"][i].to_string()).unwrap();
        assert_eq!(r.to_string(), "vA*vB/(2+vA)");
        assert!(parse("A^0.5").to_rational(&|_| "x".into()).is_none());
    }
}
