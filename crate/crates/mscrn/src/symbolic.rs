//! Polynomials and rational functions over named symbols with real coefficients.
//!
//! Averaged rates of mass-action networks are rational functions of the reduced
//! coordinates. This module keeps them symbolic so that closed forms can be printed,
//! compared and evaluated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// A product of symbols raised to positive powers, sorted by symbol name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Monomial(Vec<(String, u32)>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(Vec::new())
    }

    pub fn var(name: &str) -> Self {
        Monomial(vec![(name.to_string(), 1)])
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|(_, e)| e).sum()
    }

    pub fn exponent(&self, var: &str) -> u32 {
        self.0.iter().find(|(s, _)| s == var).map_or(0, |(_, e)| *e)
    }

    pub fn factors(&self) -> &[(String, u32)] {
        &self.0
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut map: BTreeMap<String, u32> = self.0.iter().cloned().collect();
        for (s, e) in &other.0 {
            *map.entry(s.clone()).or_insert(0) += e;
        }
        Monomial(map.into_iter().collect())
    }

    /// The monomial with `var` removed.
    pub fn without(&self, var: &str) -> Monomial {
        Monomial(self.0.iter().filter(|(s, _)| s != var).cloned().collect())
    }

    fn display_key(&self) -> (u32, &Vec<(String, u32)>) {
        (self.degree(), &self.0)
    }
}

/// Sparse multivariate polynomial.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    terms: BTreeMap<Monomial, f64>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly::default()
    }

    pub fn one() -> Self {
        Poly::constant(1.0)
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Poly::zero();
        p.add_term(Monomial::one(), c);
        p
    }

    pub fn var(name: &str) -> Self {
        let mut p = Poly::zero();
        p.add_term(Monomial::var(name), 1.0);
        p
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(m).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.retain(|_, v| *v != 0.0);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// The value of a constant polynomial.
    pub fn as_constant(&self) -> Option<f64> {
        match self.terms.len() {
            0 => Some(0.0),
            1 => self.terms.get(&Monomial::one()).copied(),
            _ => None,
        }
    }

    pub fn vars(&self) -> BTreeSet<String> {
        self.terms.keys().flat_map(|m| m.0.iter().map(|(s, _)| s.clone())).collect()
    }

    pub fn contains_var(&self, var: &str) -> bool {
        self.terms.keys().any(|m| m.exponent(var) > 0)
    }

    pub fn degree_in(&self, var: &str) -> u32 {
        self.terms.keys().map(|m| m.exponent(var)).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, k: f64) -> Poly {
        let mut out = Poly::zero();
        for (m, c) in self.terms() {
            out.add_term(m.clone(), c * k);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (m1, c1) in self.terms() {
            for (m2, c2) in other.terms() {
                out.add_term(m1.mul(m2), c1 * c2);
            }
        }
        out
    }

    pub fn pow(&self, n: u32) -> Poly {
        let mut out = Poly::one();
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    /// Coefficients of `var^0, var^1, ...` as polynomials free of `var`.
    pub fn coefficients_in(&self, var: &str) -> Vec<Poly> {
        let mut out = vec![Poly::zero(); self.degree_in(var) as usize + 1];
        for (m, c) in self.terms() {
            out[m.exponent(var) as usize].add_term(m.without(var), c);
        }
        out
    }

    /// Falling factorial `p (p-1) ... (p-j+1)`.
    pub fn falling(&self, j: u32) -> Poly {
        let mut out = Poly::one();
        for i in 0..j {
            out = out.mul(&self.sub(&Poly::constant(f64::from(i))));
        }
        out
    }

    pub fn eval(&self, env: &dyn Fn(&str) -> Option<f64>) -> Option<f64> {
        let mut total = 0.0;
        for (m, c) in self.terms() {
            let mut t = c;
            for (s, e) in &m.0 {
                t *= env(s)?.powi(*e as i32);
            }
            total += t;
        }
        Some(total)
    }

    pub fn compile(&self, index: &dyn Fn(&str) -> Option<usize>) -> Option<CompiledPoly> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for (m, c) in self.terms() {
            let factors = m
                .0
                .iter()
                .map(|(s, e)| index(s).map(|i| (i, *e as i32)))
                .collect::<Option<Vec<_>>>()?;
            terms.push((c, factors));
        }
        Some(CompiledPoly { terms })
    }

    fn sorted_terms(&self) -> Vec<(&Monomial, f64)> {
        let mut v: Vec<_> = self.terms().collect();
        v.sort_by(|a, b| a.0.display_key().cmp(&b.0.display_key()));
        v
    }
}

fn format_number(c: f64) -> String {
    format!("{c}")
}

fn format_term(m: &Monomial, c: f64) -> String {
    let factors: Vec<String> = m
        .0
        .iter()
        .map(|(s, e)| if *e == 1 { s.clone() } else { format!("{s}^{e}") })
        .collect();
    if factors.is_empty() {
        return format_number(c);
    }
    let body = factors.join("*");
    if c == 1.0 {
        body
    } else if c == -1.0 {
        format!("-{body}")
    } else {
        format!("{}*{body}", format_number(c))
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms = self.sorted_terms();
        if terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (m, c)) in terms.into_iter().enumerate() {
            if i > 0 && c >= 0.0 {
                write!(f, "+")?;
            }
            write!(f, "{}", format_term(m, c))?;
        }
        Ok(())
    }
}

/// Polynomial compiled against a fixed variable ordering.
#[derive(Debug, Clone)]
pub struct CompiledPoly {
    terms: Vec<(f64, Vec<(usize, i32)>)>,
}

impl CompiledPoly {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, fs)| fs.iter().fold(*c, |acc, (i, e)| acc * x[*i].powi(*e)))
            .sum()
    }
}

/// Stirling number of the second kind `S(n, k)`.
pub fn stirling2(n: u32, k: u32) -> f64 {
    let mut row = vec![1.0];
    for i in 1..=n as usize {
        let mut next = vec![0.0; i + 1];
        for j in 1..=i {
            let keep = if j < i { j as f64 * row[j] } else { 0.0 };
            next[j] = keep + row[j - 1];
        }
        row = next;
    }
    row.get(k as usize).copied().unwrap_or(0.0)
}

/// Quotient of two polynomials. The denominator is never the zero polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalFn {
    pub num: Poly,
    pub den: Poly,
}

impl From<Poly> for RationalFn {
    fn from(num: Poly) -> Self {
        RationalFn { num, den: Poly::one() }
    }
}

impl RationalFn {
    pub fn new(num: Poly, den: Poly) -> Option<Self> {
        if den.is_zero() {
            return None;
        }
        let mut r = RationalFn { num, den };
        r.normalize();
        Some(r)
    }

    pub fn constant(c: f64) -> Self {
        Poly::constant(c).into()
    }

    pub fn var(name: &str) -> Self {
        Poly::var(name).into()
    }

    fn normalize(&mut self) {
        if self.num.is_zero() {
            self.den = Poly::one();
            return;
        }
        if let Some(c) = self.den.as_constant() {
            if c != 1.0 {
                self.num = self.num.scale(1.0 / c);
                self.den = Poly::one();
            }
        }
    }

    pub fn is_polynomial(&self) -> bool {
        self.den.as_constant() == Some(1.0)
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    pub fn contains_var(&self, var: &str) -> bool {
        self.num.contains_var(var) || self.den.contains_var(var)
    }

    pub fn vars(&self) -> BTreeSet<String> {
        let mut v = self.num.vars();
        v.extend(self.den.vars());
        v
    }

    pub fn add(&self, other: &RationalFn) -> RationalFn {
        let (num, den) = if self.den == other.den {
            (self.num.add(&other.num), self.den.clone())
        } else {
            (
                self.num.mul(&other.den).add(&other.num.mul(&self.den)),
                self.den.mul(&other.den),
            )
        };
        let mut r = RationalFn { num, den };
        r.normalize();
        r
    }

    pub fn mul(&self, other: &RationalFn) -> RationalFn {
        let mut r = RationalFn { num: self.num.mul(&other.num), den: self.den.mul(&other.den) };
        r.normalize();
        r
    }

    pub fn scale(&self, k: f64) -> RationalFn {
        let mut r = RationalFn { num: self.num.scale(k), den: self.den.clone() };
        r.normalize();
        r
    }

    pub fn div(&self, other: &RationalFn) -> Option<RationalFn> {
        RationalFn::new(self.num.mul(&other.den), self.den.mul(&other.num))
    }

    pub fn pow(&self, n: i32) -> Option<RationalFn> {
        let base = if n < 0 { RationalFn::new(self.den.clone(), self.num.clone())? } else { self.clone() };
        let k = n.unsigned_abs();
        RationalFn::new(base.num.pow(k), base.den.pow(k))
    }

    /// Replace `var` by `q`.
    pub fn subst(&self, var: &str, q: &RationalFn) -> RationalFn {
        let (a, b) = (&q.num, &q.den);
        let expand = |p: &Poly| -> (Poly, u32) {
            let coeffs = p.coefficients_in(var);
            let top = coeffs.len() as u32 - 1;
            let mut out = Poly::zero();
            for (n, c) in coeffs.iter().enumerate() {
                let n = n as u32;
                out = out.add(&c.mul(&a.pow(n)).mul(&b.pow(top - n)));
            }
            (out, top)
        };
        let (num, jn) = expand(&self.num);
        let (den, jd) = expand(&self.den);
        let common = jn.min(jd);
        let mut r = RationalFn { num: num.mul(&b.pow(jd - common)), den: den.mul(&b.pow(jn - common)) };
        r.normalize();
        r
    }

    /// Expectation over `var ~ Poisson(mean)`. Requires a denominator free of `var`.
    pub fn expect_poisson(&self, var: &str, mean: &RationalFn) -> Option<RationalFn> {
        if self.den.contains_var(var) {
            return None;
        }
        let coeffs = self.num.coefficients_in(var);
        let top = coeffs.len() as u32 - 1;
        let (a, b) = (&mean.num, &mean.den);
        let mut num = Poly::zero();
        for (n, c) in coeffs.iter().enumerate() {
            let n = n as u32;
            let mut moment = Poly::zero();
            for j in 0..=n {
                let s = stirling2(n, j);
                if s != 0.0 {
                    moment = moment.add(&a.pow(j).mul(&b.pow(top - j)).scale(s));
                }
            }
            num = num.add(&c.mul(&moment));
        }
        let mut r = RationalFn { num, den: self.den.mul(&b.pow(top)) };
        r.normalize();
        Some(r)
    }

    /// Expectation over `var ~ Binomial(trials, p)`. Requires a denominator free of `var`.
    pub fn expect_binomial(&self, var: &str, trials: &Poly, p: f64) -> Option<RationalFn> {
        if self.den.contains_var(var) {
            return None;
        }
        let coeffs = self.num.coefficients_in(var);
        let mut num = Poly::zero();
        for (n, c) in coeffs.iter().enumerate() {
            let n = n as u32;
            let mut moment = Poly::zero();
            for j in 0..=n {
                let s = stirling2(n, j);
                if s != 0.0 {
                    moment = moment.add(&trials.falling(j).scale(s * p.powi(j as i32)));
                }
            }
            num = num.add(&c.mul(&moment));
        }
        let mut r = RationalFn { num, den: self.den.clone() };
        r.normalize();
        Some(r)
    }

    /// Expectation over `(vars[0], ..., vars[D-1]) ~ Multinomial(trials, p)`. Requires a
    /// denominator free of every variable in `vars`.
    pub fn expect_multinomial(&self, vars: &[String], trials: &Poly, p: &[f64]) -> Option<RationalFn> {
        if vars.iter().any(|v| self.den.contains_var(v)) {
            return None;
        }
        let mut num = Poly::zero();
        for (m, c) in self.num.terms() {
            let powers: Vec<u32> = vars.iter().map(|v| m.exponent(v)).collect();
            let rest = vars.iter().fold(m.clone(), |acc, v| acc.without(v));
            // E[prod x_d^n_d] = sum_j prod S(n_d, j_d) p_d^j_d * trials^(sum j)
            let mut moment = Poly::zero();
            let mut j = vec![0u32; vars.len()];
            loop {
                let weight: f64 = j
                    .iter()
                    .zip(&powers)
                    .zip(p)
                    .map(|((&jd, &nd), &pd)| stirling2(nd, jd) * pd.powi(jd as i32))
                    .product();
                if weight != 0.0 {
                    moment = moment.add(&trials.falling(j.iter().sum()).scale(weight));
                }
                let Some(d) = (0..j.len()).find(|&d| j[d] < powers[d]) else { break };
                j[d] += 1;
                j[..d].iter_mut().for_each(|x| *x = 0);
            }
            let mut base = Poly::zero();
            base.add_term(rest, c);
            num = num.add(&base.mul(&moment));
        }
        let mut r = RationalFn { num, den: self.den.clone() };
        r.normalize();
        Some(r)
    }

    pub fn eval(&self, env: &dyn Fn(&str) -> Option<f64>) -> Option<f64> {
        Some(self.num.eval(env)? / self.den.eval(env)?)
    }

    pub fn compile(&self, index: &dyn Fn(&str) -> Option<usize>) -> Option<CompiledRational> {
        Some(CompiledRational { num: self.num.compile(index)?, den: self.den.compile(index)? })
    }
}

impl fmt::Display for RationalFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_polynomial() {
            return write!(f, "{}", self.num);
        }
        if self.num.n_terms() > 1 {
            write!(f, "({})", self.num)?;
        } else {
            write!(f, "{}", self.num)?;
        }
        let simple_den = self.den.n_terms() == 1
            && self.den.terms().all(|(m, c)| c == 1.0 && m.factors().len() == 1 && m.factors()[0].1 == 1);
        if simple_den {
            write!(f, "/{}", self.den)
        } else {
            write!(f, "/({})", self.den)
        }
    }
}

/// Rational function compiled against a fixed variable ordering.
#[derive(Debug, Clone)]
pub struct CompiledRational {
    num: CompiledPoly,
    den: CompiledPoly,
}

impl CompiledRational {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.num.eval(x) / self.den.eval(x)
    }
}

/// Sum of rational functions, merged when denominators coincide.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RationalSum {
    pub terms: Vec<RationalFn>,
}

impl RationalSum {
    pub fn push(&mut self, r: RationalFn) {
        if r.is_zero() {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|t| t.den == r.den) {
            *t = t.add(&r);
            if t.is_zero() {
                self.terms.retain(|t| !t.is_zero());
            }
        } else {
            self.terms.push(r);
        }
    }

    /// Apply `f` to every term and sum the results.
    pub fn try_map(&self, f: impl Fn(&RationalFn) -> Option<RationalFn>) -> Option<RationalSum> {
        let mut out = RationalSum::default();
        for t in &self.terms {
            out.push(f(t)?);
        }
        Some(out)
    }

    pub fn vars(&self) -> BTreeSet<String> {
        self.terms.iter().flat_map(|t| t.vars()).collect()
    }

    pub fn eval(&self, env: &dyn Fn(&str) -> Option<f64>) -> Option<f64> {
        self.terms.iter().map(|t| t.eval(env)).sum()
    }

    pub fn compile(&self, index: &dyn Fn(&str) -> Option<usize>) -> Option<CompiledSum> {
        Some(CompiledSum { terms: self.terms.iter().map(|t| t.compile(index)).collect::<Option<_>>()? })
    }
}

impl From<RationalFn> for RationalSum {
    fn from(r: RationalFn) -> Self {
        let mut s = RationalSum::default();
        s.push(r);
        s
    }
}

impl fmt::Display for RationalSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            let s = t.to_string();
            if i > 0 && !s.starts_with('-') {
                write!(f, "+")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Compiled [`RationalSum`].
#[derive(Debug, Clone)]
pub struct CompiledSum {
    terms: Vec<CompiledRational>,
}

impl CompiledSum {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env<'a>(pairs: &'a [(&'a str, f64)]) -> impl Fn(&str) -> Option<f64> + 'a {
        move |s| pairs.iter().find(|(n, _)| *n == s).map(|(_, v)| *v)
    }

    #[test]
    fn stirling_table() {
        assert_eq!(stirling2(0, 0), 1.0);
        assert_eq!(stirling2(3, 2), 3.0);
        assert_eq!(stirling2(4, 2), 7.0);
        assert_eq!(stirling2(5, 3), 25.0);
        assert_eq!(stirling2(3, 0), 0.0);
    }

    #[test]
    fn display_orders_by_degree() {
        let p = Poly::var("k1").mul(&Poly::var("vA")).add(&Poly::var("k3"));
        assert_eq!(p.to_string(), "k3+k1*vA");
        let q = Poly::var("x").pow(2).scale(-2.0).add(&Poly::constant(1.0));
        assert_eq!(q.to_string(), "1-2*x^2");
    }

    #[test]
    fn poisson_expectation_of_linear_rate() {
        let rate = RationalFn::from(Poly::var("k1").mul(&Poly::var("vA")).mul(&Poly::var("vB")));
        let mean = RationalFn::new(
            Poly::var("k2"),
            Poly::var("k3").add(&Poly::var("k1").mul(&Poly::var("vA"))),
        )
        .unwrap();
        let avg = rate.expect_poisson("vB", &mean).unwrap();
        assert_eq!(avg.to_string(), "k1*k2*vA/(k3+k1*vA)");
        let e = env(&[("k1", 1.0), ("k2", 1.0), ("k3", 1.0), ("vA", 1.0)]);
        assert_eq!(avg.eval(&e), Some(0.5));
    }

    #[test]
    fn poisson_second_moment() {
        // E[X^2] = m + m^2
        let r = RationalFn::from(Poly::var("x").pow(2));
        let avg = r.expect_poisson("x", &RationalFn::constant(3.0)).unwrap();
        assert_eq!(avg.num.as_constant(), Some(12.0));
    }

    #[test]
    fn binomial_factorial_moment() {
        // E[X(X-1)] = n(n-1) p^2
        let x = Poly::var("x");
        let r = RationalFn::from(x.falling(2));
        let avg = r.expect_binomial("x", &Poly::var("n"), 0.5).unwrap();
        let e = env(&[("n", 7.0)]);
        assert!((avg.eval(&e).unwrap() - 42.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn multinomial_mixed_moment_matches_enumeration() {
        let (n, p) = (5u32, [0.2, 0.3, 0.5]);
        let r = RationalFn::from(Poly::var("x").pow(2).mul(&Poly::var("y")));
        let vars = ["x".to_string(), "y".to_string(), "z".to_string()];
        let avg = r.expect_multinomial(&vars, &Poly::constant(f64::from(n)), &p).unwrap();
        let fact = |k: u32| (1..=k).map(f64::from).product::<f64>();
        let mut exact = 0.0;
        for a in 0..=n {
            for b in 0..=n - a {
                let c = n - a - b;
                let w = fact(n) / (fact(a) * fact(b) * fact(c))
                    * p[0].powi(a as i32)
                    * p[1].powi(b as i32)
                    * p[2].powi(c as i32);
                exact += w * f64::from(a * a * b);
            }
        }
        assert!((avg.num.as_constant().unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn substitution_clears_denominators() {
        let r = RationalFn::new(Poly::var("x"), Poly::one().add(&Poly::var("x"))).unwrap();
        let q = RationalFn::new(Poly::var("a"), Poly::var("b")).unwrap();
        let s = r.subst("x", &q);
        let e = env(&[("a", 2.0), ("b", 3.0)]);
        assert!((s.eval(&e).unwrap() - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn compiled_matches_eval() {
        let r = RationalFn::new(
            Poly::var("a").mul(&Poly::var("b")).scale(2.0),
            Poly::var("a").add(&Poly::constant(1.0)),
        )
        .unwrap();
        let names = ["a", "b"];
        let c = r.compile(&|s| names.iter().position(|n| *n == s)).unwrap();
        assert_eq!(c.eval(&[1.0, 3.0]), 3.0);
    }

    #[test]
    fn sum_merges_common_denominators() {
        let mut s = RationalSum::default();
        s.push(RationalFn::var("x"));
        s.push(RationalFn::var("y"));
        assert_eq!(s.terms.len(), 1);
        assert_eq!(s.to_string(), "x+y");
    }
}
