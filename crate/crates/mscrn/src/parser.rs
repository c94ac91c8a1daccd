//! Reading and writing the line-oriented `.mscrn` model format.
//!
//! ```text
//! # comment
//! gamma 0
//! species A alpha=1 eta=2
//! species B alpha=0 eta=2
//! compartments c1 c2
//! A + B -> 0 @ mass_action(1, 2) beta=1
//! 0 -> B @ mass_action(1) beta=1
//! B -> 0 @ expr(B; 2*B) beta=1
//! move B from c1 to c2 rate 1.5
//! init A 1
//! init B in c1 3
//! ```
//!
//! Exponents are exact rationals written `p`, `p/q` or as a terminating decimal.
//! A single rate entry is shared by all compartments.

use std::fmt::Write as _;

use num_traits::Zero;

use crate::error::{Error, Result, Span};
use crate::averaging::nonspatial::kappa_values;
use crate::expr::parse_expr;
use crate::reduce::{Coordinate, ReducedModel};
use crate::model::{
    format_exponent, Exponent, Geometry, InitEntry, Model, Movement, Network, RateLaw, Reaction, ScalingSpec, Species,
};

/// A piece of a line together with its byte offset in that line.
#[derive(Debug, Clone, Copy)]
struct Piece<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> Piece<'a> {
    fn span(&self, line: usize) -> Span {
        Span { line, col: self.offset + 1, end_col: self.offset + self.text.len().max(1) + 1 }
    }

    fn trim(&self) -> Piece<'a> {
        let lead = self.text.len() - self.text.trim_start().len();
        Piece { text: self.text.trim(), offset: self.offset + lead }
    }

    fn slice(&self, start: usize, end: usize) -> Piece<'a> {
        Piece { text: &self.text[start..end], offset: self.offset + start }
    }

    fn words(&self) -> Vec<Piece<'a>> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, c) in self.text.char_indices() {
            match (c.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    out.push(self.slice(s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(self.slice(s, self.text.len()));
        }
        out
    }

    fn split(&self, sep: char) -> Vec<Piece<'a>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, c) in self.text.char_indices() {
            if c == sep {
                out.push(self.slice(start, i));
                start = i + c.len_utf8();
            }
        }
        out.push(self.slice(start, self.text.len()));
        out
    }
}

fn perr(message: impl Into<String>, piece: &Piece, line: usize) -> Error {
    Error::Parse { message: message.into(), span: piece.span(line) }
}

fn verr(message: impl Into<String>, piece: &Piece, line: usize) -> Error {
    Error::Validation { message: message.into(), span: Some(piece.span(line)) }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '\'')
}

/// Parse an exact rational written as an integer, `p/q` or a terminating decimal.
pub fn parse_rational(s: &str) -> Option<Exponent> {
    if let Some((p, q)) = s.split_once('/') {
        let p: i64 = p.trim().parse().ok()?;
        let q: i64 = q.trim().parse().ok()?;
        return (q != 0).then(|| Exponent::new(p, q));
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if (int.is_empty() && frac.is_empty())
        || !int.chars().all(|c| c.is_ascii_digit())
        || !frac.chars().all(|c| c.is_ascii_digit())
        || frac.len() > 15
    {
        return None;
    }
    let scale = 10i64.checked_pow(frac.len() as u32)?;
    let int_v: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac_v: i64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    let numer = int_v.checked_mul(scale)?.checked_add(frac_v)?;
    Some(Exponent::new(if neg { -numer } else { numer }, scale))
}

fn rational_at(piece: &Piece, line: usize) -> Result<Exponent> {
    parse_rational(piece.text).ok_or_else(|| perr(format!("invalid rational '{}'", piece.text), piece, line))
}

fn real_at(piece: &Piece, line: usize) -> Result<f64> {
    piece
        .text
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| perr(format!("invalid number '{}'", piece.text), piece, line))
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a)
}

struct Declarations {
    species: Vec<Species>,
    compartments: Option<Vec<String>>,
    gamma: Exponent,
}

fn parse_declarations(text: &str) -> Result<Declarations> {
    let mut decl = Declarations { species: Vec::new(), compartments: None, gamma: Exponent::zero() };
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let body = Piece { text: strip_comment(raw), offset: 0 };
        let words = body.words();
        let Some(head) = words.first() else { continue };
        match head.text {
            "species" => {
                let name = words.get(1).ok_or_else(|| perr("expected a species name", head, line))?;
                if !is_identifier(name.text) {
                    return Err(perr(format!("invalid species name '{}'", name.text), name, line));
                }
                if decl.species.iter().any(|s| s.name == name.text) {
                    return Err(verr(format!("duplicate species '{}'", name.text), name, line));
                }
                let mut sp = Species::new(name.text, Exponent::zero());
                for attr in &words[2..] {
                    let Some(eq) = attr.text.find('=') else {
                        return Err(perr("expected key=value", attr, line));
                    };
                    let value = attr.slice(eq + 1, attr.text.len());
                    match &attr.text[..eq] {
                        "alpha" => sp.alpha = rational_at(&value, line)?,
                        "eta" => sp.eta = Some(rational_at(&value, line)?),
                        _ => return Err(perr(format!("unknown attribute '{}'", &attr.text[..eq]), attr, line)),
                    }
                }
                decl.species.push(sp);
            }
            "compartment" | "compartments" => {
                if words.len() < 2 {
                    return Err(perr("expected compartment names", head, line));
                }
                let list = decl.compartments.get_or_insert_with(Vec::new);
                for w in &words[1..] {
                    if !is_identifier(w.text) {
                        return Err(perr(format!("invalid compartment name '{}'", w.text), w, line));
                    }
                    if list.iter().any(|c| c == w.text) {
                        return Err(verr(format!("duplicate compartment '{}'", w.text), w, line));
                    }
                    list.push(w.text.to_string());
                }
            }
            "gamma" => {
                let v = words.get(1).ok_or_else(|| perr("expected a rational", head, line))?;
                decl.gamma = rational_at(v, line)?;
            }
            _ => {}
        }
    }
    Ok(decl)
}

/// Parse a model from `.mscrn` text and validate it.
pub fn parse_model(text: &str) -> Result<Model> {
    let decl = parse_declarations(text)?;
    let spatial = decl.compartments.is_some();
    let compartments = decl.compartments.clone().unwrap_or_default();
    let n_comp = compartments.len().max(1);
    let species_of = |p: &Piece, line: usize| -> Result<usize> {
        decl.species
            .iter()
            .position(|s| s.name == p.text)
            .ok_or_else(|| verr(format!("undeclared species '{}'", p.text), p, line))
    };
    let compartment_of = |p: &Piece, line: usize| -> Result<usize> {
        compartments
            .iter()
            .position(|c| c == p.text)
            .ok_or_else(|| verr(format!("undeclared compartment '{}'", p.text), p, line))
    };

    let mut reactions = Vec::new();
    let mut movement = Vec::new();
    let mut init = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let body = Piece { text: strip_comment(raw), offset: 0 };
        let words = body.words();
        let Some(head) = words.first() else { continue };
        match head.text {
            "species" | "compartment" | "compartments" | "gamma" => {}
            "move" => {
                let expect = |i: usize, kw: &str| -> Result<Piece> {
                    let w = words.get(i).ok_or_else(|| perr(format!("expected '{kw}'"), head, line))?;
                    if !kw.is_empty() && w.text != kw {
                        return Err(perr(format!("expected '{kw}'"), w, line));
                    }
                    Ok(*w)
                };
                if !spatial {
                    return Err(verr("movement requires a compartments declaration", head, line));
                }
                let sp = species_of(&expect(1, "")?, line)?;
                expect(2, "from")?;
                let from = compartment_of(&expect(3, "")?, line)?;
                expect(4, "to")?;
                let to = compartment_of(&expect(5, "")?, line)?;
                expect(6, "rate")?;
                let rate_piece = expect(7, "")?;
                let rate = real_at(&rate_piece, line)?;
                if rate < 0.0 {
                    return Err(verr("negative movement rate", &rate_piece, line));
                }
                if let Some(extra) = words.get(8) {
                    return Err(perr("unexpected token", extra, line));
                }
                movement.push(Movement { species: sp, from, to, rate });
            }
            "init" => {
                let sp_piece = words.get(1).ok_or_else(|| perr("expected a species", head, line))?;
                let species = species_of(sp_piece, line)?;
                let (compartment, value_piece) = if words.get(2).is_some_and(|w| w.text == "in") {
                    let c = words.get(3).ok_or_else(|| perr("expected a compartment", &words[2], line))?;
                    (Some(compartment_of(c, line)?), words.get(4))
                } else {
                    (None, words.get(2))
                };
                let vp = value_piece.ok_or_else(|| perr("expected a value", head, line))?;
                let value = real_at(vp, line)?;
                if value < 0.0 {
                    return Err(verr("negative initial value", vp, line));
                }
                init.push(InitEntry { species, compartment, value });
            }
            _ => {
                let r = parse_reaction(&body, line, n_comp, &species_of, &decl.species)?;
                reactions.push(r);
            }
        }
    }

    let mut model = Model {
        network: Network { species: decl.species.clone(), reactions },
        scaling: ScalingSpec { gamma: decl.gamma },
        geometry: spatial.then(|| Geometry { compartments, movement }),
        init,
    };
    model.validate()?;
    Ok(model)
}

fn parse_side(side: &Piece, line: usize, species_of: &dyn Fn(&Piece, usize) -> Result<usize>) -> Result<Vec<(usize, u32)>> {
    let t = side.trim();
    if t.text == "0" || t.text == "∅" {
        return Ok(Vec::new());
    }
    if t.text.is_empty() {
        return Err(perr("empty reaction side, write 0 for no species", &t, line));
    }
    let mut out: Vec<(usize, u32)> = Vec::new();
    for term in t.split('+') {
        let term = term.trim();
        if term.text.is_empty() {
            return Err(perr("empty term", &term, line));
        }
        let digits = term.text.chars().take_while(char::is_ascii_digit).count();
        let (mult, rest) = if digits > 0 {
            let m: u32 = term.text[..digits]
                .parse()
                .map_err(|_| perr("invalid multiplicity", &term.slice(0, digits), line))?;
            let rest = term.slice(digits, term.text.len()).trim();
            let rest = match rest.text.strip_prefix('*') {
                Some(_) => rest.slice(1, rest.text.len()).trim(),
                None => rest,
            };
            (m, rest)
        } else {
            (1, term)
        };
        if mult == 0 {
            return Err(perr("multiplicity must be positive", &term, line));
        }
        if !is_identifier(rest.text) {
            return Err(perr(format!("invalid species term '{}'", term.text), &term, line));
        }
        let i = species_of(&rest, line)?;
        match out.iter_mut().find(|(s, _)| *s == i) {
            Some(e) => e.1 += mult,
            None => out.push((i, mult)),
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn parse_reaction(
    body: &Piece,
    line: usize,
    n_comp: usize,
    species_of: &dyn Fn(&Piece, usize) -> Result<usize>,
    species: &[Species],
) -> Result<Reaction> {
    let mut body = body.trim();
    if let Some(rest) = body.text.strip_prefix("reaction") {
        if rest.starts_with(char::is_whitespace) {
            body = body.slice(8, body.text.len()).trim();
        }
    }
    let arrow = body.text.find("->").ok_or_else(|| perr("expected a reaction 'lhs -> rhs @ rate'", &body, line))?;
    let at = body.text[arrow..]
        .find('@')
        .map(|p| p + arrow)
        .ok_or_else(|| perr("expected '@' followed by a rate law", &body.slice(arrow, body.text.len()), line))?;
    let reactants = parse_side(&body.slice(0, arrow), line, species_of)?;
    let products = parse_side(&body.slice(arrow + 2, at), line, species_of)?;
    let rest = body.slice(at + 1, body.text.len()).trim();

    let open = rest.text.find('(').ok_or_else(|| perr("expected mass_action(...) or expr(...)", &rest, line))?;
    let kind = rest.slice(0, open).trim();
    let mut depth = 0usize;
    let mut close = None;
    for (i, c) in rest.text[open..].char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    close = Some(open + i);
                    break;
                }
            }
            _ => {}
        }
    }
    let close = close.ok_or_else(|| perr("unbalanced parentheses", &rest.slice(open, open + 1), line))?;
    let args = rest.slice(open + 1, close);
    let entries: Vec<Piece> = match kind.text {
        "mass_action" => args.split(','),
        "expr" => args.split(';'),
        _ => return Err(perr(format!("unknown rate law '{}'", kind.text), &kind, line)),
    };
    if entries.len() != 1 && entries.len() != n_comp {
        return Err(verr(format!("expected 1 or {n_comp} rate entries, found {}", entries.len()), &args, line));
    }
    let rate = if kind.text == "mass_action" {
        let mut kappa = Vec::new();
        for e in &entries {
            let e = e.trim();
            let v = real_at(&e, line)?;
            if v < 0.0 {
                return Err(verr("negative rate constant", &e, line));
            }
            kappa.push(v);
        }
        if kappa.len() == 1 {
            kappa = vec![kappa[0]; n_comp];
        }
        RateLaw::MassAction { kappa }
    } else {
        let resolve = |name: &str| species.iter().position(|s| s.name == name);
        let mut exprs = Vec::new();
        for e in &entries {
            let e = e.trim();
            let ex = parse_expr(e.text, &resolve).map_err(|err| {
                let piece = e.slice(err.offset, (err.offset + err.len).min(e.text.len()));
                if err.message.starts_with("unknown identifier") {
                    verr(err.message.clone(), &piece, line)
                } else {
                    perr(err.message.clone(), &piece, line)
                }
            })?;
            exprs.push(ex);
        }
        if exprs.len() == 1 {
            exprs = vec![exprs[0].clone(); n_comp];
        }
        RateLaw::Expression { exprs }
    };

    let mut beta = Exponent::zero();
    let mut catalytic = false;
    for w in rest.slice(close + 1, rest.text.len()).words() {
        if w.text == "catalytic" {
            catalytic = true;
        } else if w.text.starts_with("beta=") {
            beta = rational_at(&w.slice(5, w.text.len()), line)?;
        } else {
            return Err(perr(format!("unexpected token '{}'", w.text), &w, line));
        }
    }
    let r = Reaction { reactants, products, beta, rate, catalytic };
    let zero = (0..species.len()).all(|i| r.change(i) == 0);
    if zero && !catalytic {
        return Err(verr("reaction has no net effect; mark it 'catalytic'", &body, line));
    }
    Ok(r)
}

fn format_side(model: &Model, side: &[(usize, u32)]) -> String {
    if side.is_empty() {
        return "0".into();
    }
    side.iter()
        .map(|&(i, m)| {
            let name = &model.network.species[i].name;
            if m == 1 {
                name.clone()
            } else {
                format!("{m} {name}")
            }
        })
        .collect::<Vec<_>>()
        .join(" + ")
}

/// Serialize a model in canonical form. The output is byte-deterministic and parses
/// back to an equal model.
pub fn serialize_model(model: &Model) -> String {
    let mut out = String::new();
    let net = &model.network;
    let _ = writeln!(out, "gamma {}", format_exponent(model.scaling.gamma));
    for s in &net.species {
        let _ = write!(out, "species {} alpha={}", s.name, format_exponent(s.alpha));
        if let Some(eta) = s.eta {
            let _ = write!(out, " eta={}", format_exponent(eta));
        }
        out.push('\n');
    }
    if let Some(g) = &model.geometry {
        let _ = writeln!(out, "compartments {}", g.compartments.join(" "));
    }
    let name = |i: usize| net.species[i].name.clone();
    for r in &net.reactions {
        let law = match &r.rate {
            RateLaw::MassAction { kappa } => {
                format!("mass_action({})", kappa.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "))
            }
            RateLaw::Expression { exprs } => format!(
                "expr({})",
                exprs.iter().map(|e| e.display(&name).to_string()).collect::<Vec<_>>().join("; ")
            ),
        };
        let _ = write!(
            out,
            "{} -> {} @ {} beta={}",
            format_side(model, &r.reactants),
            format_side(model, &r.products),
            law,
            format_exponent(r.beta)
        );
        if r.catalytic {
            out.push_str(" catalytic");
        }
        out.push('\n');
    }
    if let Some(g) = &model.geometry {
        for m in &g.movement {
            let _ = writeln!(
                out,
                "move {} from {} to {} rate {}",
                net.species[m.species].name, g.compartments[m.from], g.compartments[m.to], m.rate
            );
        }
    }
    for e in &model.init {
        match (e.compartment, &model.geometry) {
            (Some(c), Some(g)) => {
                let _ = writeln!(out, "init {} in {} {}", net.species[e.species].name, g.compartments[c], e.value);
            }
            _ => {
                let _ = writeln!(out, "init {} {}", net.species[e.species].name, e.value);
            }
        }
    }
    out
}

/// Serialize a reduced model: its coordinates, conserved quantities, limiting
/// stoichiometry and rate descriptors. Rates without a closed form are marked
/// `montecarlo` or `exact-sum`.
pub fn serialize_reduced(reduced: &ReducedModel) -> String {
    let mut out = String::new();
    let model = &reduced.model;
    let net = &model.network;
    let _ = writeln!(out, "class {}", reduced.classification.class.name());
    if let Some(case) = reduced.spatial_case {
        let _ = writeln!(out, "case {}", case.number());
    }
    for (c, x) in reduced.coordinates.iter().zip(&reduced.initial) {
        let kind = if c.discrete { "jump" } else { "flow" };
        match c.what {
            Coordinate::Species(i) => {
                let _ = writeln!(
                    out,
                    "species {} alpha={} {kind} init {x}",
                    c.name,
                    format_exponent(net.species[i].alpha)
                );
            }
            Coordinate::Conserved(j) => {
                let q = &reduced.basis.quantities[j];
                let theta = q
                    .theta
                    .iter()
                    .map(|&(i, t)| if t == 1 { net.species[i].name.clone() } else { format!("{t} {}", net.species[i].name) })
                    .collect::<Vec<_>>()
                    .join(" + ");
                let _ = writeln!(
                    out,
                    "conserved {} = {theta} alpha={} {kind} init {x}",
                    c.name,
                    format_exponent(q.alpha)
                );
            }
        }
    }
    if !model.is_spatial() {
        for (name, value) in kappa_values(model) {
            let _ = writeln!(out, "constant {name} = {value}");
        }
    }
    for r in &reduced.reactions {
        let change = r
            .change
            .iter()
            .map(|&(c, z)| format!("{}:{z}", reduced.coordinates[c].name))
            .collect::<Vec<_>>()
            .join(" ");
        let rate = r.rate.as_ref().map_or_else(|| "missing".to_string(), |a| a.kind.to_string());
        let kind = if r.jump { "jump" } else { "flow" };
        let _ = writeln!(out, "reaction R{} {kind} [{change}] rate {rate}", r.reaction + 1);
    }
    for w in &reduced.warnings {
        let _ = writeln!(out, "# warning: {w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const GENE: &str = "\
species G alpha=0
species Gp alpha=0
species P alpha=1
G + P -> Gp + P @ mass_action(1) beta=0
Gp -> G @ mass_action(1) beta=0
Gp -> Gp + P @ mass_action(2) beta=1
P -> 0 @ mass_action(1) beta=1
init G 1
";

    #[test]
    fn parses_gene_model() {
        let m = parse_model(GENE).unwrap();
        assert_eq!(m.network.species.len(), 3);
        assert_eq!(m.network.reactions.len(), 4);
        assert_eq!(m.network.reactions[0].reactants, vec![(0, 1), (2, 1)]);
        assert_eq!(m.network.reactions[2].beta, Exponent::from_integer(1));
    }

    #[test]
    fn reduced_example_has_closed_form_rate() {
        let text = "species A alpha=1\nspecies B alpha=0\nA + B -> 0 @ mass_action(1) beta=1\n0 -> B @ mass_action(1) beta=1\nB -> 0 @ mass_action(1) beta=1\ninit A 1\n";
        let red = crate::reduce::build_reduced_model(&parse_model(text).unwrap(), &Default::default()).unwrap();
        let out = serialize_reduced(&red);
        assert!(out.contains("species vA alpha=1 flow init 1"), "{out}");
        assert!(out.contains("reaction R1 flow [vA:-1] rate k1*k2*vA/(k3+k1*vA)"), "{out}");
    }

    #[test]
    fn monte_carlo_rates_are_marked() {
        let text = "species A alpha=1\nspecies B alpha=0\nA + B -> 0 @ mass_action(1) beta=1\n0 -> B @ mass_action(1) beta=1\n2 B -> B @ mass_action(1) beta=1\ninit A 1\n";
        let red = crate::reduce::build_reduced_model(&parse_model(text).unwrap(), &Default::default()).unwrap();
        assert!(serialize_reduced(&red).contains("rate montecarlo"));
    }

    #[test]
    fn rationals_are_exact() {
        assert_eq!(parse_rational("3/2"), Some(Exponent::new(3, 2)));
        assert_eq!(parse_rational("1.5"), Some(Exponent::new(3, 2)));
        assert_eq!(parse_rational("-0.25"), Some(Exponent::new(-1, 4)));
        assert_eq!(parse_rational("2"), Some(Exponent::from_integer(2)));
        assert_eq!(parse_rational("x"), None);
        assert_eq!(parse_rational("1/0"), None);
    }

    #[test]
    fn round_trip_is_stable() {
        let m = parse_model(GENE).unwrap();
        let text = serialize_model(&m);
        let again = parse_model(&text).unwrap();
        assert_eq!(m, again);
        assert_eq!(text, serialize_model(&again));
    }

    #[test]
    fn undeclared_species_points_at_token() {
        let err = parse_model("species A\nA + Q -> 0 @ mass_action(1)\n").unwrap_err();
        match err {
            Error::Validation { span: Some(s), .. } => assert_eq!((s.line, s.col, s.end_col), (2, 5, 6)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_exponent_is_a_parse_error() {
        let err = parse_model("species A alpha=1/x\n").unwrap_err();
        match err {
            Error::Parse { span, .. } => assert_eq!((span.line, span.col), (1, 17)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_species_block_is_rejected() {
        assert!(matches!(parse_model("# nothing\n"), Err(Error::Validation { .. })));
    }

    #[test]
    fn negative_rate_is_rejected() {
        assert!(matches!(
            parse_model("species A\nA -> 0 @ mass_action(-1)\n"),
            Err(Error::Validation { span: Some(_), .. })
        ));
    }

    #[test]
    fn spatial_entries_broadcast() {
        let text = "species A alpha=1 eta=2\ncompartments x y\nA -> 0 @ mass_action(2) beta=1\nmove A from x to y rate 1\n";
        let m = parse_model(text).unwrap();
        assert_eq!(m.network.reactions[0].rate, RateLaw::MassAction { kappa: vec![2.0, 2.0] });
        assert_eq!(parse_model(&serialize_model(&m)).unwrap(), m);
    }
}
