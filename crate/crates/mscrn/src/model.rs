//! Reaction networks, scaling exponents, compartments and rate evaluation.

use std::collections::BTreeSet;

use num_rational::Rational64;
use num_traits::{Signed, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::symbolic::{Poly, RationalFn};

/// Exact scaling exponent.
pub type Exponent = Rational64;

/// Convert an exponent to a float.
pub fn exp_f64(e: Exponent) -> f64 {
    *e.numer() as f64 / *e.denom() as f64
}

/// Render an exponent as `p` or `p/q`.
pub fn format_exponent(e: Exponent) -> String {
    if *e.denom() == 1 {
        e.numer().to_string()
    } else {
        format!("{}/{}", e.numer(), e.denom())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    /// Abundance exponent: the species has order `N^alpha` molecules.
    pub alpha: Exponent,
    /// Movement exponent, required only for spatial models.
    pub eta: Option<Exponent>,
}

impl Species {
    pub fn new(name: &str, alpha: Exponent) -> Self {
        Species { name: name.to_string(), alpha, eta: None }
    }

    /// Species with zero abundance exponent are counted, the others are concentrations.
    pub fn is_discrete(&self) -> bool {
        self.alpha.is_zero()
    }
}

/// Rate law of one reaction, with one entry per compartment.
#[derive(Debug, Clone, PartialEq)]
pub enum RateLaw {
    MassAction { kappa: Vec<f64> },
    /// Expressions over the scaled abundances of the compartment, one per compartment.
    Expression { exprs: Vec<Expr> },
}

impl RateLaw {
    pub fn len(&self) -> usize {
        match self {
            RateLaw::MassAction { kappa } => kappa.len(),
            RateLaw::Expression { exprs } => exprs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    /// `(species, multiplicity)` consumed, sorted by species.
    pub reactants: Vec<(usize, u32)>,
    /// `(species, multiplicity)` produced, sorted by species.
    pub products: Vec<(usize, u32)>,
    /// Rate exponent.
    pub beta: Exponent,
    pub rate: RateLaw,
    /// Marks a reaction whose net change is zero.
    pub catalytic: bool,
}

impl Reaction {
    pub fn reactant_order(&self, i: usize) -> u32 {
        self.reactants.iter().find(|(s, _)| *s == i).map_or(0, |(_, n)| *n)
    }

    pub fn product_order(&self, i: usize) -> u32 {
        self.products.iter().find(|(s, _)| *s == i).map_or(0, |(_, n)| *n)
    }

    /// Net change `nu' - nu` of species `i`.
    pub fn change(&self, i: usize) -> i64 {
        i64::from(self.product_order(i)) - i64::from(self.reactant_order(i))
    }

    pub fn species(&self) -> BTreeSet<usize> {
        self.reactants.iter().chain(&self.products).map(|(s, _)| *s).collect()
    }
}

/// Integer matrix with row and column labels (species and reaction indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub data: Vec<Vec<i64>>,
}

impl IntMatrix {
    pub fn get(&self, row: usize, col: usize) -> Option<i64> {
        let r = self.rows.iter().position(|x| *x == row)?;
        let c = self.cols.iter().position(|x| *x == col)?;
        Some(self.data[r][c])
    }

    pub fn column(&self, col: usize) -> Option<Vec<i64>> {
        let c = self.cols.iter().position(|x| *x == col)?;
        Some(self.data.iter().map(|r| r[c]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub species: Vec<Species>,
    pub reactions: Vec<Reaction>,
}

impl Network {
    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    /// Stoichiometric matrix with `zeta[i][k] = nu'_ik - nu_ik`.
    pub fn stoichiometric_matrix(&self) -> IntMatrix {
        let data = (0..self.species.len())
            .map(|i| self.reactions.iter().map(|r| r.change(i)).collect())
            .collect();
        IntMatrix { rows: (0..self.species.len()).collect(), cols: (0..self.reactions.len()).collect(), data }
    }

    /// `K_i`: the reactions that change species `i`.
    pub fn species_reaction_sets(&self) -> Vec<BTreeSet<usize>> {
        (0..self.species.len())
            .map(|i| (0..self.reactions.len()).filter(|&k| self.reactions[k].change(i) != 0).collect())
            .collect()
    }

    /// Reactions with zero net change.
    pub fn catalytic_only(&self) -> Vec<usize> {
        (0..self.reactions.len())
            .filter(|&k| (0..self.species.len()).all(|i| self.reactions[k].change(i) == 0))
            .collect()
    }
}

/// Global scaling overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSpec {
    /// Time exponent: time is measured in units of `N^-gamma`.
    pub gamma: Exponent,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec { gamma: Exponent::zero() }
    }
}

/// Movement of one species between two compartments at rate `rate` per molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Movement {
    pub species: usize,
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub compartments: Vec<String>,
    pub movement: Vec<Movement>,
}

/// Initial scaled abundance. Without a compartment the value is a total that is
/// spread over the compartments according to the movement equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct InitEntry {
    pub species: usize,
    pub compartment: Option<usize>,
    pub value: f64,
}

/// A state vector. Spatial states are laid out species-major: index `i * D + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub values: Vec<f64>,
    /// `true` for scaled abundances `V = N^-alpha X`, `false` for raw counts.
    pub scaled: bool,
}

impl State {
    pub fn scaled(values: Vec<f64>) -> Self {
        State { values, scaled: true }
    }

    pub fn raw(values: Vec<f64>) -> Self {
        State { values, scaled: false }
    }
}

/// A reaction network together with its scaling and optional spatial structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: Network,
    pub scaling: ScalingSpec,
    pub geometry: Option<Geometry>,
    pub init: Vec<InitEntry>,
}

/// Falling factorial `x (x-1) ... (x-n+1)`.
pub fn falling(x: f64, n: u32) -> f64 {
    (0..n).fold(1.0, |acc, j| acc * (x - f64::from(j)))
}

impl Model {
    pub fn new(network: Network) -> Self {
        Model { network, scaling: ScalingSpec::default(), geometry: None, init: Vec::new() }
    }

    pub fn is_spatial(&self) -> bool {
        self.geometry.is_some()
    }

    /// Number of compartments; a non-spatial model has one implicit compartment.
    pub fn n_compartments(&self) -> usize {
        self.geometry.as_ref().map_or(1, |g| g.compartments.len())
    }

    pub fn n_species(&self) -> usize {
        self.network.species.len()
    }

    /// Dimension of a full state vector.
    pub fn state_len(&self) -> usize {
        self.n_species() * self.n_compartments()
    }

    pub fn state_index(&self, species: usize, compartment: usize) -> usize {
        species * self.n_compartments() + compartment
    }

    /// Names of the state coordinates (`A` or `A@c1`).
    pub fn state_labels(&self) -> Vec<String> {
        match &self.geometry {
            None => self.network.species.iter().map(|s| s.name.clone()).collect(),
            Some(g) => self
                .network
                .species
                .iter()
                .flat_map(|s| g.compartments.iter().map(move |c| format!("{}@{}", s.name, c)))
                .collect(),
        }
    }

    /// Put the model into canonical order and check its invariants.
    pub fn validate(&mut self) -> Result<()> {
        let net = &mut self.network;
        if net.species.is_empty() {
            return Err(Error::validation("model declares no species"));
        }
        let mut names = BTreeSet::new();
        for s in &net.species {
            if !names.insert(s.name.as_str()) {
                return Err(Error::validation(format!("duplicate species '{}'", s.name)));
            }
            if s.alpha.is_negative() {
                return Err(Error::validation(format!("species '{}' has negative alpha", s.name)));
            }
            if let Some(eta) = s.eta {
                if !eta.is_positive() {
                    return Err(Error::validation(format!("species '{}' needs a positive eta", s.name)));
                }
            }
        }
        let n = net.species.len();
        let d = self.geometry.as_ref().map_or(1, |g| g.compartments.len());
        for (k, r) in net.reactions.iter_mut().enumerate() {
            r.reactants.sort_unstable();
            r.products.sort_unstable();
            if r.reactants.iter().chain(&r.products).any(|(i, m)| *i >= n || *m == 0) {
                return Err(Error::validation(format!("reaction {} refers to an unknown species", k + 1)));
            }
            if r.rate.len() != d {
                return Err(Error::validation(format!(
                    "reaction {} has {} rate entries for {} compartments",
                    k + 1,
                    r.rate.len(),
                    d
                )));
            }
            if let RateLaw::MassAction { kappa } = &r.rate {
                if kappa.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::validation(format!("reaction {} has a negative rate constant", k + 1)));
                }
            }
            let zero = (0..n).all(|i| r.change(i) == 0);
            if zero && !r.catalytic {
                return Err(Error::validation(format!(
                    "reaction {} has no net effect and is not marked catalytic",
                    k + 1
                )));
            }
            if !zero && r.catalytic {
                return Err(Error::validation(format!("reaction {} is marked catalytic but changes species", k + 1)));
            }
        }
        if let Some(g) = &mut self.geometry {
            if g.compartments.is_empty() {
                return Err(Error::validation("compartment block is empty"));
            }
            let mut cn = BTreeSet::new();
            for c in &g.compartments {
                if !cn.insert(c.as_str()) {
                    return Err(Error::validation(format!("duplicate compartment '{c}'")));
                }
            }
            for m in &g.movement {
                if m.species >= n || m.from >= d || m.to >= d {
                    return Err(Error::validation("movement refers to an unknown species or compartment"));
                }
                if m.from == m.to {
                    return Err(Error::validation("movement within a single compartment"));
                }
                if !m.rate.is_finite() || m.rate < 0.0 {
                    return Err(Error::validation("negative movement rate"));
                }
            }
            g.movement.sort_by(|a, b| (a.species, a.from, a.to).cmp(&(b.species, b.from, b.to)));
            if g.movement.windows(2).any(|w| (w[0].species, w[0].from, w[0].to) == (w[1].species, w[1].from, w[1].to)) {
                return Err(Error::validation("duplicate movement entry"));
            }
        }
        for e in &self.init {
            if e.species >= n || e.compartment.is_some_and(|c| c >= d) || !e.value.is_finite() || e.value < 0.0 {
                return Err(Error::validation("invalid initial value"));
            }
        }
        self.init.sort_by(|a, b| (a.species, a.compartment).cmp(&(b.species, b.compartment)));
        Ok(())
    }

    /// Movement rate matrix `Q[d][d']` of one species; the diagonal holds minus the row sum.
    pub fn movement_generator(&self, species: usize) -> Vec<Vec<f64>> {
        let d = self.n_compartments();
        let mut q = vec![vec![0.0; d]; d];
        if let Some(g) = &self.geometry {
            for m in g.movement.iter().filter(|m| m.species == species) {
                q[m.from][m.to] += m.rate;
                q[m.from][m.from] -= m.rate;
            }
        }
        q
    }

    /// Rate of reaction `k` in compartment `d` from the scaled abundances `v` of that compartment.
    pub fn local_rate(&self, k: usize, d: usize, v: &[f64]) -> f64 {
        let r = &self.network.reactions[k];
        match &r.rate {
            RateLaw::MassAction { kappa } => {
                r.reactants.iter().fold(kappa[d], |acc, &(i, nu)| {
                    if self.network.species[i].is_discrete() {
                        acc * falling(v[i], nu)
                    } else {
                        acc * v[i].powi(nu as i32)
                    }
                })
            }
            RateLaw::Expression { exprs } => exprs[d].eval(&|i| v[i]),
        }
    }

    /// Rate of reaction `k`. Scaled states use the limiting rate law; raw states use
    /// mass action on counts `kappa * prod nu! C(x, nu)`.
    pub fn evaluate_rate(&self, k: usize, state: &State, compartment: Option<usize>) -> Result<f64> {
        if k >= self.network.reactions.len() {
            return Err(Error::Model(format!("no reaction with index {k}")));
        }
        if state.values.len() != self.state_len() {
            return Err(Error::Model(format!(
                "state has {} entries, expected {}",
                state.values.len(),
                self.state_len()
            )));
        }
        let d = match (self.is_spatial(), compartment) {
            (true, Some(d)) if d < self.n_compartments() => d,
            (false, None) => 0,
            _ => return Err(Error::Model("compartment must be given exactly for spatial models".into())),
        };
        let dd = self.n_compartments();
        let local: Vec<f64> = (0..self.n_species()).map(|i| state.values[i * dd + d]).collect();
        let r = &self.network.reactions[k];
        let value = if state.scaled {
            self.local_rate(k, d, &local)
        } else {
            match &r.rate {
                RateLaw::MassAction { kappa } => {
                    r.reactants.iter().fold(kappa[d], |acc, &(i, nu)| acc * falling(local[i], nu))
                }
                RateLaw::Expression { .. } => {
                    return Err(Error::Model("expression rate laws are defined on scaled abundances".into()))
                }
            }
        };
        if !value.is_finite() || value < 0.0 {
            return Err(Error::RateEvaluation { reaction: k, detail: format!("value {value}") });
        }
        Ok(value)
    }

    /// Rate of reaction `k` in compartment `d` as a rational function of the scaled
    /// abundances, with variables named by `var`. Mass-action constants are either
    /// numeric or the symbols `k1, k2, ...`.
    pub fn rate_rational(&self, k: usize, d: usize, var: &dyn Fn(usize) -> String, symbolic_kappa: bool) -> Option<RationalFn> {
        let r = &self.network.reactions[k];
        match &r.rate {
            RateLaw::MassAction { kappa } => {
                let mut p = if symbolic_kappa { Poly::var(&kappa_symbol(k)) } else { Poly::constant(kappa[d]) };
                for &(i, nu) in &r.reactants {
                    let x = Poly::var(&var(i));
                    p = p.mul(&if self.network.species[i].is_discrete() { x.falling(nu) } else { x.pow(nu) });
                }
                Some(p.into())
            }
            RateLaw::Expression { exprs } => exprs[d].to_rational(var),
        }
    }

    /// Scaled initial state. Totals without a compartment are split according to the
    /// movement equilibrium, rounding counts of discrete species by largest remainder.
    pub fn initial_state(&self) -> Result<State> {
        let dd = self.n_compartments();
        let mut values = vec![0.0; self.state_len()];
        for e in &self.init {
            match e.compartment {
                Some(d) => values[e.species * dd + d] = e.value,
                None if dd == 1 => values[e.species] = e.value,
                None => {
                    let pi = crate::averaging::movement_equilibrium(self, e.species)?;
                    let shares = if self.network.species[e.species].is_discrete() {
                        largest_remainder(e.value, &pi)?
                    } else {
                        pi.iter().map(|p| p * e.value).collect()
                    };
                    for (d, x) in shares.into_iter().enumerate() {
                        values[e.species * dd + d] = x;
                    }
                }
            }
        }
        Ok(State::scaled(values))
    }

    /// Convert a scaled state to raw counts at system size `n`.
    pub fn to_raw(&self, state: &State, n: f64) -> Result<State> {
        if !state.scaled {
            return Ok(state.clone());
        }
        let dd = self.n_compartments();
        let mut out = Vec::with_capacity(state.values.len());
        for (idx, v) in state.values.iter().enumerate() {
            let sp = &self.network.species[idx / dd];
            let x = v * n.powf(exp_f64(sp.alpha));
            let r = x.round();
            if sp.is_discrete() && (x - r).abs() > 1e-9 {
                return Err(Error::InvalidInitialState(format!("species {} has non-integer count {v}", sp.name)));
            }
            if r < 0.0 {
                return Err(Error::InvalidInitialState(format!("species {} is negative", sp.name)));
            }
            out.push(r);
        }
        Ok(State::raw(out))
    }

    /// Convert raw counts to scaled abundances at system size `n`.
    pub fn to_scaled(&self, state: &State, n: f64) -> State {
        if state.scaled {
            return state.clone();
        }
        let dd = self.n_compartments();
        let values = state
            .values
            .iter()
            .enumerate()
            .map(|(idx, x)| x / n.powf(exp_f64(self.network.species[idx / dd].alpha)))
            .collect();
        State::scaled(values)
    }
}

/// Symbol of the rate constant of reaction `k` (1-based in the name).
pub fn kappa_symbol(k: usize) -> String {
    format!("k{}", k + 1)
}

/// Split an integer total into integer parts proportional to `weights`.
pub fn largest_remainder(total: f64, weights: &[f64]) -> Result<Vec<f64>> {
    if total.fract() != 0.0 {
        return Err(Error::InvalidInitialState(format!("count {total} is not an integer")));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w * total).collect();
    let mut parts: Vec<f64> = exact.iter().map(|x| x.floor()).collect();
    let missing = (total - parts.iter().sum::<f64>()).round() as usize;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - parts[b]).total_cmp(&(exact[a] - parts[a])).then(a.cmp(&b)));
    for &i in order.iter().take(missing) {
        parts[i] += 1.0;
    }
    Ok(parts)
}
