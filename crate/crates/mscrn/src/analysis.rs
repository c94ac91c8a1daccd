//! Time-scale classification, conserved quantities of the fast subnetwork and the
//! spatial averaging case.

use std::collections::BTreeSet;

use num_integer::Integer;
use num_rational::Rational64;
use num_traits::{Signed, Zero};

use crate::error::{Error, Result};
use crate::model::{format_exponent, Exponent, IntMatrix, Model, Movement, Network, RateLaw, Reaction, Species};

/// Number of separated time scales after normalization of the largest gap to one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScaleClass {
    SingleScale,
    TwoScale { epsilon: Exponent },
    ThreeScale { epsilon1: Exponent, epsilon2: Exponent },
}

impl ScaleClass {
    pub fn name(&self) -> &'static str {
        match self {
            ScaleClass::SingleScale => "single-scale",
            ScaleClass::TwoScale { .. } => "two-scale",
            ScaleClass::ThreeScale { .. } => "three-scale",
        }
    }
}

/// Species and reactions that evolve on one time scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Tier {
    /// Gap `max_{k in K_i} (beta_k + gamma) - alpha_i` shared by the species of the tier.
    pub gap: Exponent,
    pub species: Vec<usize>,
    /// Union over the tier's species of `{k in K_i : beta_k + gamma = alpha_i + gap}`.
    pub reactions: BTreeSet<usize>,
    /// The part of `reactions` contributed by counted species.
    pub discrete_reactions: BTreeSet<usize>,
    /// The part of `reactions` contributed by concentration species.
    pub continuous_reactions: BTreeSet<usize>,
    /// Limiting stoichiometry: rows `species`, columns `reactions`.
    pub zeta: IntMatrix,
}

impl Tier {
    pub fn contains_species(&self, i: usize) -> bool {
        self.species.contains(&i)
    }

    /// Whether reaction `k` acts on the tier as a jump (changes a counted species).
    pub fn is_jump(&self, k: usize) -> bool {
        self.discrete_reactions.contains(&k)
    }
}

/// Result of [`classify`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleClassification {
    pub class: ScaleClass,
    /// Distinct gaps in increasing order, before normalization.
    pub gaps: Vec<Exponent>,
    /// Tiers from slowest to fastest. A single-scale network has one tier.
    pub tiers: Vec<Tier>,
    /// Species with `K_i` empty; they are constant and take no part in the reduction.
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
    /// Effective rate exponents `beta_k + gamma`.
    pub effective_beta: Vec<Exponent>,
}

impl ScaleClassification {
    pub fn slow(&self) -> &Tier {
        &self.tiers[0]
    }

    pub fn fast(&self) -> Option<&Tier> {
        (self.tiers.len() > 1).then(|| &self.tiers[self.tiers.len() - 1])
    }

    pub fn middle(&self) -> Option<&Tier> {
        (self.tiers.len() == 3).then(|| &self.tiers[1])
    }

    /// All species that take part in the dynamics.
    pub fn retained(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.tiers.iter().flat_map(|t| t.species.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    /// Index of the tier holding species `i`.
    pub fn tier_of(&self, i: usize) -> Option<usize> {
        self.tiers.iter().position(|t| t.contains_species(i))
    }
}

fn tier_for(net: &Network, beta: &[Exponent], sets: &[BTreeSet<usize>], species: Vec<usize>, gap: Exponent) -> Result<Tier> {
    let mut reactions = BTreeSet::new();
    let mut discrete_reactions = BTreeSet::new();
    let mut continuous_reactions = BTreeSet::new();
    for &i in &species {
        let alpha = net.species[i].alpha;
        for &k in &sets[i] {
            if beta[k] == alpha + gap {
                reactions.insert(k);
                if net.species[i].is_discrete() {
                    discrete_reactions.insert(k);
                } else {
                    continuous_reactions.insert(k);
                }
            }
        }
    }
    let mut data = Vec::with_capacity(species.len());
    for &i in &species {
        let alpha = net.species[i].alpha;
        let mut row = Vec::with_capacity(reactions.len());
        for &k in &reactions {
            let z = net.reactions[k].change(i);
            let e = beta[k] - alpha - gap;
            row.push(if z == 0 || e.is_negative() {
                0
            } else if e.is_zero() {
                z
            } else {
                return Err(Error::validation(format!(
                    "reaction {} changes species {} faster than its tier allows",
                    k + 1,
                    net.species[i].name
                )));
            });
        }
        data.push(row);
    }
    let zeta = IntMatrix { rows: species.clone(), cols: reactions.iter().copied().collect(), data };
    Ok(Tier { gap, species, reactions, discrete_reactions, continuous_reactions, zeta })
}

/// Classify the time scales of a network from its exponents.
pub fn classify(model: &Model) -> Result<ScaleClassification> {
    let net = &model.network;
    let gamma = model.scaling.gamma;
    let beta: Vec<Exponent> = net.reactions.iter().map(|r| r.beta + gamma).collect();
    let sets = net.species_reaction_sets();
    let mut warnings = Vec::new();
    let mut dropped = Vec::new();
    let mut gap_of: Vec<Option<Exponent>> = vec![None; net.species.len()];
    for (i, s) in net.species.iter().enumerate() {
        match sets[i].iter().map(|&k| beta[k]).max() {
            None => {
                dropped.push(i);
                warnings.push(format!("species {} is never changed and was removed", s.name));
            }
            Some(m) => {
                let g = m - s.alpha;
                if g.is_negative() {
                    return Err(Error::Unclassifiable(format!(
                        "species {} has abundance exponent {} above its fastest rate exponent {}",
                        s.name,
                        format_exponent(s.alpha),
                        format_exponent(m)
                    )));
                }
                gap_of[i] = Some(g);
            }
        }
    }
    let gaps: Vec<Exponent> = gap_of.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if gaps.is_empty() {
        return Err(Error::Unclassifiable("no species is changed by any reaction".into()));
    }
    if !gaps[0].is_zero() {
        return Err(Error::Unclassifiable(format!(
            "no species evolves on the slow time scale: smallest gap is {}",
            format_exponent(gaps[0])
        )));
    }
    if gaps.len() > 3 {
        return Err(Error::Unclassifiable(format!("{} distinct time scales", gaps.len())));
    }
    let class = match gaps.len() {
        1 => ScaleClass::SingleScale,
        2 => ScaleClass::TwoScale { epsilon: Exponent::from_integer(1) },
        _ => ScaleClass::ThreeScale { epsilon1: gaps[1] / gaps[2], epsilon2: Exponent::from_integer(1) },
    };
    let tiers = gaps
        .iter()
        .map(|&g| {
            let species: Vec<usize> = (0..net.species.len()).filter(|&i| gap_of[i] == Some(g)).collect();
            tier_for(net, &beta, &sets, species, g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaleClassification { class, gaps, tiers, dropped, warnings, effective_beta: beta })
}

/// A linear combination `<theta, X_f>` of fast species preserved by the fast reactions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConservedQuantity {
    /// `(species, coefficient)` pairs with nonzero coefficients.
    pub theta: Vec<(usize, i64)>,
    /// Common abundance exponent of the species in the support.
    pub alpha: Exponent,
    /// `K_theta`: reactions that change the quantity on its own time scale.
    pub reactions: BTreeSet<usize>,
}

impl ConservedQuantity {
    pub fn is_discrete(&self) -> bool {
        self.alpha.is_zero()
    }

    pub fn coefficient(&self, species: usize) -> i64 {
        self.theta.iter().find(|(s, _)| *s == species).map_or(0, |(_, c)| *c)
    }

    /// `<theta, zeta_k>` over the full stoichiometry.
    pub fn change(&self, net: &Network, k: usize) -> i64 {
        self.theta.iter().map(|&(i, c)| c * net.reactions[k].change(i)).sum()
    }

    pub fn value(&self, state: &[f64]) -> f64 {
        self.theta.iter().map(|&(i, c)| c as f64 * state[i]).sum()
    }
}

/// Conserved quantities of the fast tier and their limiting stoichiometry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConservedBasis {
    pub quantities: Vec<ConservedQuantity>,
    /// `K^c`, the union of the `K_theta`.
    pub reactions: BTreeSet<usize>,
    /// Rows indexed by quantity, columns by `reactions`.
    pub zeta: Option<IntMatrix>,
}

impl ConservedBasis {
    pub fn is_empty(&self) -> bool {
        self.quantities.is_empty()
    }

    /// Reactions of `K^c` that change a counted conserved quantity.
    pub fn is_jump(&self, k: usize) -> bool {
        self.quantities.iter().any(|q| q.is_discrete() && q.reactions.contains(&k))
    }
}

/// Integer basis of the null space of `m` (rows of equal length), each vector primitive
/// with positive leading entry, reduced and sorted lexicographically.
pub fn integer_null_space(m: &[Vec<i64>], n_cols: usize) -> Vec<Vec<i64>> {
    let mut a: Vec<Vec<Rational64>> =
        m.iter().map(|r| r.iter().map(|&x| Rational64::from_integer(x)).collect()).collect();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..n_cols {
        let Some(p) = (row..a.len()).find(|&r| !a[r][col].is_zero()) else { continue };
        a.swap(row, p);
        let inv = a[row][col].recip();
        for x in a[row].iter_mut() {
            *x *= inv;
        }
        for r in 0..a.len() {
            if r != row && !a[r][col].is_zero() {
                let f = a[r][col];
                for c in 0..n_cols {
                    let delta = f * a[row][c];
                    a[r][c] -= delta;
                }
            }
        }
        pivots.push(col);
        row += 1;
        if row == a.len() {
            break;
        }
    }
    let mut basis: Vec<Vec<i64>> = Vec::new();
    for free in (0..n_cols).filter(|c| !pivots.contains(c)) {
        let mut v = vec![Rational64::zero(); n_cols];
        v[free] = Rational64::from_integer(1);
        for (r, &pc) in pivots.iter().enumerate() {
            v[pc] = -a[r][free];
        }
        let l = v.iter().fold(1i64, |acc, x| acc.lcm(x.denom()));
        basis.push(primitive(v.iter().map(|x| (x * l).to_integer()).collect()));
    }
    reduce_basis(&mut basis);
    for v in basis.iter_mut() {
        *v = primitive(std::mem::take(v));
    }
    basis.sort();
    basis
}

fn primitive(v: Vec<i64>) -> Vec<i64> {
    let g = v.iter().fold(0i64, |acc, x| acc.gcd(x));
    let sign = v.iter().find(|x| **x != 0).map_or(1, |x| x.signum());
    if g == 0 {
        return v;
    }
    v.into_iter().map(|x| sign * x / g).collect()
}

fn norm2(v: &[i64]) -> i128 {
    v.iter().map(|&x| i128::from(x) * i128::from(x)).sum()
}

/// Pairwise size reduction: replace `b_i` by `b_i - c b_j` while that shortens it.
fn reduce_basis(basis: &mut [Vec<i64>]) {
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                if i == j {
                    continue;
                }
                let dot: i128 = basis[i].iter().zip(&basis[j]).map(|(&a, &b)| i128::from(a) * i128::from(b)).sum();
                let nj = norm2(&basis[j]);
                if nj == 0 {
                    continue;
                }
                let c = (dot as f64 / nj as f64).round() as i64;
                if c == 0 {
                    continue;
                }
                let cand: Vec<i64> = basis[i].iter().zip(&basis[j]).map(|(&a, &b)| a - c * b).collect();
                if norm2(&cand) < norm2(&basis[i]) {
                    basis[i] = cand;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Conserved quantities of the fastest tier.
pub fn conserved_basis(model: &Model, cls: &ScaleClassification) -> Result<ConservedBasis> {
    let Some(fast) = cls.fast() else {
        return Err(Error::Model("conserved quantities need at least two time scales".into()));
    };
    let zf = &fast.zeta;
    let n_f = fast.species.len();
    // (zeta^f)^t: one row per fast reaction
    let rows: Vec<Vec<i64>> = (0..zf.cols.len()).map(|c| (0..n_f).map(|r| zf.data[r][c]).collect()).collect();
    let vectors: Vec<Vec<(usize, i64)>> = integer_null_space(&rows, n_f)
        .iter()
        .map(|v| fast.species.iter().zip(v).filter(|(_, c)| **c != 0).map(|(&i, &c)| (i, c)).collect())
        .collect();
    conserved_from_vectors(model, cls, vectors)
}

/// Check candidate conserved vectors and assemble their reaction sets and stoichiometry.
pub fn conserved_from_vectors(
    model: &Model,
    cls: &ScaleClassification,
    vectors: Vec<Vec<(usize, i64)>>,
) -> Result<ConservedBasis> {
    let net = &model.network;
    let mut quantities = Vec::new();
    for (j, theta) in vectors.into_iter().enumerate() {
        let alphas: BTreeSet<Exponent> = theta.iter().map(|(i, _)| net.species[*i].alpha).collect();
        if alphas.len() > 1 {
            return Err(Error::MixedAlpha { index: j, alphas: alphas.into_iter().map(format_exponent).collect() });
        }
        let alpha = *alphas.iter().next().expect("nonzero null vector");
        let mut q = ConservedQuantity { theta, alpha, reactions: BTreeSet::new() };
        for k in 0..net.reactions.len() {
            if q.change(net, k) == 0 {
                continue;
            }
            let b = cls.effective_beta[k];
            if b > alpha {
                return Err(Error::TimescaleViolation {
                    index: j,
                    detail: format!(
                        "reaction {} has rate exponent {} above abundance exponent {}",
                        k + 1,
                        format_exponent(b),
                        format_exponent(alpha)
                    ),
                });
            }
            if b == alpha {
                q.reactions.insert(k);
            }
        }
        quantities.push(q);
    }
    let reactions: BTreeSet<usize> = quantities.iter().flat_map(|q| q.reactions.iter().copied()).collect();
    let overlap: Vec<usize> = reactions.intersection(&cls.slow().reactions).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Overlap { reactions: overlap.iter().map(|k| k + 1).collect() });
    }
    let zeta = (!quantities.is_empty()).then(|| IntMatrix {
        rows: (0..quantities.len()).collect(),
        cols: reactions.iter().copied().collect(),
        data: quantities
            .iter()
            .map(|q| reactions.iter().map(|&k| if q.reactions.contains(&k) { q.change(net, k) } else { 0 }).collect())
            .collect(),
    });
    Ok(ConservedBasis { quantities, reactions, zeta })
}

/// Relative ordering of the movement and reaction time scales of the two tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialCase {
    /// Both tiers mix between compartments faster than they react.
    Case1,
    /// Slow species mix fast, fast species react before they move.
    Case2,
    /// Fast species mix fast, slow species move slower than they react.
    Case3,
    /// Both tiers react before they move.
    Case4,
}

impl SpatialCase {
    pub fn number(self) -> u8 {
        match self {
            SpatialCase::Case1 => 1,
            SpatialCase::Case2 => 2,
            SpatialCase::Case3 => 3,
            SpatialCase::Case4 => 4,
        }
    }
}

/// Select the averaging case from the movement exponents of the fast and slow tiers.
pub fn spatial_case(eta_f: Exponent, eta_s: Exponent) -> Result<SpatialCase> {
    let one = Exponent::from_integer(1);
    if eta_f == one {
        return Err(Error::DegenerateEta { tier: "fast".into() });
    }
    if eta_s == one {
        return Err(Error::DegenerateEta { tier: "slow".into() });
    }
    Ok(match (eta_f > one, eta_s > one) {
        (true, true) => SpatialCase::Case1,
        (true, false) => SpatialCase::Case2,
        (false, true) => SpatialCase::Case3,
        (false, false) => SpatialCase::Case4,
    })
}

fn tier_eta(model: &Model, species: &[usize], tier: &str) -> Result<Exponent> {
    let mut etas = BTreeSet::new();
    for &i in species {
        let s = &model.network.species[i];
        let eta = s.eta.ok_or_else(|| Error::validation(format!("species {} needs a movement exponent eta", s.name)))?;
        etas.insert(eta);
    }
    match etas.len() {
        1 => Ok(*etas.iter().next().expect("one element")),
        0 => Err(Error::validation(format!("{tier} tier is empty"))),
        _ => Err(Error::HeterogeneousEta {
            tier: tier.into(),
            detail: etas.into_iter().map(format_exponent).collect::<Vec<_>>().join(", "),
        }),
    }
}

/// Movement exponents `(eta_f, eta_s)` of a two-scale spatial model and the resulting case.
pub fn spatial_case_for(model: &Model, cls: &ScaleClassification) -> Result<(Exponent, Exponent, SpatialCase)> {
    let fast = cls.fast().ok_or_else(|| Error::Model("spatial cases need two time scales".into()))?;
    let eta_f = tier_eta(model, &fast.species, "fast")?;
    let eta_s = tier_eta(model, &cls.slow().species, "slow")?;
    Ok((eta_f, eta_s, spatial_case(eta_f, eta_s)?))
}

/// Flatten a spatial model into a non-spatial one over species-compartment pairs
/// named `A@c`, with one chemical reaction per compartment and one reaction per
/// positive movement rate. Movement of species `i` has rate exponent `alpha_i + eta_i`.
pub fn movement_as_reactions(model: &Model) -> Result<Model> {
    let Some(g) = &model.geometry else {
        return Err(Error::Model("model has no compartments".into()));
    };
    let net = &model.network;
    let dd = g.compartments.len();
    let mut species = Vec::with_capacity(net.species.len() * dd);
    for s in &net.species {
        for c in &g.compartments {
            species.push(Species { name: format!("{}@{}", s.name, c), alpha: s.alpha, eta: None });
        }
    }
    let mut reactions = Vec::new();
    for d in 0..dd {
        for r in &net.reactions {
            let map = |side: &[(usize, u32)]| side.iter().map(|&(i, m)| (i * dd + d, m)).collect();
            let rate = match &r.rate {
                RateLaw::MassAction { kappa } => RateLaw::MassAction { kappa: vec![kappa[d]] },
                RateLaw::Expression { exprs } => {
                    RateLaw::Expression { exprs: vec![exprs[d].map_vars(&|i| i * dd + d)] }
                }
            };
            reactions.push(Reaction {
                reactants: map(&r.reactants),
                products: map(&r.products),
                beta: r.beta,
                rate,
                catalytic: r.catalytic,
            });
        }
    }
    for Movement { species: i, from, to, rate } in &g.movement {
        if *rate == 0.0 {
            continue;
        }
        let s = &net.species[*i];
        let eta = s.eta.ok_or_else(|| Error::validation(format!("species {} needs a movement exponent eta", s.name)))?;
        reactions.push(Reaction {
            reactants: vec![(i * dd + from, 1)],
            products: vec![(i * dd + to, 1)],
            beta: s.alpha + eta,
            rate: RateLaw::MassAction { kappa: vec![*rate] },
            catalytic: false,
        });
    }
    let mut flat = Model::new(Network { species, reactions });
    flat.scaling = model.scaling.clone();
    flat.validate()?;
    Ok(flat)
}
