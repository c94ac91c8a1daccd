//! Stationary measures of fast subsystems and averaged rates of non-spatial two- and
//! three-scale networks.
//!
//! Reduced coordinates are the slow species followed by the conserved quantities of
//! the fast tier. Closed forms use the symbols `v<Species>` for abundances, `c1, c2, ...`
//! for conserved quantities and `k1, k2, ...` for mass-action constants.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::analysis::{ConservedBasis, ScaleClassification, Tier};
use crate::ensemble::replica_rng;
use crate::error::{Error, Result};
use crate::model::{kappa_symbol, Model, RateLaw};
use crate::pdmp::{simulate_pdmp, FlowReaction, HybridSystem, JumpReaction, OdeConfig, RateFn};
use crate::ssa::Trajectory;
use crate::symbolic::{RationalFn, RationalSum};

use super::closed::{birth_death_means, expect_over, SymbolicReaction, SymbolicVar};
use super::{point_stream, time_average, AveragedRate, AveragingOptions, Estimate, McConfig, Mode, RateKind};

/// Stationary law of a fast subsystem with the slower species frozen.
#[derive(Debug, Clone, PartialEq)]
pub enum StationaryMeasure {
    /// Independent Poisson laws (counted species) or point masses (concentrations).
    ProductPoisson { species: Vec<usize>, means: Vec<f64>, discrete: Vec<bool> },
    /// Deterministic fixed point.
    PointMass { species: Vec<usize>, state: Vec<f64> },
    /// Occupation measure of a long simulated path.
    Empirical { species: Vec<usize>, support: Vec<(Vec<f64>, f64)>, means: Vec<Estimate>, ess: f64 },
}

impl StationaryMeasure {
    pub fn species(&self) -> &[usize] {
        match self {
            StationaryMeasure::ProductPoisson { species, .. }
            | StationaryMeasure::PointMass { species, .. }
            | StationaryMeasure::Empirical { species, .. } => species,
        }
    }

    /// Mean of each fast species.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            StationaryMeasure::ProductPoisson { means, .. } => means.clone(),
            StationaryMeasure::PointMass { state, .. } => state.clone(),
            StationaryMeasure::Empirical { means, .. } => means.iter().map(|e| e.value).collect(),
        }
    }
}

pub(crate) fn var_name(model: &Model, i: usize) -> String {
    format!("v{}", model.network.species[i].name)
}

pub(crate) fn conserved_name(j: usize) -> String {
    format!("c{}", j + 1)
}

/// Numeric values of the mass-action symbols `k1, k2, ...`.
pub(crate) fn kappa_values(model: &Model) -> Vec<(String, f64)> {
    model
        .network
        .reactions
        .iter()
        .enumerate()
        .filter_map(|(k, r)| match &r.rate {
            RateLaw::MassAction { kappa } => Some((kappa_symbol(k), kappa[0])),
            RateLaw::Expression { .. } => None,
        })
        .collect()
}

/// Species whose abundances enter the rate law of reaction `k`.
pub(crate) fn rate_species(model: &Model, k: usize) -> Vec<usize> {
    let r = &model.network.reactions[k];
    match &r.rate {
        RateLaw::MassAction { .. } => r.reactants.iter().map(|(i, _)| *i).collect(),
        RateLaw::Expression { exprs } => {
            let mut v = Vec::new();
            for e in exprs {
                e.vars(&mut v);
            }
            v.sort_unstable();
            v.dedup();
            v
        }
    }
}

fn symbolic_rate(model: &Model, k: usize) -> Option<RationalFn> {
    model.rate_rational(k, 0, &|i| var_name(model, i), true)
}

/// Symbolic fast variables and reactions of a tier.
fn symbolic_tier(model: &Model, tier: &Tier) -> std::result::Result<(Vec<SymbolicVar>, Vec<SymbolicReaction>), String> {
    let vars = tier
        .species
        .iter()
        .map(|&i| SymbolicVar { name: var_name(model, i), discrete: model.network.species[i].is_discrete() })
        .collect();
    let reactions = tier
        .zeta
        .cols
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let rate = symbolic_rate(model, k).ok_or_else(|| format!("rate of reaction {} is not rational", k + 1))?;
            let change = (0..tier.species.len()).map(|r| (r, tier.zeta.data[r][c])).collect();
            Ok(SymbolicReaction { label: (k + 1).to_string(), rate, change })
        })
        .collect::<std::result::Result<_, String>>()?;
    Ok((vars, reactions))
}

/// Evaluation environment for closed forms: reduced coordinates first, then fixed symbols.
#[derive(Debug, Clone)]
pub(crate) struct Binding {
    pub names: Vec<String>,
    pub n_coords: usize,
    pub fixed: Vec<f64>,
}

impl Binding {
    pub fn new(coords: Vec<String>, fixed: Vec<(String, f64)>) -> Self {
        let n_coords = coords.len();
        let (names, values): (Vec<String>, Vec<f64>) = fixed.into_iter().unzip();
        Binding { names: coords.into_iter().chain(names).collect(), n_coords, fixed: values }
    }

    /// Evaluator of a closed form, or `None` if it refers to unbound symbols.
    pub fn closed_form(&self, reaction: usize, sum: RationalSum) -> Option<AveragedRate> {
        let compiled = sum.compile(&|s| self.names.iter().position(|n| n == s))?;
        let fixed = self.fixed.clone();
        let n_coords = self.n_coords;
        let eval = Arc::new(move |coords: &[f64]| {
            if coords.len() != n_coords {
                return Err(Error::Model(format!("expected {n_coords} reduced coordinates, got {}", coords.len())));
            }
            let env: Vec<f64> = coords.iter().chain(&fixed).copied().collect();
            let value = compiled.eval(&env);
            if !value.is_finite() || value < 0.0 {
                return Err(Error::RateEvaluation { reaction, detail: format!("averaged rate {value}") });
            }
            Ok(Estimate::exact(value))
        });
        Some(AveragedRate { reaction, kind: RateKind::ClosedForm(sum), eval })
    }
}

/// A non-spatial multiscale network prepared for averaging.
#[derive(Clone)]
pub(crate) struct Setup {
    pub model: Arc<Model>,
    pub cls: Arc<ScaleClassification>,
    pub basis: Arc<ConservedBasis>,
    /// Full state supplying dropped species and default fast starting values.
    pub template: Arc<Vec<f64>>,
}

impl Setup {
    pub fn new(model: &Model, cls: &ScaleClassification, basis: &ConservedBasis) -> Result<Self> {
        if model.is_spatial() {
            return Err(Error::Model("expected a non-spatial model".into()));
        }
        Ok(Setup {
            model: Arc::new(model.clone()),
            cls: Arc::new(cls.clone()),
            basis: Arc::new(basis.clone()),
            template: Arc::new(model.initial_state()?.values),
        })
    }

    pub fn coord_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.cls.slow().species.iter().map(|&i| var_name(&self.model, i)).collect();
        names.extend((0..self.basis.quantities.len()).map(conserved_name));
        names
    }

    pub fn binding(&self) -> Binding {
        let mut fixed: Vec<(String, f64)> =
            self.cls.dropped.iter().map(|&i| (var_name(&self.model, i), self.template[i])).collect();
        fixed.extend(kappa_values(&self.model));
        Binding::new(self.coord_names(), fixed)
    }

    /// Full state for reduced coordinates; fast species start on the constraint surface.
    pub fn full_state(&self, coords: &[f64]) -> Result<Vec<f64>> {
        let slow = &self.cls.slow().species;
        let nq = self.basis.quantities.len();
        if coords.len() != slow.len() + nq {
            return Err(Error::Model(format!(
                "expected {} reduced coordinates, got {}",
                slow.len() + nq,
                coords.len()
            )));
        }
        let mut full = (*self.template).clone();
        for (j, &i) in slow.iter().enumerate() {
            full[i] = coords[j];
        }
        if nq > 0 {
            place_on_constraints(&self.model, &self.basis, &coords[slow.len()..], &mut full)?;
        }
        Ok(full)
    }
}

/// Put the species of the conserved quantities at a point with `<theta_j, v> = c_j`.
pub(crate) fn place_on_constraints(model: &Model, basis: &ConservedBasis, c: &[f64], full: &mut [f64]) -> Result<()> {
    let mut assigned: Vec<usize> = Vec::new();
    for q in &basis.quantities {
        for &(i, _) in &q.theta {
            full[i] = 0.0;
        }
    }
    for (j, q) in basis.quantities.iter().enumerate() {
        let rest: f64 = q.theta.iter().filter(|(i, _)| assigned.contains(i)).map(|&(i, t)| t as f64 * full[i]).sum();
        let Some(&(i, t)) = q.theta.iter().find(|(i, t)| *t > 0 && !assigned.contains(i)) else {
            return Err(Error::InvalidInitialState(format!("cannot place conserved quantity c{}", j + 1)));
        };
        let x = (c[j] - rest) / t as f64;
        let discrete = model.network.species[i].is_discrete();
        if x < -1e-12 || discrete && (x - x.round()).abs() > 1e-9 {
            return Err(Error::InvalidInitialState(format!("conserved value c{} = {} is not reachable", j + 1, c[j])));
        }
        full[i] = if discrete { x.round() } else { x.max(0.0) };
        assigned.push(i);
    }
    Ok(())
}

/// Rate of reaction `k` as a function of the species of `species`, the rest frozen at `context`.
pub(crate) fn frozen_rate(model: &Arc<Model>, k: usize, species: &[usize], context: &[f64]) -> RateFn {
    let model = model.clone();
    let species = species.to_vec();
    let context = context.to_vec();
    Arc::new(move |v: &[f64]| {
        let mut full = context.clone();
        for (j, &i) in species.iter().enumerate() {
            full[i] = v[j];
        }
        Ok(model.local_rate(k, 0, &full))
    })
}

/// Hybrid system of one tier with the given rate of every tier reaction.
pub(crate) fn tier_system(model: &Model, tier: &Tier, rates: Vec<RateFn>) -> HybridSystem {
    let labels = tier.species.iter().map(|&i| model.network.species[i].name.clone()).collect();
    let mut sys = HybridSystem { labels, ..Default::default() };
    for ((c, &k), rate) in tier.zeta.cols.iter().enumerate().zip(rates) {
        let change: Vec<(usize, f64)> = (0..tier.species.len())
            .filter(|&r| tier.zeta.data[r][c] != 0)
            .map(|r| (r, tier.zeta.data[r][c] as f64))
            .collect();
        let label = format!("R{}", k + 1);
        if tier.is_jump(k) {
            sys.jumps.push(JumpReaction { label, rate, jump: change });
        } else {
            sys.flows.push(FlowReaction { label, rate, drift: change });
        }
    }
    sys
}

fn frozen_tier_system(model: &Arc<Model>, tier: &Tier, context: &[f64]) -> HybridSystem {
    let rates = tier.zeta.cols.iter().map(|&k| frozen_rate(model, k, &tier.species, context)).collect();
    tier_system(model, tier, rates)
}

fn fast_tier(cls: &ScaleClassification) -> Result<&Tier> {
    cls.fast().ok_or_else(|| Error::Model("network has a single time scale".into()))
}

/// Simulate the fast subsystem with all slower species frozen at `context`.
pub fn simulate_conditional_fast(
    model: &Model,
    cls: &ScaleClassification,
    context: &[f64],
    v_f0: &[f64],
    t_end: f64,
    grid: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    let fast = fast_tier(cls)?;
    if context.len() != model.n_species() || v_f0.len() != fast.species.len() {
        return Err(Error::Model("context or fast state has the wrong length".into()));
    }
    let sys = frozen_tier_system(&Arc::new(model.clone()), fast, context);
    simulate_pdmp(&sys, v_f0, t_end, grid, &OdeConfig::default(), &mut replica_rng(seed, 0))
}

/// Stationary measure of the fast subsystem given the full state `context`, whose fast
/// entries serve as the starting point of a simulation.
pub fn stationary_fast(
    model: &Model,
    cls: &ScaleClassification,
    basis: &ConservedBasis,
    context: &[f64],
    mode: Mode,
    mc: &McConfig,
) -> Result<StationaryMeasure> {
    let fast = fast_tier(cls)?;
    let species = fast.species.clone();
    if context.len() != model.n_species() {
        return Err(Error::Model("context has the wrong length".into()));
    }
    let start: Vec<f64> = species.iter().map(|&i| context[i]).collect();
    if fast.reactions.is_empty() {
        return Ok(StationaryMeasure::PointMass { species, state: start });
    }
    if mode != Mode::MonteCarlo {
        match analytic_means(model, fast, basis) {
            Ok(means) => {
                let mut env: Vec<(String, f64)> =
                    (0..model.n_species()).map(|i| (var_name(model, i), context[i])).collect();
                env.extend(kappa_values(model));
                let lookup = |s: &str| env.iter().find(|(n, _)| n == s).map(|(_, v)| *v);
                let values = means
                    .iter()
                    .map(|m| m.eval(&lookup).filter(|x| x.is_finite() && *x >= 0.0))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| Error::AnalyticUnavailable("stationary mean is undefined at this state".into()))?;
                let discrete: Vec<bool> = species.iter().map(|&i| model.network.species[i].is_discrete()).collect();
                return Ok(if discrete.iter().any(|d| *d) {
                    StationaryMeasure::ProductPoisson { species, means: values, discrete }
                } else {
                    StationaryMeasure::PointMass { species, state: values }
                });
            }
            Err(reason) if mode == Mode::Analytic => return Err(Error::AnalyticUnavailable(reason)),
            Err(_) => {}
        }
    }
    let sys = frozen_tier_system(&Arc::new(model.clone()), fast, context);
    let targets: Vec<RateFn> = (0..species.len()).map(|j| Arc::new(move |v: &[f64]| Ok(v[j])) as RateFn).collect();
    let ta = time_average(&sys, &start, &targets, mc, point_stream(u64::MAX, context), true)?;
    Ok(StationaryMeasure::Empirical { species, support: ta.support, means: ta.estimates, ess: ta.ess })
}

fn analytic_means(model: &Model, tier: &Tier, basis: &ConservedBasis) -> std::result::Result<Vec<RationalFn>, String> {
    if !basis.is_empty() {
        return Err("fast subsystem has conserved quantities".into());
    }
    let (vars, reactions) = symbolic_tier(model, tier)?;
    birth_death_means(&vars, &reactions)
}

/// Closed-form average of `rate` over the independent birth-death law of `tier`.
fn average_over_tier(model: &Model, tier: &Tier, rate: &RationalFn) -> std::result::Result<RationalFn, String> {
    let (vars, reactions) = symbolic_tier(model, tier)?;
    if vars.iter().all(|v| !rate.contains_var(&v.name)) {
        return Ok(rate.clone());
    }
    let means = birth_death_means(&vars, &reactions)?;
    expect_over(rate, &vars, &means).ok_or_else(|| "rate has fast species in its denominator".to_string())
}

/// Rate of a reaction that does not involve fast species, passed through unchanged.
fn unchanged_rate(setup: &Setup, k: usize) -> AveragedRate {
    let model = &setup.model;
    if let Some(r) = symbolic_rate(model, k) {
        if let Some(rate) = setup.binding().closed_form(k, r.into()) {
            return rate;
        }
    }
    let text = match &model.network.reactions[k].rate {
        RateLaw::Expression { exprs } => {
            exprs[0].display(&|i| model.network.species[i].name.clone()).to_string()
        }
        RateLaw::MassAction { .. } => "mass-action".into(),
    };
    let s = setup.clone();
    let eval = Arc::new(move |coords: &[f64]| {
        let full = s.full_state(coords)?;
        Ok(Estimate::exact(s.model.local_rate(k, 0, &full)))
    });
    AveragedRate { reaction: k, kind: RateKind::Expression(text), eval }
}

/// Averaged rate `E_mu[lambda_k(., v_s)]` of a two-scale network, as a function of the
/// slow species and the conserved quantities.
pub fn averaged_rate_two_scale(
    model: &Model,
    cls: &ScaleClassification,
    basis: &ConservedBasis,
    k: usize,
    opts: &AveragingOptions,
) -> Result<AveragedRate> {
    if cls.tiers.len() != 2 {
        return Err(Error::Model(format!("expected two time scales, found {}", cls.tiers.len())));
    }
    let setup = Setup::new(model, cls, basis)?;
    let fast = fast_tier(cls)?;
    if basis.is_empty() && !rate_species(model, k).iter().any(|i| fast.contains_species(*i)) {
        return Ok(unchanged_rate(&setup, k));
    }
    if opts.mode != Mode::MonteCarlo {
        let closed = if basis.is_empty() {
            symbolic_rate(model, k)
                .ok_or_else(|| format!("rate of reaction {} is not rational", k + 1))
                .and_then(|r| average_over_tier(model, fast, &r))
        } else {
            Err("fast subsystem has conserved quantities".into())
        };
        match closed.map(|r| setup.binding().closed_form(k, r.into())) {
            Ok(Some(rate)) => return Ok(rate),
            Ok(None) => {
                if opts.mode == Mode::Analytic {
                    return Err(Error::AnalyticUnavailable("closed form refers to unbound symbols".into()));
                }
            }
            Err(reason) if opts.mode == Mode::Analytic => return Err(Error::AnalyticUnavailable(reason)),
            Err(_) => {}
        }
    }
    let mc = opts.mc.clone();
    let tier = fast.clone();
    if tier.zeta.cols.iter().all(|&r| tier.is_jump(r)) {
        return Ok(occupation_rate(setup, tier, k, mc));
    }
    let eval = Arc::new(move |coords: &[f64]| {
        let full = setup.full_state(coords)?;
        let sys = frozen_tier_system(&setup.model, &tier, &full);
        let start: Vec<f64> = tier.species.iter().map(|&i| full[i]).collect();
        let target = frozen_rate(&setup.model, k, &tier.species, &full);
        let ta = time_average(&sys, &start, &[target], &mc, point_stream(k as u64, coords), false)?;
        Ok(ta.estimates[0])
    });
    Ok(AveragedRate { reaction: k, kind: RateKind::MonteCarlo, eval })
}

type SupportCache = Mutex<HashMap<Vec<u64>, Arc<(Vec<(Vec<f64>, f64)>, f64)>>>;

/// Monte Carlo average over a pure-jump fast tier. The occupation measure of one long
/// path is kept for every value of the coordinates that drive the fast reactions, and
/// the rate is integrated against it, so the estimate is a deterministic function of
/// the remaining coordinates. The standard error is `sqrt(Var(rate) / ess)`, with the
/// effective sample size measured on the fast species.
fn occupation_rate(setup: Setup, tier: Tier, k: usize, mc: McConfig) -> AveragedRate {
    let slow = setup.cls.slow().species.clone();
    let driving: Vec<usize> = (0..slow.len())
        .filter(|&j| tier.zeta.cols.iter().any(|&r| rate_species(&setup.model, r).contains(&slow[j])))
        .chain(slow.len()..slow.len() + setup.basis.quantities.len())
        .collect();
    let cache: Arc<SupportCache> = Arc::new(Mutex::new(HashMap::new()));
    let eval = Arc::new(move |coords: &[f64]| {
        let full = setup.full_state(coords)?;
        let key: Vec<u64> = driving.iter().map(|&j| coords[j].to_bits()).collect();
        let hit = cache.lock().expect("cache lock").get(&key).cloned();
        let measure = match hit {
            Some(m) => m,
            None => {
                let sys = frozen_tier_system(&setup.model, &tier, &full);
                let start: Vec<f64> = tier.species.iter().map(|&i| full[i]).collect();
                let targets: Vec<RateFn> =
                    (0..start.len()).map(|j| Arc::new(move |v: &[f64]| Ok(v[j])) as RateFn).collect();
                let key_point: Vec<f64> = key.iter().map(|&b| f64::from_bits(b)).collect();
                let ta = time_average(&sys, &start, &targets, &mc, point_stream(u64::MAX - 1, &key_point), true)?;
                let m = Arc::new((ta.support, ta.ess));
                cache.lock().expect("cache lock").insert(key, m.clone());
                m
            }
        };
        let (support, ess) = (&measure.0, measure.1);
        let rate = frozen_rate(&setup.model, k, &tier.species, &full);
        let (mut m1, mut m2) = (0.0, 0.0);
        for (v, w) in support {
            let g = rate(v)?;
            m1 += w * g;
            m2 += w * g * g;
        }
        let var = m2 - m1 * m1;
        let se = if ess.is_finite() && var > 1e-12 * m1 * m1 { (var / ess).sqrt() } else { 0.0 };
        Ok(Estimate { value: m1, se })
    });
    AveragedRate { reaction: k, kind: RateKind::MonteCarlo, eval }
}

/// Averaged rate of a three-scale network: the rate is first averaged over the fastest
/// tier given the middle and slow species, then over the middle tier given the slow
/// species. A two-scale classification gives the two-scale average.
pub fn averaged_rate_three_scale(
    model: &Model,
    cls: &ScaleClassification,
    basis: &ConservedBasis,
    k: usize,
    opts: &AveragingOptions,
) -> Result<AveragedRate> {
    match cls.tiers.len() {
        2 => return averaged_rate_two_scale(model, cls, basis, k, opts),
        3 => {}
        n => return Err(Error::Model(format!("expected three time scales, found {n}"))),
    }
    if !basis.is_empty() {
        return Err(Error::CaseUnavailable("conserved quantities in three-scale networks".into()));
    }
    let setup = Setup::new(model, cls, basis)?;
    let (middle, fast) = (cls.tiers[1].clone(), cls.tiers[2].clone());
    let involved = rate_species(model, k);
    if !involved.iter().any(|i| middle.contains_species(*i) || fast.contains_species(*i)) {
        return Ok(unchanged_rate(&setup, k));
    }
    if opts.mode != Mode::MonteCarlo {
        match nested_closed_form(model, &middle, &fast, k).map(|r| setup.binding().closed_form(k, r.into())) {
            Ok(Some(rate)) => return Ok(rate),
            Ok(None) if opts.mode == Mode::Analytic => {
                return Err(Error::AnalyticUnavailable("closed form refers to unbound symbols".into()))
            }
            Err(reason) if opts.mode == Mode::Analytic => return Err(Error::AnalyticUnavailable(reason)),
            _ => {}
        }
    }
    let mc = opts.mc.clone();
    let eval = Arc::new(move |coords: &[f64]| nested_monte_carlo(&setup, &middle, &fast, k, coords, &mc));
    Ok(AveragedRate { reaction: k, kind: RateKind::MonteCarlo, eval })
}

fn nested_closed_form(model: &Model, middle: &Tier, fast: &Tier, k: usize) -> std::result::Result<RationalFn, String> {
    let (mvars, mreactions) = symbolic_tier(model, middle)?;
    let inner = |r: &RationalFn| average_over_tier(model, fast, r);
    let averaged: Vec<SymbolicReaction> = mreactions
        .into_iter()
        .map(|r| Ok(SymbolicReaction { rate: inner(&r.rate)?, ..r }))
        .collect::<std::result::Result<_, String>>()?;
    let target = inner(&symbolic_rate(model, k).ok_or_else(|| format!("rate of reaction {} is not rational", k + 1))?)?;
    if mvars.iter().all(|v| !target.contains_var(&v.name)) {
        return Ok(target);
    }
    let means = birth_death_means(&mvars, &averaged)?;
    expect_over(&target, &mvars, &means).ok_or_else(|| "rate has middle species in its denominator".to_string())
}

type InnerCache = Mutex<HashMap<Vec<u64>, Arc<Vec<Estimate>>>>;

fn nested_monte_carlo(setup: &Setup, middle: &Tier, fast: &Tier, k: usize, coords: &[f64], mc: &McConfig) -> Result<Estimate> {
    let full = Arc::new(setup.full_state(coords)?);
    let cache: Arc<InnerCache> = Arc::new(Mutex::new(HashMap::new()));
    let n_mid = middle.zeta.cols.len();
    // inner estimates: the middle reactions, then the target
    let inner = {
        let (setup, full, middle, fast, cache, mc) =
            (setup.clone(), full.clone(), middle.clone(), fast.clone(), cache.clone(), mc.clone());
        move |v_m: &[f64]| -> Result<Arc<Vec<Estimate>>> {
            let key: Vec<u64> = v_m.iter().map(|x| x.to_bits()).collect();
            if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
                return Ok(hit.clone());
            }
            let mut context = (*full).clone();
            for (j, &i) in middle.species.iter().enumerate() {
                context[i] = v_m[j];
            }
            let sys = frozen_tier_system(&setup.model, &fast, &context);
            let start: Vec<f64> = fast.species.iter().map(|&i| context[i]).collect();
            let targets: Vec<RateFn> = middle
                .zeta
                .cols
                .iter()
                .chain(std::iter::once(&k))
                .map(|&r| frozen_rate(&setup.model, r, &fast.species, &context))
                .collect();
            let ta = time_average(&sys, &start, &targets, &mc, point_stream(k as u64, &context), false)?;
            let value = Arc::new(ta.estimates);
            cache.lock().expect("cache lock").insert(key, value.clone());
            Ok(value)
        }
    };
    let inner = Arc::new(inner);
    let rate_of = |slot: usize, se: bool| -> RateFn {
        let inner = inner.clone();
        Arc::new(move |v: &[f64]| {
            let e = inner(v)?;
            Ok(if se { e[slot].se } else { e[slot].value })
        })
    };
    let rates: Vec<RateFn> = (0..n_mid).map(|c| rate_of(c, false)).collect();
    let sys = tier_system(&setup.model, middle, rates);
    let start: Vec<f64> = middle.species.iter().map(|&i| full[i]).collect();
    let targets = [rate_of(n_mid, false), rate_of(n_mid, true)];
    let outer = time_average(&sys, &start, &targets, mc, point_stream(!(k as u64), coords), false)?;
    let (value, inner_se) = (outer.estimates[0], outer.estimates[1].value);
    Ok(Estimate { value: value.value, se: value.se.hypot(inner_se) })
}
