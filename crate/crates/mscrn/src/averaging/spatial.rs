//! Averaged rates of spatial networks.
//!
//! Reduced coordinates are the species totals `s_i = sum_d v_id` of the slow tier
//! followed by the conserved quantities. Closed forms use `s<Species>` for totals,
//! `v<Species>@<compartment>` for local abundances that remain after averaging and
//! numeric rate constants.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::analysis::{ConservedBasis, ScaleClassification, SpatialCase};
use crate::ensemble::replica_rng;
use crate::error::{Error, Result};
use crate::model::{Model, RateLaw};
use crate::pdmp::{HybridSystem, RateFn};
use crate::symbolic::{Poly, RationalFn, RationalSum};

use super::closed::{birth_death_means, expect_over, SymbolicReaction, SymbolicVar};
use super::movement::{binomial_weights, chain_equilibrium, multinomial_pmf, sample_multinomial};
use super::nonspatial::{conserved_name, place_on_constraints, rate_species, tier_system, Binding};
use super::{movement_equilibrium, point_stream, time_average, AveragedRate, AveragingOptions, Estimate, McConfig, Mode, RateKind};

/// Largest finite support summed exactly.
const EXACT_SUM_LIMIT: usize = 1_000_000;
/// Largest number of compositions of a conserved quantity handled exactly.
const COMPOSITION_LIMIT: usize = 1_500;
const FIXED_POINT_TOL: f64 = 1e-8;
const FIXED_POINT_MAX_ITER: usize = 500;

pub(crate) fn local_name(model: &Model, i: usize, d: usize) -> String {
    let comp = model.geometry.as_ref().map_or_else(|| d.to_string(), |g| g.compartments[d].clone());
    format!("v{}@{}", model.network.species[i].name, comp)
}

pub(crate) fn total_name(model: &Model, i: usize) -> String {
    format!("s{}", model.network.species[i].name)
}

/// `sum_d kappa_kd prod_i pi_i(d)^nu_ik` of a mass-action reaction.
pub fn mass_action_avg_kappa(model: &Model, k: usize) -> Result<f64> {
    let r = &model.network.reactions[k];
    let RateLaw::MassAction { kappa } = &r.rate else {
        return Err(Error::NotMassAction { reaction: k });
    };
    let pis = r.reactants.iter().map(|&(i, nu)| Ok((movement_equilibrium(model, i)?, nu))).collect::<Result<Vec<_>>>()?;
    Ok(kappa
        .iter()
        .enumerate()
        .map(|(d, kd)| pis.iter().fold(*kd, |acc, (pi, nu)| acc * pi[d].powi(*nu as i32)))
        .sum())
}

/// Binomial support `(count, weight)` without negligible weights.
fn binomial_support(total: f64, p: f64) -> Vec<(f64, f64)> {
    let w = binomial_weights(total.round().max(0.0) as u64, p);
    let top = w.iter().copied().fold(0.0, f64::max);
    w.iter().enumerate().filter(|(_, x)| **x > top * 1e-17).map(|(n, x)| (n as f64, *x)).collect()
}

fn enumerate(base: &mut [f64], supports: &[(usize, Vec<(f64, f64)>)], f: &dyn Fn(&[f64]) -> f64) -> f64 {
    match supports.split_first() {
        None => f(base),
        Some(((i, sup), rest)) => {
            let mut acc = 0.0;
            for &(x, w) in sup {
                base[*i] = x;
                acc += w * enumerate(base, rest, f);
            }
            acc
        }
    }
}

/// Compositions of `n` into `parts` nonnegative parts, in lexicographic order.
pub fn compositions(n: u64, parts: usize) -> Vec<Vec<u64>> {
    if parts == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for first in (0..=n).rev() {
        for mut rest in compositions(n - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn binomial_coefficient(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Per-compartment placements of the slow species with their probabilities.
struct Configurations {
    items: Vec<(Vec<f64>, f64)>,
    sampled: bool,
}

/// A spatial network prepared for averaging.
#[derive(Clone)]
pub(crate) struct SpatialSetup {
    pub model: Arc<Model>,
    pub cls: Arc<ScaleClassification>,
    pub basis: Arc<ConservedBasis>,
    /// Movement equilibrium of every retained species; empty for dropped species.
    pub pi: Arc<Vec<Vec<f64>>>,
    /// Full initial state supplying dropped species and fast starting values.
    pub template: Arc<Vec<f64>>,
}

impl SpatialSetup {
    pub fn new(model: &Model, cls: &ScaleClassification, basis: &ConservedBasis) -> Result<Self> {
        if !model.is_spatial() {
            return Err(Error::Model("expected a spatial model".into()));
        }
        let retained = cls.retained();
        let pi = (0..model.n_species())
            .map(|i| if retained.contains(&i) { movement_equilibrium(model, i) } else { Ok(Vec::new()) })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpatialSetup {
            model: Arc::new(model.clone()),
            cls: Arc::new(cls.clone()),
            basis: Arc::new(basis.clone()),
            pi: Arc::new(pi),
            template: Arc::new(model.initial_state()?.values),
        })
    }

    fn dd(&self) -> usize {
        self.model.n_compartments()
    }

    fn slow(&self) -> &[usize] {
        &self.cls.slow().species
    }

    fn fast(&self) -> &[usize] {
        self.cls.fast().map_or(&[], |t| t.species.as_slice())
    }

    fn discrete(&self, i: usize) -> bool {
        self.model.network.species[i].is_discrete()
    }

    pub fn coord_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.slow().iter().map(|&i| total_name(&self.model, i)).collect();
        names.extend((0..self.basis.quantities.len()).map(conserved_name));
        names
    }

    pub fn binding(&self) -> Binding {
        let fixed = self
            .cls
            .dropped
            .iter()
            .flat_map(|&i| (0..self.dd()).map(move |d| (i, d)))
            .map(|(i, d)| (local_name(&self.model, i, d), self.template[self.model.state_index(i, d)]))
            .collect();
        Binding::new(self.coord_names(), fixed)
    }

    /// Local abundances of compartment `d` in a full state.
    fn local(&self, state: &[f64], d: usize) -> Vec<f64> {
        (0..self.model.n_species()).map(|i| state[self.model.state_index(i, d)]).collect()
    }

    /// Species totals: slow species from the coordinates, the rest from the initial state,
    /// with fast species moved onto the constraint surface. Also returns the conserved values.
    fn totals(&self, coords: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let nq = self.basis.quantities.len();
        let slow = self.slow();
        if coords.len() != slow.len() + nq {
            return Err(Error::Model(format!(
                "expected {} reduced coordinates, got {}",
                slow.len() + nq,
                coords.len()
            )));
        }
        let mut totals: Vec<f64> = (0..self.model.n_species())
            .map(|i| (0..self.dd()).map(|d| self.template[self.model.state_index(i, d)]).sum())
            .collect();
        for (j, &i) in slow.iter().enumerate() {
            totals[i] = coords[j];
        }
        let c = coords[slow.len()..].to_vec();
        if nq > 0 {
            place_on_constraints(&self.model, &self.basis, &c, &mut totals)?;
        }
        Ok((totals, c))
    }

    // ---- numeric expectations ----

    /// `E[lambda_kd]` with the species in `averaged` placed by their movement
    /// equilibrium given `totals`, and all other species at `local`.
    fn expect_local(&self, k: usize, d: usize, local: &[f64], averaged: &[usize], totals: &[f64]) -> f64 {
        let used = rate_species(&self.model, k);
        let mut base = local.to_vec();
        let mut supports = Vec::new();
        for &i in averaged {
            let p = self.pi[i][d];
            if !self.discrete(i) {
                base[i] = p * totals[i];
            } else if used.contains(&i) {
                supports.push((i, binomial_support(totals[i], p)));
            }
        }
        enumerate(&mut base, &supports, &|v| self.model.local_rate(k, d, v))
    }

    /// Sum over compartments of [`Self::expect_local`] with local values from `state`.
    fn expect_all(&self, k: usize, state: &[f64], averaged: &[usize], totals: &[f64]) -> f64 {
        (0..self.dd()).map(|d| self.expect_local(k, d, &self.local(state, d), averaged, totals)).sum()
    }

    /// Placements of the slow species over the compartments. The support is enumerated
    /// when it has at most `limit` points and sampled otherwise.
    fn slow_configurations(&self, totals: &[f64], limit: usize, samples: usize, stream: u64) -> Result<Configurations> {
        let dd = self.dd();
        let mut per_species: Vec<(usize, Vec<(Vec<f64>, f64)>)> = Vec::new();
        let mut size = 1usize;
        for &i in self.slow() {
            let pi = &self.pi[i];
            if self.discrete(i) {
                let n = totals[i].round() as u64;
                let count = binomial_coefficient(n + dd as u64 - 1, dd as u64 - 1);
                size = size.saturating_mul(if count > usize::MAX as f64 { usize::MAX } else { count as usize });
                per_species.push((i, Vec::new()));
            } else {
                per_species.push((i, vec![(pi.iter().map(|p| p * totals[i]).collect(), 1.0)]));
            }
        }
        let mut template = (*self.template).clone();
        let place = |state: &mut [f64], i: usize, values: &[f64]| {
            for (d, x) in values.iter().enumerate() {
                state[self.model.state_index(i, d)] = *x;
            }
        };
        if size > limit {
            let mut rng = replica_rng(0, stream);
            let mut items = Vec::with_capacity(samples);
            for _ in 0..samples {
                let mut state = template.clone();
                for &i in self.slow() {
                    let values = if self.discrete(i) {
                        sample_multinomial(totals[i].round() as u64, &self.pi[i], &mut rng)
                    } else {
                        self.pi[i].iter().map(|p| p * totals[i]).collect()
                    };
                    place(&mut state, i, &values);
                }
                items.push((state, 1.0 / samples as f64));
            }
            return Ok(Configurations { items, sampled: true });
        }
        for (i, list) in per_species.iter_mut() {
            if self.discrete(*i) {
                let n = totals[*i].round() as u64;
                *list = compositions(n, dd)
                    .into_iter()
                    .map(|c| {
                        let w = multinomial_pmf(n, &self.pi[*i], &c);
                        (c.into_iter().map(|x| x as f64).collect(), w)
                    })
                    .collect();
            }
        }
        let mut items = vec![(std::mem::take(&mut template), 1.0)];
        for (i, list) in &per_species {
            let mut next = Vec::with_capacity(items.len() * list.len());
            for (state, w) in &items {
                for (values, wv) in list {
                    if *wv == 0.0 {
                        continue;
                    }
                    let mut s = state.clone();
                    place(&mut s, *i, values);
                    next.push((s, w * wv));
                }
            }
            items = next;
        }
        Ok(Configurations { items, sampled: false })
    }

    // ---- closed forms ----

    fn rate_d(&self, k: usize, d: usize) -> std::result::Result<RationalFn, String> {
        self.model
            .rate_rational(k, d, &|i| local_name(&self.model, i, d), false)
            .ok_or_else(|| format!("rate of reaction {} is not rational", k + 1))
    }

    /// Average the local variables of `species` in compartment `d` over their
    /// equilibrium marginals given the totals.
    fn avg_marginal(&self, r: &RationalFn, species: &[usize], d: usize) -> std::result::Result<RationalFn, String> {
        let mut out = r.clone();
        for &i in species {
            let v = local_name(&self.model, i, d);
            if !out.contains_var(&v) {
                continue;
            }
            let p = self.pi[i][d];
            let total = total_name(&self.model, i);
            out = if self.discrete(i) {
                out.expect_binomial(&v, &Poly::var(&total), p)
                    .ok_or_else(|| format!("counted species {} appears in a denominator", v))?
            } else {
                out.subst(&v, &RationalFn::var(&total).scale(p))
            };
        }
        Ok(out)
    }

    /// Average the local variables of `species` in every compartment over the joint
    /// equilibrium placement given the totals.
    fn avg_joint(&self, r: &RationalFn, species: &[usize]) -> Option<RationalFn> {
        let mut out = r.clone();
        for &i in species {
            let vars: Vec<String> = (0..self.dd()).map(|d| local_name(&self.model, i, d)).collect();
            if vars.iter().all(|v| !out.contains_var(v)) {
                continue;
            }
            let total = total_name(&self.model, i);
            if self.discrete(i) {
                out = out.expect_multinomial(&vars, &Poly::var(&total), &self.pi[i])?;
            } else {
                for (d, v) in vars.iter().enumerate() {
                    out = out.subst(v, &RationalFn::var(&total).scale(self.pi[i][d]));
                }
            }
        }
        Some(out)
    }

    /// Average `target` over the stationary law of the fast species named by `name`,
    /// whose reactions have the rates returned by `rate`.
    fn fast_average(
        &self,
        target: &RationalSum,
        name: &dyn Fn(usize) -> String,
        rate: &dyn Fn(usize) -> std::result::Result<RationalFn, String>,
    ) -> std::result::Result<RationalSum, String> {
        let fast = self.cls.fast().ok_or("network has a single time scale")?;
        let vars: Vec<SymbolicVar> =
            fast.species.iter().map(|&i| SymbolicVar { name: name(i), discrete: self.discrete(i) }).collect();
        if target.vars().iter().all(|v| vars.iter().all(|x| &x.name != v)) {
            return Ok(target.clone());
        }
        let reactions = fast
            .zeta
            .cols
            .iter()
            .enumerate()
            .map(|(c, &k)| {
                Ok(SymbolicReaction {
                    label: (k + 1).to_string(),
                    rate: rate(k)?,
                    change: (0..fast.species.len()).map(|r| (r, fast.zeta.data[r][c])).collect(),
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let means = birth_death_means(&vars, &reactions)?;
        target
            .try_map(|t| expect_over(t, &vars, &means))
            .ok_or_else(|| "rate has fast species in its denominator".into())
    }

    /// `sum_d` of `f(d)`, each a sum of rational functions.
    fn sum_over_d(
        &self,
        f: &dyn Fn(usize) -> std::result::Result<RationalSum, String>,
    ) -> std::result::Result<RationalSum, String> {
        let mut out = RationalSum::default();
        for d in 0..self.dd() {
            for t in f(d)?.terms {
                out.push(t);
            }
        }
        Ok(out)
    }

    /// Closed form before the outer average over slow placements (Cases 2 and 4), or the
    /// final closed form otherwise.
    fn symbolic(&self, case: Option<SpatialCase>, k: usize) -> std::result::Result<RationalSum, String> {
        if !self.basis.is_empty() {
            return Err("fast subsystem has conserved quantities".into());
        }
        let model = &self.model;
        let retained = self.cls.retained();
        let (slow, fast) = (self.slow().to_vec(), self.fast().to_vec());
        let averaged_sum = |k: usize, species: &[usize]| -> std::result::Result<RationalFn, String> {
            let mut acc = RationalFn::constant(0.0);
            for d in 0..self.dd() {
                acc = acc.add(&self.avg_marginal(&self.rate_d(k, d)?, species, d)?);
            }
            Ok(acc)
        };
        let marginal_terms = |k: usize, species: &[usize]| {
            self.sum_over_d(&|d| Ok(self.avg_marginal(&self.rate_d(k, d)?, species, d)?.into()))
        };
        match case {
            None => marginal_terms(k, &retained),
            Some(SpatialCase::Case1) => {
                let target = marginal_terms(k, &retained)?;
                self.fast_average(&target, &|i| total_name(model, i), &|r| averaged_sum(r, &retained))
            }
            Some(SpatialCase::Case2) => {
                let target = marginal_terms(k, &fast)?;
                self.fast_average(&target, &|i| total_name(model, i), &|r| averaged_sum(r, &fast))
            }
            Some(SpatialCase::Case3) => self.sum_over_d(&|d| {
                let target: RationalSum = self.avg_marginal(&self.rate_d(k, d)?, &slow, d)?.into();
                self.fast_average(&target, &|i| local_name(model, i, d), &|r| {
                    self.avg_marginal(&self.rate_d(r, d)?, &slow, d)
                })
            }),
            Some(SpatialCase::Case4) => self.sum_over_d(&|d| {
                let target: RationalSum = self.rate_d(k, d)?.into();
                self.fast_average(&target, &|i| local_name(model, i, d), &|r| self.rate_d(r, d))
            }),
        }
    }

    // ---- simulation estimates ----

    /// Fast totals process of Cases 1 and 2: rates are averaged over the equilibrium
    /// placement of `averaged` in `state`.
    fn totals_system(&self, state: Arc<Vec<f64>>, averaged: Vec<usize>, totals: Arc<Vec<f64>>) -> (HybridSystem, Vec<RateFn>) {
        let fast = self.cls.fast().expect("two-scale network");
        let make = |k: usize| -> RateFn {
            let (setup, state, averaged, totals) = (self.clone(), state.clone(), averaged.clone(), totals.clone());
            let species = fast.species.clone();
            Arc::new(move |v: &[f64]| {
                let mut t = (*totals).clone();
                for (j, &i) in species.iter().enumerate() {
                    t[i] = v[j];
                }
                Ok(setup.expect_all(k, &state, &averaged, &t))
            })
        };
        let rates: Vec<RateFn> = fast.zeta.cols.iter().map(|&k| make(k)).collect();
        (tier_system(&self.model, fast, rates.clone()), rates)
    }

    /// Fast process of compartment `d` in Cases 3 and 4.
    fn compartment_system(&self, d: usize, local: Arc<Vec<f64>>, averaged: Vec<usize>, totals: Arc<Vec<f64>>) -> HybridSystem {
        let fast = self.cls.fast().expect("two-scale network");
        let rates = fast.zeta.cols.iter().map(|&k| self.compartment_rate(k, d, &local, &averaged, &totals)).collect();
        tier_system(&self.model, fast, rates)
    }

    fn compartment_rate(&self, k: usize, d: usize, local: &Arc<Vec<f64>>, averaged: &[usize], totals: &Arc<Vec<f64>>) -> RateFn {
        let fast = self.cls.fast().expect("two-scale network");
        let (setup, local, averaged, totals) = (self.clone(), local.clone(), averaged.to_vec(), totals.clone());
        let species = fast.species.clone();
        Arc::new(move |v: &[f64]| {
            let mut base = (*local).clone();
            for (j, &i) in species.iter().enumerate() {
                base[i] = v[j];
            }
            Ok(setup.expect_local(k, d, &base, &averaged, &totals))
        })
    }

    fn monte_carlo(&self, case: SpatialCase, k: usize, coords: &[f64], mc: &McConfig) -> Result<Estimate> {
        let (totals, c) = self.totals(coords)?;
        let totals = Arc::new(totals);
        let fast = self.cls.fast().expect("two-scale network").species.clone();
        let stream = point_stream(k as u64, coords);
        match case {
            SpatialCase::Case1 | SpatialCase::Case2 => {
                let averaged = if case == SpatialCase::Case1 { self.cls.retained() } else { fast.clone() };
                let start: Vec<f64> = fast.iter().map(|&i| totals[i]).collect();
                let run = |state: Vec<f64>, stream: u64| -> Result<Estimate> {
                    let state = Arc::new(state);
                    let (sys, _) = self.totals_system(state.clone(), averaged.clone(), totals.clone());
                    let target = {
                        let (setup, averaged, totals, species) =
                            (self.clone(), averaged.clone(), totals.clone(), fast.clone());
                        Arc::new(move |v: &[f64]| {
                            let mut t = (*totals).clone();
                            for (j, &i) in species.iter().enumerate() {
                                t[i] = v[j];
                            }
                            Ok(setup.expect_all(k, &state, &averaged, &t))
                        }) as RateFn
                    };
                    Ok(time_average(&sys, &start, &[target], mc, stream, false)?.estimates[0])
                };
                if case == SpatialCase::Case1 {
                    run((*self.template).clone(), stream)
                } else {
                    self.outer_average(&totals, mc, stream, &|state, s| run(state.to_vec(), s))
                }
            }
            SpatialCase::Case3 | SpatialCase::Case4 => {
                let per_compartment = |state: &[f64], stream: u64| -> Result<Estimate> {
                    if self.basis.is_empty() {
                        let mut value = 0.0;
                        let mut var = 0.0;
                        for d in 0..self.dd() {
                            let e = self.compartment_estimates(case, k, d, state, &totals, None, mc, stream)?;
                            value += e.target.value;
                            var += e.target.se.powi(2);
                        }
                        Ok(Estimate { value, se: var.sqrt() })
                    } else {
                        self.conserved_movement(case, k, state, &totals, &c, mc, stream)
                    }
                };
                if case == SpatialCase::Case3 {
                    per_compartment(&self.template, stream)
                } else {
                    self.outer_average(&totals, mc, stream, &per_compartment)
                }
            }
        }
    }

    /// Average of `inner` over the equilibrium placements of the slow species.
    fn outer_average(
        &self,
        totals: &[f64],
        mc: &McConfig,
        stream: u64,
        inner: &dyn Fn(&[f64], u64) -> Result<Estimate>,
    ) -> Result<Estimate> {
        let configs = self.slow_configurations(totals, mc.outer_samples, mc.outer_samples, stream)?;
        let mut cache: HashMap<Vec<u64>, Estimate> = HashMap::new();
        let mut values = Vec::with_capacity(configs.items.len());
        for (state, w) in &configs.items {
            let key: Vec<u64> = state.iter().map(|x| x.to_bits()).collect();
            let e = match cache.get(&key) {
                Some(e) => *e,
                None => {
                    let e = inner(state, point_stream(stream, state))?;
                    cache.insert(key, e);
                    e
                }
            };
            values.push((e, *w));
        }
        let value: f64 = values.iter().map(|(e, w)| w * e.value).sum();
        let inner_var: f64 = values.iter().map(|(e, w)| (w * e.se).powi(2)).sum();
        let se = if configs.sampled {
            let n = values.len() as f64;
            let spread = values.iter().map(|(e, _)| (e.value - value).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (spread / n + inner_var).sqrt()
        } else {
            inner_var.sqrt()
        };
        Ok(Estimate { value, se })
    }

    /// Stationary averages in compartment `d` for Cases 3 and 4: the target rate and the
    /// mean of each fast species. With `constraint`, fast species start on the surface
    /// `<theta_j, v_f> = constraint_j`.
    #[allow(clippy::too_many_arguments)]
    fn compartment_estimates(
        &self,
        case: SpatialCase,
        k: usize,
        d: usize,
        state: &[f64],
        totals: &Arc<Vec<f64>>,
        constraint: Option<&[f64]>,
        mc: &McConfig,
        stream: u64,
    ) -> Result<CompartmentEstimate> {
        let fast = self.cls.fast().expect("two-scale network").species.clone();
        let averaged = if case == SpatialCase::Case3 { self.slow().to_vec() } else { Vec::new() };
        let mut local = self.local(state, d);
        if let Some(c) = constraint {
            place_on_constraints(&self.model, &self.basis, c, &mut local)?;
        }
        let local = Arc::new(local);
        let sys = self.compartment_system(d, local.clone(), averaged.clone(), totals.clone());
        let start: Vec<f64> = fast.iter().map(|&i| local[i]).collect();
        let mut targets = vec![self.compartment_rate(k, d, &local, &averaged, totals)];
        targets.extend((0..fast.len()).map(|j| Arc::new(move |v: &[f64]| Ok(v[j])) as RateFn));
        let stream = point_stream(stream ^ d as u64, &start);
        let est = time_average(&sys, &start, &targets, mc, stream, false)?.estimates;
        Ok(CompartmentEstimate { target: est[0], means: est[1..].iter().map(|e| e.value).collect() })
    }

    /// Cases 3 and 4 with conserved quantities: average over the equilibrium distribution
    /// of the conserved quantities across compartments.
    #[allow(clippy::too_many_arguments)]
    fn conserved_movement(
        &self,
        case: SpatialCase,
        k: usize,
        state: &[f64],
        totals: &Arc<Vec<f64>>,
        c: &[f64],
        mc: &McConfig,
        stream: u64,
    ) -> Result<Estimate> {
        let dd = self.dd();
        let quantities = &self.basis.quantities;
        let fast = self.fast().to_vec();
        let cache: Mutex<HashMap<(usize, Vec<u64>), Arc<CompartmentEstimate>>> = Mutex::new(HashMap::new());
        let local_estimate = |d: usize, values: &[f64]| -> Result<Arc<CompartmentEstimate>> {
            let key = (d, values.iter().map(|x| x.to_bits()).collect());
            if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
                return Ok(hit.clone());
            }
            let e = Arc::new(self.compartment_estimates(case, k, d, state, totals, Some(values), mc, stream)?);
            cache.lock().expect("cache lock").insert(key, e.clone());
            Ok(e)
        };
        let mean_of = |e: &CompartmentEstimate, i: usize| e.means[fast.iter().position(|&f| f == i).expect("fast species")];
        if quantities.len() == 1 && quantities[0].is_discrete() {
            let q = &quantities[0];
            let n = c[0].round() as u64;
            if (c[0] - n as f64).abs() > 1e-9 {
                return Err(Error::InvalidInitialState(format!("conserved value {} is not an integer", c[0])));
            }
            if binomial_coefficient(n + dd as u64 - 1, dd as u64 - 1) > COMPOSITION_LIMIT as f64 {
                return Err(Error::CaseUnavailable(format!(
                    "too many placements of conserved quantity c1 = {n} over {dd} compartments"
                )));
            }
            let states = compositions(n, dd);
            let index: HashMap<Vec<u64>, usize> = states.iter().cloned().enumerate().map(|(a, s)| (s, a)).collect();
            let mut gen = vec![vec![0.0; states.len()]; states.len()];
            for (a, s) in states.iter().enumerate() {
                for d in 0..dd {
                    let e = local_estimate(d, &[s[d] as f64])?;
                    for &(i, theta) in &q.theta {
                        let mass = mean_of(&e, i);
                        for (to, rate) in self.model.movement_generator(i)[d].iter().enumerate() {
                            if to == d || *rate <= 0.0 || mass <= 0.0 {
                                continue;
                            }
                            let mut next = s.clone();
                            let (from_val, to_val) = (s[d] as i64 - theta, s[to] as i64 + theta);
                            if from_val < 0 || to_val < 0 {
                                continue;
                            }
                            next[d] = from_val as u64;
                            next[to] = to_val as u64;
                            let b = index[&next];
                            gen[a][b] += rate * mass;
                            gen[a][a] -= rate * mass;
                        }
                    }
                }
            }
            let p = chain_equilibrium(&gen, "conserved quantity c1")
                .map_err(|e| Error::CaseUnavailable(format!("conserved movement equilibrium: {e}")))?;
            let mut value = 0.0;
            let mut var = 0.0;
            for (s, w) in states.iter().zip(&p) {
                if *w == 0.0 {
                    continue;
                }
                for (d, x) in s.iter().enumerate() {
                    let e = local_estimate(d, &[*x as f64])?;
                    value += w * e.target.value;
                    var += (w * e.target.se).powi(2);
                }
            }
            return Ok(Estimate { value, se: var.sqrt() });
        }
        if quantities.iter().any(|q| q.is_discrete()) {
            return Err(Error::CaseUnavailable("several counted conserved quantities in compartments".into()));
        }
        // concentrations: fixed point of the conserved movement flux balance
        let mut vc: Vec<Vec<f64>> = quantities
            .iter()
            .zip(c)
            .map(|(q, cj)| self.pi[q.theta[0].0].iter().map(|p| p * cj).collect())
            .collect();
        for _ in 0..FIXED_POINT_MAX_ITER {
            let ests = (0..dd)
                .map(|d| local_estimate(d, &vc.iter().map(|v| v[d]).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            let mut next = Vec::with_capacity(quantities.len());
            for (j, q) in quantities.iter().enumerate() {
                let mut gen = vec![vec![0.0; dd]; dd];
                for d in 0..dd {
                    let amount = vc[j][d].max(1e-12 * c[j].abs().max(1e-300));
                    for &(i, theta) in &q.theta {
                        let flux = theta as f64 * mean_of(&ests[d], i) / amount;
                        for (to, rate) in self.model.movement_generator(i)[d].iter().enumerate() {
                            if to != d && *rate > 0.0 {
                                gen[d][to] += rate * flux;
                                gen[d][d] -= rate * flux;
                            }
                        }
                    }
                }
                let p = chain_equilibrium(&gen, &conserved_name(j))
                    .map_err(|e| Error::CaseUnavailable(format!("conserved movement equilibrium: {e}")))?;
                next.push(p.iter().map(|x| x * c[j]).collect::<Vec<f64>>());
            }
            let change = next
                .iter()
                .flatten()
                .zip(vc.iter().flatten())
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-300))
                .fold(0.0, f64::max);
            vc = next;
            if change < FIXED_POINT_TOL {
                let mut value = 0.0;
                let mut var = 0.0;
                for d in 0..dd {
                    let e = local_estimate(d, &vc.iter().map(|v| v[d]).collect::<Vec<_>>())?;
                    value += e.target.value;
                    var += e.target.se.powi(2);
                }
                return Ok(Estimate { value, se: var.sqrt() });
            }
        }
        Err(Error::CaseUnavailable(format!(
            "conserved movement fixed point did not converge in {FIXED_POINT_MAX_ITER} iterations"
        )))
    }
}

struct CompartmentEstimate {
    target: Estimate,
    means: Vec<f64>,
}

/// Averaged rate of a single-scale spatial network: `sum_d E_s[lambda_kd]` over the
/// movement equilibrium given the totals `s` of the retained species.
pub fn averaged_rate_single_scale(
    model: &Model,
    cls: &ScaleClassification,
    k: usize,
    opts: &AveragingOptions,
) -> Result<AveragedRate> {
    if cls.tiers.len() != 1 {
        return Err(Error::Model(format!("expected a single time scale, found {}", cls.tiers.len())));
    }
    let setup = SpatialSetup::new(model, cls, &ConservedBasis::default())?;
    if opts.mode != Mode::MonteCarlo {
        match setup.symbolic(None, k) {
            Ok(sum) => {
                if let Some(rate) = setup.binding().closed_form(k, sum) {
                    return Ok(rate);
                }
            }
            Err(reason) if opts.mode == Mode::Analytic => return Err(Error::AnalyticUnavailable(reason)),
            Err(_) => {}
        }
        let retained = cls.retained();
        let s = setup.clone();
        let eval = Arc::new(move |coords: &[f64]| {
            let (totals, _) = s.totals(coords)?;
            Ok(Estimate::exact(s.expect_all(k, &s.template, &retained, &totals)))
        });
        return Ok(AveragedRate { reaction: k, kind: RateKind::ExactSum, eval });
    }
    let mc = opts.mc.clone();
    let eval = Arc::new(move |coords: &[f64]| {
        let (totals, _) = setup.totals(coords)?;
        let mut rng = replica_rng(mc.seed, point_stream(k as u64, coords));
        let n = mc.outer_samples.max(2);
        let mut state = (*setup.template).clone();
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            for &i in setup.slow() {
                let values = if setup.discrete(i) {
                    sample_multinomial(totals[i].round() as u64, &setup.pi[i], &mut rng)
                } else {
                    setup.pi[i].iter().map(|p| p * totals[i]).collect()
                };
                for (d, x) in values.into_iter().enumerate() {
                    state[setup.model.state_index(i, d)] = x;
                }
            }
            let x: f64 = (0..setup.dd()).map(|d| setup.model.local_rate(k, d, &setup.local(&state, d))).sum();
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0);
        Ok(Estimate { value: mean, se: (var / n as f64).sqrt() })
    });
    Ok(AveragedRate { reaction: k, kind: RateKind::MonteCarlo, eval })
}

/// Averaged rate of reaction `k` of a two-scale spatial network in the given case, as a
/// function of the slow totals and the conserved quantities.
pub fn averaged_rate_spatial(
    model: &Model,
    cls: &ScaleClassification,
    basis: &ConservedBasis,
    case: SpatialCase,
    k: usize,
    opts: &AveragingOptions,
) -> Result<AveragedRate> {
    if cls.tiers.len() != 2 {
        return Err(Error::Model(format!("expected two time scales, found {}", cls.tiers.len())));
    }
    let setup = SpatialSetup::new(model, cls, basis)?;
    let needs_outer = matches!(case, SpatialCase::Case2 | SpatialCase::Case4);
    if opts.mode != Mode::MonteCarlo {
        match setup.symbolic(Some(case), k) {
            Ok(inner) => {
                let slow = setup.slow().to_vec();
                let joint = if needs_outer { inner.try_map(|t| setup.avg_joint(t, &slow)) } else { Some(inner.clone()) };
                if let Some(rate) = joint.and_then(|sum| setup.binding().closed_form(k, sum)) {
                    return Ok(rate);
                }
                if let Some(rate) = exact_outer_sum(&setup, k, &inner) {
                    return Ok(rate);
                }
                if opts.mode == Mode::Analytic {
                    return Err(Error::AnalyticUnavailable("outer placement sum is too large".into()));
                }
            }
            Err(reason) if opts.mode == Mode::Analytic => return Err(Error::AnalyticUnavailable(reason)),
            Err(_) => {}
        }
    }
    let mc = opts.mc.clone();
    let eval = Arc::new(move |coords: &[f64]| setup.monte_carlo(case, k, coords, &mc));
    Ok(AveragedRate { reaction: k, kind: RateKind::MonteCarlo, eval })
}

/// Closed-form inner rate summed over every placement of the slow species.
fn exact_outer_sum(setup: &SpatialSetup, k: usize, inner: &RationalSum) -> Option<AveragedRate> {
    let model = setup.model.clone();
    let dd = setup.dd();
    let slow = setup.slow().to_vec();
    let mut names: Vec<String> = slow.iter().flat_map(|&i| (0..dd).map(move |d| (i, d))).map(|(i, d)| local_name(&model, i, d)).collect();
    let binding = setup.binding();
    names.extend(binding.names.iter().cloned());
    let compiled = inner.compile(&|s| names.iter().position(|n| n == s))?;
    let setup = setup.clone();
    let eval = Arc::new(move |coords: &[f64]| {
        let (totals, _) = setup.totals(coords)?;
        let configs = setup.slow_configurations(&totals, EXACT_SUM_LIMIT, 0, 0)?;
        if configs.sampled {
            return Err(Error::AnalyticUnavailable("outer placement sum is too large".into()));
        }
        let mut value = 0.0;
        for (state, w) in &configs.items {
            let env: Vec<f64> = slow
                .iter()
                .flat_map(|&i| (0..dd).map(move |d| (i, d)))
                .map(|(i, d)| state[setup.model.state_index(i, d)])
                .chain(coords.iter().copied())
                .chain(binding.fixed.iter().copied())
                .collect();
            value += w * compiled.eval(&env);
        }
        if !value.is_finite() || value < 0.0 {
            return Err(Error::RateEvaluation { reaction: k, detail: format!("averaged rate {value}") });
        }
        Ok(Estimate::exact(value))
    });
    Some(AveragedRate { reaction: k, kind: RateKind::ExactSum, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{classify, conserved_basis};
    use crate::parser::parse_model;

    #[test]
    fn compositions_are_complete() {
        let c = compositions(3, 3);
        assert_eq!(c.len(), 10);
        assert!(c.iter().all(|x| x.iter().sum::<u64>() == 3));
    }

    const SINGLE: &str = "\
species A alpha=1 eta=1
species B alpha=1 eta=1
compartments c1 c2
A + B -> 0 @ mass_action(1, 2) beta=1
move A from c1 to c2 rate 1
move A from c2 to c1 rate 1
move B from c1 to c2 rate 1
move B from c2 to c1 rate 1
";

    #[test]
    fn single_scale_mass_action_average() {
        let m = parse_model(SINGLE).unwrap();
        let cls = classify(&m).unwrap();
        let rate = averaged_rate_single_scale(&m, &cls, 0, &AveragingOptions::default()).unwrap();
        assert!((rate.value(&[1.0, 1.0]).unwrap().value - 0.75).abs() < 1e-15);
        assert!((mass_action_avg_kappa(&m, 0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_scale_counted_species_use_falling_moments() {
        let text = "\
species A alpha=0 eta=1
compartments c1 c2
2 A -> A @ mass_action(1, 3) beta=0
move A from c1 to c2 rate 1
move A from c2 to c1 rate 3
";
        let m = parse_model(text).unwrap();
        let cls = classify(&m).unwrap();
        let rate = averaged_rate_single_scale(&m, &cls, 0, &AveragingOptions::default()).unwrap();
        // pi = (3/4, 1/4); E[A_d (A_d - 1)] = s (s - 1) pi_d^2
        let s: f64 = 5.0;
        let expected = s * (s - 1.0) * (1.0 * 0.5625 + 3.0 * 0.0625);
        assert!((rate.value(&[s]).unwrap().value - expected).abs() < 1e-12);
        let opts = AveragingOptions { mode: Mode::MonteCarlo, ..Default::default() };
        let mc = averaged_rate_single_scale(&m, &cls, 0, &opts).unwrap().value(&[s]).unwrap();
        assert!((mc.value - expected).abs() < 4.0 * mc.se);
    }

    const TWO_COMPARTMENTS: &str = "\
species A alpha=1 eta=2
species B alpha=0 eta=2
compartments c1 c2
A + B -> 0 @ mass_action(1, 2) beta=1
0 -> B @ mass_action(1, 3) beta=1
B -> 0 @ mass_action(2, 1) beta=1
move A from c1 to c2 rate 1
move A from c2 to c1 rate 2
move B from c1 to c2 rate 1
move B from c2 to c1 rate 1
";

    fn two_compartment_rate(case: SpatialCase, mode: Mode) -> AveragedRate {
        let m = parse_model(TWO_COMPARTMENTS).unwrap();
        let cls = classify(&m).unwrap();
        let basis = conserved_basis(&m, &cls).unwrap();
        let opts = AveragingOptions { mode, mc: McConfig { budget: 40_000, ..Default::default() } };
        averaged_rate_spatial(&m, &cls, &basis, case, 0, &opts).unwrap()
    }

    #[test]
    fn case_pairs_agree_on_example() {
        let (pa, pb) = ([2.0 / 3.0, 1.0 / 3.0], [0.5, 0.5]);
        let (k1, k2, k3) = ([1.0, 2.0], [1.0, 3.0], [2.0, 1.0]);
        let kb1: f64 = (0..2).map(|d| k1[d] * pa[d] * pb[d]).sum();
        let kb2: f64 = k2.iter().sum();
        let kb3: f64 = (0..2).map(|d| k3[d] * pb[d]).sum();
        for s in [0.5, 1.0, 3.0] {
            let c12 = kb1 * kb2 * s / (kb3 + kb1 * s);
            let c34: f64 = (0..2).map(|d| k1[d] * k2[d] * pa[d] * s / (k3[d] + k1[d] * pa[d] * s)).sum();
            for (case, want) in [
                (SpatialCase::Case1, c12),
                (SpatialCase::Case2, c12),
                (SpatialCase::Case3, c34),
                (SpatialCase::Case4, c34),
            ] {
                let rate = two_compartment_rate(case, Mode::Analytic);
                let got = rate.value(&[s]).unwrap().value;
                assert!((got - want).abs() <= 1e-12 * want, "{case:?} s={s}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn homogeneous_example_cases_coincide() {
        let text = "\
species A alpha=1 eta=2
species B alpha=0 eta=2
compartments c1 c2 c3
A + B -> 0 @ mass_action(2) beta=1
0 -> B @ mass_action(1) beta=1
B -> 0 @ mass_action(3) beta=1
move A from c1 to c2 rate 1
move A from c2 to c3 rate 1
move A from c3 to c1 rate 1
move B from c1 to c2 rate 5
move B from c2 to c1 rate 1
move B from c2 to c3 rate 2
move B from c3 to c2 rate 1
";
        let m = parse_model(text).unwrap();
        let cls = classify(&m).unwrap();
        let basis = conserved_basis(&m, &cls).unwrap();
        let values: Vec<f64> = [SpatialCase::Case1, SpatialCase::Case2, SpatialCase::Case3, SpatialCase::Case4]
            .into_iter()
            .map(|case| {
                let opts = AveragingOptions { mode: Mode::Analytic, ..Default::default() };
                averaged_rate_spatial(&m, &cls, &basis, case, 0, &opts).unwrap().value(&[1.5]).unwrap().value
            })
            .collect();
        for v in &values {
            assert!((v - values[0]).abs() < 1e-12 * values[0], "{values:?}");
        }
    }

    #[test]
    fn monte_carlo_cases_match_closed_forms() {
        for case in [SpatialCase::Case1, SpatialCase::Case3, SpatialCase::Case4] {
            let exact = two_compartment_rate(case, Mode::Analytic).value(&[1.0]).unwrap().value;
            let e = two_compartment_rate(case, Mode::MonteCarlo).value(&[1.0]).unwrap();
            assert!((e.value - exact).abs() < 4.0 * e.se, "{case:?}: {e:?} vs {exact}");
        }
    }

    #[test]
    fn discrete_slow_species_in_denominator_use_exact_sum() {
        let text = "\
species A alpha=0 eta=1/2
species B alpha=0 eta=1/2
compartments c1 c2
A + B -> B @ mass_action(1, 2) beta=0
0 -> B @ mass_action(1, 3) beta=1
B -> 0 @ mass_action(2, 1) beta=1
A + B -> A @ mass_action(1, 1) beta=1
move A from c1 to c2 rate 1
move A from c2 to c1 rate 2
move B from c1 to c2 rate 1
move B from c2 to c1 rate 1
";
        let m = parse_model(text).unwrap();
        let cls = classify(&m).unwrap();
        let basis = conserved_basis(&m, &cls).unwrap();
        let rate = averaged_rate_spatial(&m, &cls, &basis, SpatialCase::Case4, 0, &AveragingOptions::default()).unwrap();
        assert_eq!(rate.kind, RateKind::ExactSum);
        // brute force: A ~ Multinomial(3, (2/3, 1/3)), B_d ~ Poisson(k2d / (k3d + a_d))
        let (pa, k1, k2, k3) = ([2.0 / 3.0, 1.0 / 3.0], [1.0, 2.0], [1.0, 3.0], [2.0, 1.0]);
        let mut want = 0.0;
        for a1 in 0..=3u64 {
            let a = [a1 as f64, (3 - a1) as f64];
            let w = multinomial_pmf(3, &pa, &[a1, 3 - a1]);
            want += w * (0..2).map(|d| k1[d] * a[d] * k2[d] / (k3[d] + a[d])).sum::<f64>();
        }
        assert!((rate.value(&[3.0]).unwrap().value - want).abs() < 1e-12);
    }
}
