//! Averaged rates of the reduced model.
//!
//! Rates of slow reactions are averaged against the stationary law of the fast
//! subsystem and, for spatial models, against the movement equilibrium. Closed forms
//! are produced symbolically when the fast subsystem consists of independent linear
//! birth-death processes; otherwise the average is estimated by a long simulation.

pub mod closed;
pub mod movement;
pub mod nonspatial;
pub mod spatial;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::ensemble::replica_rng;
use crate::error::{Error, Result};
use crate::pdmp::{run_pdmp, HybridSystem, OdeConfig, PdmpOptions, RateFn};
use crate::symbolic::RationalSum;

pub use movement::{movement_equilibrium, product_measure, ProductMeasure, SpeciesPlacement};
pub use nonspatial::{averaged_rate_three_scale, averaged_rate_two_scale, stationary_fast, StationaryMeasure};
pub use spatial::{averaged_rate_single_scale, averaged_rate_spatial, mass_action_avg_kappa};

/// How stationary expectations are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    /// Closed form only; fails with `AnalyticUnavailable` otherwise.
    Analytic,
    /// Simulation only.
    MonteCarlo,
    /// Closed form where available, simulation otherwise.
    Auto,
}

/// Settings of Monte Carlo estimates.
#[derive(Debug, Clone, Serialize)]
pub struct McConfig {
    /// Number of fast jumps per stationary estimate.
    pub budget: u64,
    /// Fraction of the run discarded as burn-in.
    pub burn_in: f64,
    pub batches: usize,
    /// Samples of an outer measure when its support is too large to enumerate.
    pub outer_samples: usize,
    /// Estimates with a smaller effective sample size are rejected.
    pub min_ess: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { budget: 100_000, burn_in: 0.2, batches: 50, outer_samples: 10_000, min_ess: 100.0, seed: 0 }
    }
}

/// Averaging options.
#[derive(Debug, Clone, Serialize)]
pub struct AveragingOptions {
    pub mode: Mode,
    pub mc: McConfig,
}

impl Default for AveragingOptions {
    fn default() -> Self {
        AveragingOptions { mode: Mode::Auto, mc: McConfig::default() }
    }
}

/// Value with a standard error; the error is zero for closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, se: 0.0 }
    }
}

/// How an averaged rate is computed.
#[derive(Debug, Clone, PartialEq)]
pub enum RateKind {
    /// Rational function of the reduced coordinates.
    ClosedForm(RationalSum),
    /// The original rate law, unchanged by the reduction.
    Expression(String),
    /// Deterministic sum over a finite distribution.
    ExactSum,
    /// Simulation estimate.
    MonteCarlo,
}

impl fmt::Display for RateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateKind::ClosedForm(r) => write!(f, "{r}"),
            RateKind::Expression(s) => write!(f, "{s}"),
            RateKind::ExactSum => write!(f, "exact-sum"),
            RateKind::MonteCarlo => write!(f, "montecarlo"),
        }
    }
}

/// Evaluator of an averaged rate at a point of the reduced state space.
pub type RateEvaluator = Arc<dyn Fn(&[f64]) -> Result<Estimate> + Send + Sync>;

/// Averaged rate of one reaction of the reduced model.
#[derive(Clone)]
pub struct AveragedRate {
    pub reaction: usize,
    pub kind: RateKind,
    pub eval: RateEvaluator,
}

impl AveragedRate {
    pub fn value(&self, coords: &[f64]) -> Result<Estimate> {
        (self.eval)(coords)
    }
}

impl fmt::Debug for AveragedRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AveragedRate").field("reaction", &self.reaction).field("kind", &self.kind).finish()
    }
}

/// Stream index derived from the evaluation point so that repeated evaluations agree.
pub(crate) fn point_stream(tag: u64, point: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ tag;
    for x in point {
        for b in x.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Long-run averages along one path of a fast subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeAverage {
    pub estimates: Vec<Estimate>,
    /// Smallest effective sample size over the targets; infinite for exact values.
    pub ess: f64,
    /// Visited states after burn-in with their occupation-time weights, when requested.
    pub support: Vec<(Vec<f64>, f64)>,
}

/// Long-run time averages of `targets` along a path of `sys` started at `v0`.
///
/// Pure-flow systems are integrated to their fixed point. Otherwise the path runs for
/// `cfg.budget` jumps or until it is absorbed; after burn-in the averages are ratio
/// estimators with standard errors from batch means.
pub fn time_average(
    sys: &HybridSystem,
    v0: &[f64],
    targets: &[RateFn],
    cfg: &McConfig,
    stream: u64,
    keep_support: bool,
) -> Result<TimeAverage> {
    let mut rng = replica_rng(cfg.seed, stream);
    if sys.jumps.is_empty() {
        let state = flow_fixed_point(sys, v0)?;
        let estimates = targets.iter().map(|g| Ok(Estimate::exact(g(&state)?))).collect::<Result<_>>()?;
        let support = if keep_support { vec![(state, 1.0)] } else { Vec::new() };
        return Ok(TimeAverage { estimates, ess: f64::INFINITY, support });
    }
    let mut integrands: Vec<RateFn> = targets.to_vec();
    for g in targets {
        let g = g.clone();
        integrands.push(Arc::new(move |v: &[f64]| Ok(g(v)?.powi(2))));
    }
    let every = (cfg.budget / 1000).max(1);
    let opts = PdmpOptions {
        t_end: f64::INFINITY,
        stop_after_jumps: Some(cfg.budget),
        integrands,
        checkpoint_every: Some(every),
        record_states: keep_support,
        ..Default::default()
    };
    let run = run_pdmp(sys, v0, &opts, &mut rng)?;
    let cps = &run.checkpoints;
    if run.jumps < cfg.budget && sys.jump_rates(&run.final_state, &mut vec![0.0; sys.jumps.len()])? == 0.0 {
        let state = if sys.flows.is_empty() { run.final_state } else { flow_fixed_point(sys, &run.final_state)? };
        let estimates = targets.iter().map(|g| Ok(Estimate::exact(g(&state)?))).collect::<Result<_>>()?;
        let support = if keep_support { vec![(state, 1.0)] } else { Vec::new() };
        return Ok(TimeAverage { estimates, ess: f64::INFINITY, support });
    }
    if run.jumps < cfg.budget || cps.len() < 4 {
        return Err(Error::NonErgodicSuspected { ess: run.jumps as f64 });
    }
    let start = ((cps.len() as f64 * cfg.burn_in).ceil() as usize).min(cps.len() - 3);
    let kept = &cps[start..];
    let n_batches = cfg.batches.clamp(2, kept.len() - 1);
    let per = (kept.len() - 1) / n_batches;
    let bounds: Vec<usize> = (0..=n_batches).map(|b| b * per).collect();
    let m = targets.len();
    let mut estimates = Vec::with_capacity(m);
    let mut ess_min = f64::INFINITY;
    let total_t = kept[bounds[n_batches]].0 - kept[0].0;
    for j in 0..m {
        let total_i = kept[bounds[n_batches]].1[j] - kept[0].1[j];
        let total_sq = kept[bounds[n_batches]].1[m + j] - kept[0].1[m + j];
        let est = total_i / total_t;
        let mean_t = total_t / n_batches as f64;
        let mut acc = 0.0;
        for b in 0..n_batches {
            let (a, z) = (&kept[bounds[b]], &kept[bounds[b + 1]]);
            let dt = z.0 - a.0;
            let di = z.1[j] - a.1[j];
            acc += ((di - est * dt) / mean_t).powi(2);
        }
        let variance = (total_sq / total_t - est * est).max(0.0);
        // a target that is constant along the path differs between batches by rounding only
        let constant = variance <= 1e-12 * est * est;
        let se = if constant { 0.0 } else { (acc / (n_batches * (n_batches - 1)) as f64).sqrt() };
        if se > 0.0 {
            let ess = variance / (se * se);
            if ess < cfg.min_ess {
                return Err(Error::NonErgodicSuspected { ess });
            }
            ess_min = ess_min.min(ess);
        }
        estimates.push(Estimate { value: est, se });
    }
    let support = if keep_support { occupation(&run.jump_states, kept[0].0, run.trajectory.final_time) } else { Vec::new() };
    Ok(TimeAverage { estimates, ess: ess_min, support })
}

/// Merge the states of a path after `from` into occupation weights summing to one.
fn occupation(states: &[(f64, Vec<f64>)], from: f64, until: f64) -> Vec<(Vec<f64>, f64)> {
    let mut weights: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
    for (w, pair) in states.windows(2).map(|w| (w[1].0 - w[0].0.max(from), &w[0])).chain(
        states.last().map(|last| (until - last.0.max(from), last)),
    ) {
        if w <= 0.0 {
            continue;
        }
        let key = pair.1.iter().map(|x| x.to_bits()).collect();
        weights.entry(key).or_insert_with(|| (pair.1.clone(), 0.0)).1 += w;
    }
    let total: f64 = weights.values().map(|(_, w)| w).sum();
    weights.into_values().map(|(v, w)| (v, w / total)).collect()
}

/// Integrate a jump-free system until its drift vanishes.
fn flow_fixed_point(sys: &HybridSystem, v0: &[f64]) -> Result<Vec<f64>> {
    let mut state = v0.to_vec();
    let mut drift = vec![0.0; state.len()];
    let mut rng = replica_rng(0, 0);
    let mut horizon = 1.0;
    while horizon <= 1e4 {
        let opts = PdmpOptions { t_end: horizon, grid: vec![horizon], ode: OdeConfig::default(), ..Default::default() };
        state = run_pdmp(sys, &state, &opts, &mut rng)?.final_state;
        sys.drift(&state, &mut drift)?;
        if drift.iter().zip(&state).all(|(f, v)| f.abs() <= 1e-6 * (1.0 + v.abs())) {
            return Ok(state);
        }
        horizon *= 2.0;
    }
    Err(Error::NonErgodicSuspected { ess: 0.0 })
}
