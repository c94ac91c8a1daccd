//! Exact stochastic simulation of the finite-N process by the direct method.
//!
//! The process keeps raw integer counts. Reaction `k` in compartment `d` fires at rate
//! `N^(beta_k + gamma) lambda_k(V)`. Mass action on counts uses falling factorials,
//! divided by `N^(alpha_i nu_ik)` for concentration species, which converges to the
//! power law `v^nu` of the limit. Movement of species `i` from `d` to `d'` fires at rate
//! `N^(eta_i + gamma) lambda x_id`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::model::{exp_f64, falling, Model, RateLaw, State};

/// Settings of one SSA run.
#[derive(Debug, Clone)]
pub struct SsaConfig {
    /// System size `N`.
    pub n: f64,
    pub t_end: f64,
    /// Times at which the state is recorded.
    pub grid: Vec<f64>,
    pub max_events: u64,
    /// Keep the full `(time, channel)` event log.
    pub record_events: bool,
}

impl SsaConfig {
    pub fn new(n: f64, grid: Vec<f64>) -> Self {
        let t_end = grid.iter().copied().fold(0.0, f64::max);
        SsaConfig { n, t_end, grid, max_events: 100_000_000, record_events: false }
    }
}

/// Recorded path of a simulation.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Trajectory {
    /// Names of the state coordinates.
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    /// Scaled states at `times`.
    pub states: Vec<Vec<f64>>,
    /// Names of the event channels.
    pub channels: Vec<String>,
    /// Number of firings of each channel.
    pub event_counts: Vec<u64>,
    /// `(time, channel)` of every event when requested.
    pub events: Vec<(f64, usize)>,
    /// Per-species totals over compartments at `times` for spatial runs.
    pub totals: Option<Vec<Vec<f64>>>,
    /// Time at which the run stopped.
    pub final_time: f64,
}

enum Law {
    Mass { factor: f64, reactants: Vec<(usize, u32)> },
    Expression { factor: f64, expr: Expr },
    Move { factor: f64, index: usize },
}

struct Channel {
    law: Law,
    change: Vec<(usize, i64)>,
    reaction: Option<usize>,
}

/// Compiled event channels of a model at a fixed system size.
pub struct Channels {
    channels: Vec<Channel>,
    inv_scale: Vec<f64>,
    labels: Vec<String>,
}

impl Channels {
    pub fn new(model: &Model, n: f64) -> Result<Self> {
        let dd = model.n_compartments();
        let net = &model.network;
        let gamma = exp_f64(model.scaling.gamma);
        let inv_scale: Vec<f64> = (0..model.state_len())
            .map(|idx| n.powf(-exp_f64(net.species[idx / dd].alpha)))
            .collect();
        let mut channels = Vec::new();
        let mut labels = Vec::new();
        for (k, r) in net.reactions.iter().enumerate() {
            let speed = n.powf(exp_f64(r.beta) + gamma);
            for d in 0..dd {
                let idx = |i: usize| i * dd + d;
                let change: Vec<(usize, i64)> = (0..net.species.len())
                    .filter_map(|i| {
                        let z = r.change(i);
                        (z != 0).then(|| (idx(i), z))
                    })
                    .collect();
                let law = match &r.rate {
                    RateLaw::MassAction { kappa } => {
                        let mut factor = speed * kappa[d];
                        for &(i, nu) in &r.reactants {
                            factor *= inv_scale[idx(i)].powi(nu as i32);
                        }
                        Law::Mass { factor, reactants: r.reactants.iter().map(|&(i, nu)| (idx(i), nu)).collect() }
                    }
                    RateLaw::Expression { exprs } => {
                        Law::Expression { factor: speed, expr: exprs[d].map_vars(&|i| idx(i)) }
                    }
                };
                channels.push(Channel { law, change, reaction: Some(k) });
                labels.push(match &model.geometry {
                    Some(g) => format!("R{}@{}", k + 1, g.compartments[d]),
                    None => format!("R{}", k + 1),
                });
            }
        }
        if let Some(g) = &model.geometry {
            for m in g.movement.iter().filter(|m| m.rate > 0.0) {
                let s = &net.species[m.species];
                let eta = s
                    .eta
                    .ok_or_else(|| Error::validation(format!("species {} needs a movement exponent eta", s.name)))?;
                let from = m.species * dd + m.from;
                let to = m.species * dd + m.to;
                channels.push(Channel {
                    law: Law::Move { factor: n.powf(exp_f64(eta) + gamma) * m.rate, index: from },
                    change: vec![(from, -1), (to, 1)],
                    reaction: None,
                });
                labels.push(format!("move {} {}->{}", s.name, g.compartments[m.from], g.compartments[m.to]));
            }
        }
        Ok(Channels { channels, inv_scale, labels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Change of the raw state when channel `c` fires.
    pub fn change(&self, c: usize) -> &[(usize, i64)] {
        &self.channels[c].change
    }

    /// Reaction index of a chemical channel.
    pub fn reaction(&self, c: usize) -> Option<usize> {
        self.channels[c].reaction
    }

    /// Propensity of channel `c` at raw counts `x`.
    pub fn propensity(&self, c: usize, x: &[f64]) -> Result<f64> {
        let a = match &self.channels[c].law {
            Law::Mass { factor, reactants } => {
                reactants.iter().fold(*factor, |acc, &(i, nu)| acc * falling(x[i], nu))
            }
            Law::Expression { factor, expr } => factor * expr.eval(&|j| x[j] * self.inv_scale[j]),
            Law::Move { factor, index } => factor * x[*index],
        };
        if !a.is_finite() || a < 0.0 {
            return Err(Error::RateEvaluation {
                reaction: self.channels[c].reaction.unwrap_or(usize::MAX),
                detail: format!("propensity {a} of channel {}", self.labels[c]),
            });
        }
        Ok(a)
    }
}

/// Simulate the finite-N process from `x0` (scaled or raw) with the direct method.
pub fn simulate<R: Rng + ?Sized>(model: &Model, x0: &State, cfg: &SsaConfig, rng: &mut R) -> Result<Trajectory> {
    let channels = Channels::new(model, cfg.n)?;
    if x0.values.len() != model.state_len() {
        return Err(Error::InvalidInitialState(format!(
            "expected {} entries, found {}",
            model.state_len(),
            x0.values.len()
        )));
    }
    let mut x = model.to_raw(x0, cfg.n)?.values;
    let scale: Vec<f64> = channels.inv_scale.clone();
    let scaled = |x: &[f64]| x.iter().zip(&scale).map(|(a, b)| a * b).collect::<Vec<f64>>();
    let mut grid: Vec<f64> = cfg.grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut traj = Trajectory {
        labels: model.state_labels(),
        times: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        channels: channels.labels.clone(),
        event_counts: vec![0; channels.len()],
        events: Vec::new(),
        totals: None,
        final_time: 0.0,
    };
    let mut props = vec![0.0; channels.len()];
    let mut t = 0.0;
    let mut next_grid = 0;
    let mut n_events: u64 = 0;
    loop {
        let mut a0 = 0.0;
        for (c, p) in props.iter_mut().enumerate() {
            *p = channels.propensity(c, &x)?;
            a0 += *p;
        }
        let t_next = if a0 > 0.0 { t + <Exp1 as Distribution<f64>>::sample(&Exp1, rng) / a0 } else { f64::INFINITY };
        while next_grid < grid.len() && grid[next_grid] <= cfg.t_end && grid[next_grid] < t_next {
            traj.times.push(grid[next_grid]);
            traj.states.push(scaled(&x));
            next_grid += 1;
        }
        if t_next > cfg.t_end {
            t = cfg.t_end;
            break;
        }
        if n_events >= cfg.max_events {
            return Err(Error::EventCapExceeded { cap: cfg.max_events, time: t });
        }
        let u = rng.random::<f64>() * a0;
        let mut acc = 0.0;
        let mut chosen = props.len() - 1;
        for (c, p) in props.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = c;
                break;
            }
        }
        while props[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        for &(i, z) in channels.change(chosen) {
            x[i] += z as f64;
            if x[i] < 0.0 {
                return Err(Error::NegativeRate { time: t_next, coordinate: i, value: x[i] });
            }
        }
        t = t_next;
        n_events += 1;
        traj.event_counts[chosen] += 1;
        if cfg.record_events {
            traj.events.push((t, chosen));
        }
    }
    traj.final_time = t;
    Ok(traj)
}

/// Spatial simulation that also records per-species totals over compartments.
pub fn simulate_spatial<R: Rng + ?Sized>(model: &Model, x0: &State, cfg: &SsaConfig, rng: &mut R) -> Result<Trajectory> {
    if !model.is_spatial() {
        return Err(Error::Model("simulate_spatial needs a model with compartments".into()));
    }
    let mut traj = simulate(model, x0, cfg, rng)?;
    let dd = model.n_compartments();
    traj.totals = Some(
        traj.states
            .iter()
            .map(|s| (0..model.n_species()).map(|i| s[i * dd..(i + 1) * dd].iter().sum()).collect())
            .collect(),
    );
    Ok(traj)
}
