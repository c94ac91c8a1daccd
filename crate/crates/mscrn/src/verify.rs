//! Convergence check of a reduction: ensembles of the finite-N process at several
//! system sizes against an ensemble of the reduced limit process, compared through
//! means of the reduced coordinates at fixed times.

use std::fmt::Write as _;

use serde::Serialize;

use crate::ensemble::{run_ensemble, EnsembleStats, Observable};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pdmp::{simulate_pdmp, OdeConfig};
use crate::reduce::{build_limit_system, build_reduced_model, ReduceOptions};
use crate::ssa::{simulate, SsaConfig};

/// Version of the report layout, bumped when fields change.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Settings of [`verify_convergence`].
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub n_grid: Vec<f64>,
    pub replicas: usize,
    pub times: Vec<f64>,
    pub seed: u64,
    /// Largest normalized error accepted at the largest system size.
    pub tolerance: f64,
    pub reduce: ReduceOptions,
    pub ode: OdeConfig,
    pub max_events: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            n_grid: vec![10.0, 100.0, 1000.0],
            replicas: 2000,
            times: vec![1.0],
            seed: 0,
            tolerance: 0.05,
            reduce: ReduceOptions::default(),
            ode: OdeConfig::default(),
            max_events: 100_000_000,
        }
    }
}

/// Whether the error sequence decreases with the system size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    Decreasing,
    NotDecreasing,
    NotApplicable,
}

/// Ensemble means and standard errors, indexed `[observable][time]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Moments {
    pub mean: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
    pub std_error: Vec<Vec<f64>>,
}

impl From<&EnsembleStats> for Moments {
    fn from(s: &EnsembleStats) -> Self {
        Moments { mean: s.mean.clone(), variance: s.variance.clone(), std_error: s.std_error.clone() }
    }
}

/// Finite-N ensemble at one system size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeResult {
    pub n: f64,
    pub moments: Moments,
    /// `max |mean_N - mean_limit| / (|mean_limit| + 1)` over observables and times.
    pub error: f64,
    /// Standard error of the maximizing term.
    pub error_se: f64,
}

/// A named pass/fail verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of [`verify_convergence`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub n_grid: Vec<f64>,
    pub times: Vec<f64>,
    pub replicas: usize,
    pub observables: Vec<String>,
    pub limit: Moments,
    pub sizes: Vec<SizeResult>,
    pub errors: Vec<f64>,
    pub trend: Trend,
    pub criteria: Vec<Criterion>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    /// One row per system size, observable and time. The limit rows have an empty `n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,observable,time,mean,std_error,limit_mean,limit_std_error,normalized_error\n");
        for (o, label) in self.observables.iter().enumerate() {
            for (t, time) in self.times.iter().enumerate() {
                let (lm, lse) = (self.limit.mean[o][t], self.limit.std_error[o][t]);
                let _ = writeln!(out, ",{label},{time},{lm},{lse},{lm},{lse},0");
                for s in &self.sizes {
                    let (m, se) = (s.moments.mean[o][t], s.moments.std_error[o][t]);
                    let _ = writeln!(out, "{},{label},{time},{m},{se},{lm},{lse},{}", s.n, (m - lm).abs() / (lm.abs() + 1.0));
                }
            }
        }
        out
    }
}

/// Trend verdict: errors must decrease along the grid, with at most one increase,
/// and that increase no larger than two combined standard errors.
pub fn trend(errors: &[f64], ses: &[f64]) -> Trend {
    if errors.len() < 2 {
        return Trend::NotApplicable;
    }
    let mut increases = 0;
    for i in 1..errors.len() {
        if errors[i] > errors[i - 1] {
            increases += 1;
            if errors[i] - errors[i - 1] > 2.0 * ses[i].hypot(ses[i - 1]) {
                return Trend::NotDecreasing;
            }
        }
    }
    if increases > 1 {
        Trend::NotDecreasing
    } else {
        Trend::Decreasing
    }
}

/// Compare finite-N ensembles with the reduced limit on the reduced coordinates.
pub fn verify_convergence(model: &Model, opts: &VerifyOptions) -> Result<VerifyReport> {
    if opts.n_grid.is_empty() || opts.times.is_empty() || opts.replicas == 0 {
        return Err(Error::Model("verification needs system sizes, times and replicas".into()));
    }
    let reduced = build_reduced_model(model, &opts.reduce)?;
    let sys = build_limit_system(&reduced)?;
    let observables: Vec<Observable> = reduced
        .observables()
        .into_iter()
        .map(|(label, weights)| Observable { label, weights })
        .collect();
    let reduced_obs: Vec<Observable> =
        reduced.labels().iter().enumerate().map(|(j, l)| Observable::coordinate(l, j)).collect();
    let mut times = opts.times.clone();
    times.sort_by(f64::total_cmp);
    let t_end = times[times.len() - 1];
    let limit = run_ensemble(opts.replicas, opts.seed, &reduced_obs, |rng| {
        simulate_pdmp(&sys, &reduced.initial, t_end, &times, &opts.ode, rng)
    })?;
    let x0 = model.initial_state()?;
    let mut sizes = Vec::new();
    for (idx, &n) in opts.n_grid.iter().enumerate() {
        let cfg = SsaConfig { max_events: opts.max_events, ..SsaConfig::new(n, times.clone()) };
        let stats = run_ensemble(opts.replicas, opts.seed.wrapping_add(idx as u64 + 1), &observables, |rng| {
            simulate(model, &x0, &cfg, rng)
        })?;
        let (mut error, mut error_se) = (0.0, 0.0);
        for o in 0..observables.len() {
            for t in 0..times.len() {
                let scale = limit.mean[o][t].abs() + 1.0;
                let e = (stats.mean[o][t] - limit.mean[o][t]).abs() / scale;
                if e >= error {
                    error = e;
                    error_se = stats.std_error[o][t].hypot(limit.std_error[o][t]) / scale;
                }
            }
        }
        sizes.push(SizeResult { n, moments: (&stats).into(), error, error_se });
    }
    let errors: Vec<f64> = sizes.iter().map(|s| s.error).collect();
    let ses: Vec<f64> = sizes.iter().map(|s| s.error_se).collect();
    let verdict = trend(&errors, &ses);
    let last = *errors.last().expect("nonempty grid");
    let criteria = vec![
        Criterion {
            name: "final-error".into(),
            passed: last <= opts.tolerance,
            detail: format!("error {last:.4} at N={} against tolerance {}", opts.n_grid[opts.n_grid.len() - 1], opts.tolerance),
        },
        Criterion {
            name: "trend".into(),
            passed: verdict != Trend::NotDecreasing,
            detail: format!("{verdict:?}"),
        },
    ];
    Ok(VerifyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_grid: opts.n_grid.clone(),
        times,
        replicas: opts.replicas,
        observables: reduced.labels(),
        limit: (&limit).into(),
        sizes,
        errors,
        trend: verdict,
        criteria,
    })
}
