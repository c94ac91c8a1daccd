//! Piecewise-deterministic Markov processes: jumps at state-dependent rates between
//! which continuous coordinates follow an ODE.
//!
//! The ODE is integrated with an adaptive Dormand-Prince 5(4) scheme. The cumulative
//! jump hazard is carried as an extra coordinate; a jump fires when it crosses an
//! `Exp(1)` threshold, located by bisection. Without flow terms the process is a
//! pure jump process and is simulated exactly by the direct method.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::ssa::Trajectory;

/// State-dependent rate.
pub type RateFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;

/// Discrete transition `v -> v + jump` at rate `rate(v)`.
#[derive(Clone)]
pub struct JumpReaction {
    pub label: String,
    pub rate: RateFn,
    pub jump: Vec<(usize, f64)>,
}

/// Flow term `dv/dt += drift * rate(v)`.
#[derive(Clone)]
pub struct FlowReaction {
    pub label: String,
    pub rate: RateFn,
    pub drift: Vec<(usize, f64)>,
}

/// A piecewise-deterministic process over labelled coordinates.
#[derive(Clone, Default)]
pub struct HybridSystem {
    pub labels: Vec<String>,
    pub jumps: Vec<JumpReaction>,
    pub flows: Vec<FlowReaction>,
}

impl HybridSystem {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    /// Drift `sum_k drift_k rate_k(v)`.
    pub fn drift(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|x| *x = 0.0);
        for f in &self.flows {
            let r = checked(&f.label, (f.rate)(v)?)?;
            for &(i, z) in &f.drift {
                out[i] += z * r;
            }
        }
        Ok(())
    }

    pub fn jump_rates(&self, v: &[f64], out: &mut [f64]) -> Result<f64> {
        let mut total = 0.0;
        for (j, r) in self.jumps.iter().enumerate() {
            out[j] = checked(&r.label, (r.rate)(v)?)?;
            total += out[j];
        }
        Ok(total)
    }
}

fn checked(label: &str, r: f64) -> Result<f64> {
    if r.is_finite() && r >= 0.0 {
        Ok(r)
    } else {
        Err(Error::RateEvaluation { reaction: usize::MAX, detail: format!("rate {r} of {label}") })
    }
}

/// Integrator settings.
#[derive(Debug, Clone)]
pub struct OdeConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Tolerance on the hazard at a located jump time.
    pub hazard_tol: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { rtol: 1e-6, atol: 1e-9, h_init: 1e-3, h_min: 1e-14, h_max: f64::INFINITY, hazard_tol: 1e-10 }
    }
}

/// Run settings.
#[derive(Clone, Default)]
pub struct PdmpOptions {
    pub t_end: f64,
    pub grid: Vec<f64>,
    pub ode: OdeConfig,
    /// Error out after this many jumps.
    pub max_jumps: Option<u64>,
    /// Stop quietly after this many jumps.
    pub stop_after_jumps: Option<u64>,
    pub record_events: bool,
    /// Keep the state after every jump, starting with the initial state.
    pub record_states: bool,
    /// Functions whose time integrals are accumulated along the path.
    pub integrands: Vec<RateFn>,
    /// Record `(time, integrals)` after every this many jumps.
    pub checkpoint_every: Option<u64>,
}

/// Output of [`run_pdmp`].
#[derive(Debug, Clone)]
pub struct PdmpRun {
    pub trajectory: Trajectory,
    pub final_state: Vec<f64>,
    pub integrals: Vec<f64>,
    pub checkpoints: Vec<(f64, Vec<f64>)>,
    /// `(time, state)` after each jump when `record_states` is set.
    pub jump_states: Vec<(f64, Vec<f64>)>,
    pub jumps: u64,
}

struct Recorder<'a> {
    opts: &'a PdmpOptions,
    grid: Vec<f64>,
    next: usize,
    traj: Trajectory,
    states: Vec<(f64, Vec<f64>)>,
    jumps: u64,
}

impl Recorder<'_> {
    fn record_until(&mut self, t: f64, v: &[f64], inclusive: bool) {
        while self.next < self.grid.len()
            && self.grid[self.next] <= self.opts.t_end
            && (self.grid[self.next] < t || inclusive && self.grid[self.next] == t)
        {
            self.traj.times.push(self.grid[self.next]);
            self.traj.states.push(v.to_vec());
            self.next += 1;
        }
    }

    fn next_grid(&self) -> f64 {
        self.grid.get(self.next).copied().unwrap_or(f64::INFINITY)
    }

    fn jump(
        &mut self,
        t: f64,
        j: usize,
        v: &[f64],
        integrals: &[f64],
        checkpoints: &mut Vec<(f64, Vec<f64>)>,
    ) -> Result<bool> {
        self.jumps += 1;
        if self.opts.record_states {
            self.states.push((t, v.to_vec()));
        }
        self.traj.event_counts[j] += 1;
        if self.opts.record_events {
            self.traj.events.push((t, j));
        }
        if let Some(every) = self.opts.checkpoint_every {
            if self.jumps % every.max(1) == 0 {
                checkpoints.push((t, integrals.to_vec()));
            }
        }
        if let Some(cap) = self.opts.max_jumps {
            if self.jumps > cap {
                return Err(Error::EventCapExceeded { cap, time: t });
            }
        }
        Ok(self.opts.stop_after_jumps.is_some_and(|s| self.jumps >= s))
    }
}

fn choose<R: Rng + ?Sized>(rates: &[f64], total: f64, rng: &mut R) -> usize {
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, r) in rates.iter().enumerate() {
        acc += r;
        if u < acc {
            return j;
        }
    }
    rates.iter().rposition(|r| *r > 0.0).unwrap_or(rates.len() - 1)
}

fn apply_jump(sys: &HybridSystem, j: usize, v: &mut [f64], t: f64) -> Result<()> {
    for &(i, z) in &sys.jumps[j].jump {
        v[i] += z;
        if v[i] < -1e-9 {
            return Err(Error::NegativeRate { time: t, coordinate: i, value: v[i] });
        }
    }
    Ok(())
}

fn eval_integrands(opts: &PdmpOptions, v: &[f64], out: &mut [f64]) -> Result<()> {
    for (m, g) in opts.integrands.iter().enumerate() {
        out[m] = g(v)?;
    }
    Ok(())
}

/// Simulate `sys` from `v0` and record the state on `opts.grid`.
pub fn run_pdmp<R: Rng + ?Sized>(sys: &HybridSystem, v0: &[f64], opts: &PdmpOptions, rng: &mut R) -> Result<PdmpRun> {
    let mut grid = opts.grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut rec = Recorder {
        opts,
        grid,
        next: 0,
        traj: Trajectory {
            labels: sys.labels.clone(),
            times: Vec::new(),
            states: Vec::new(),
            channels: sys.jumps.iter().map(|j| j.label.clone()).collect(),
            event_counts: vec![0; sys.jumps.len()],
            events: Vec::new(),
            totals: None,
            final_time: 0.0,
        },
        states: if opts.record_states { vec![(0.0, v0.to_vec())] } else { Vec::new() },
        jumps: 0,
    };
    let mut checkpoints = Vec::new();
    let (v, integrals, t) = if sys.flows.is_empty() {
        run_pure_jump(sys, v0, opts, rng, &mut rec, &mut checkpoints)?
    } else {
        run_hybrid(sys, v0, opts, rng, &mut rec, &mut checkpoints)?
    };
    rec.traj.final_time = t;
    Ok(PdmpRun { trajectory: rec.traj, final_state: v, integrals, checkpoints, jump_states: rec.states, jumps: rec.jumps })
}

/// Simulate `sys` and return the recorded trajectory.
pub fn simulate_pdmp<R: Rng + ?Sized>(
    sys: &HybridSystem,
    v0: &[f64],
    t_end: f64,
    grid: &[f64],
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let opts = PdmpOptions { t_end, grid: grid.to_vec(), ode: ode.clone(), ..Default::default() };
    Ok(run_pdmp(sys, v0, &opts, rng)?.trajectory)
}

type RunOutput = (Vec<f64>, Vec<f64>, f64);

fn run_pure_jump<R: Rng + ?Sized>(
    sys: &HybridSystem,
    v0: &[f64],
    opts: &PdmpOptions,
    rng: &mut R,
    rec: &mut Recorder,
    checkpoints: &mut Vec<(f64, Vec<f64>)>,
) -> Result<RunOutput> {
    let mut v = v0.to_vec();
    let mut t = 0.0;
    let mut rates = vec![0.0; sys.jumps.len()];
    let mut g = vec![0.0; opts.integrands.len()];
    let mut integrals = vec![0.0; opts.integrands.len()];
    loop {
        let total = sys.jump_rates(&v, &mut rates)?;
        eval_integrands(opts, &v, &mut g)?;
        let dt = if total > 0.0 { <Exp1 as Distribution<f64>>::sample(&Exp1, rng) / total } else { f64::INFINITY };
        let t_next = t + dt;
        rec.record_until(t_next, &v, false);
        if t_next > opts.t_end || total == 0.0 {
            if opts.t_end.is_finite() {
                for (i, gi) in integrals.iter_mut().zip(&g) {
                    *i += gi * (opts.t_end - t);
                }
                t = opts.t_end;
            }
            rec.record_until(t, &v, true);
            return Ok((v, integrals, t));
        }
        for (i, gi) in integrals.iter_mut().zip(&g) {
            *i += gi * dt;
        }
        t = t_next;
        let j = choose(&rates, total, rng);
        apply_jump(sys, j, &mut v, t)?;
        if rec.jump(t, j, &v, &integrals, checkpoints)? {
            return Ok((v, integrals, t));
        }
    }
}

// Dormand-Prince 5(4) tableau of an autonomous system.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// Right-hand side of the augmented system `[v, hazard, integrals]`.
fn augmented_rhs(sys: &HybridSystem, opts: &PdmpOptions, y: &[f64], out: &mut [f64], rates: &mut [f64]) -> Result<()> {
    let n = sys.dim();
    sys.drift(&y[..n], &mut out[..n])?;
    out[n] = sys.jump_rates(&y[..n], rates)?;
    for (m, g) in opts.integrands.iter().enumerate() {
        out[n + 1 + m] = g(&y[..n])?;
    }
    Ok(())
}

/// One Dormand-Prince step; returns the fifth-order solution and the error estimate.
fn dp_step(
    sys: &HybridSystem,
    opts: &PdmpOptions,
    y: &[f64],
    h: f64,
    rates: &mut [f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = y.len();
    let mut k = vec![vec![0.0; len]; 7];
    let mut tmp = vec![0.0; len];
    for s in 0..7 {
        for i in 0..len {
            tmp[i] = y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
        }
        // stage states of abundances are evaluated at zero when they undershoot it
        for x in &mut tmp[..sys.dim()] {
            *x = x.max(0.0);
        }
        augmented_rhs(sys, opts, &tmp, &mut k[s], rates)?;
    }
    let y5: Vec<f64> = (0..len).map(|i| y[i] + h * (0..7).map(|s| B5[s] * k[s][i]).sum::<f64>()).collect();
    let err: Vec<f64> = (0..len).map(|i| h * (0..7).map(|s| (B5[s] - B4[s]) * k[s][i]).sum::<f64>()).collect();
    Ok((y5, err))
}

fn run_hybrid<R: Rng + ?Sized>(
    sys: &HybridSystem,
    v0: &[f64],
    opts: &PdmpOptions,
    rng: &mut R,
    rec: &mut Recorder,
    checkpoints: &mut Vec<(f64, Vec<f64>)>,
) -> Result<RunOutput> {
    let n = sys.dim();
    let cfg = &opts.ode;
    let mut y = vec![0.0; n + 1 + opts.integrands.len()];
    y[..n].copy_from_slice(v0);
    let mut rates = vec![0.0; sys.jumps.len()];
    let mut threshold: f64 = Exp1.sample(rng);
    let mut t = 0.0;
    let mut h = cfg.h_init;
    rec.record_until(t, &y[..n], true);
    while t < opts.t_end {
        let target = rec.next_grid().min(opts.t_end);
        let step = h.min(target - t).min(cfg.h_max);
        let (y_new, err) = dp_step(sys, opts, &y, step, &mut rates)?;
        let err_norm = err
            .iter()
            .enumerate()
            .map(|(i, e)| e.abs() / (cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs())))
            .fold(0.0, f64::max);
        if !err_norm.is_finite() || err_norm > 1.0 {
            h = step * (0.9 * err_norm.powf(-0.2)).clamp(0.1, 0.5);
            if !h.is_finite() {
                h = step * 0.1;
            }
            if h < cfg.h_min {
                return Err(Error::OdeStepFailure { time: t, detail: format!("step size {h:e} below minimum") });
            }
            continue;
        }
        if let Some(i) = (0..n).find(|&i| y_new[i] < -cfg.atol) {
            if step * 0.5 < cfg.h_min {
                return Err(Error::NegativeRate { time: t + step, coordinate: i, value: y_new[i] });
            }
            h = step * 0.5;
            continue;
        }
        let mut y_new = y_new;
        for x in &mut y_new[..n] {
            *x = x.max(0.0);
        }
        let factor = if err_norm == 0.0 { 5.0 } else { (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0) };
        if y_new[n] >= threshold {
            // locate the crossing of the hazard threshold inside [t, t + step]
            let (mut lo, mut hi) = (0.0, step);
            let mut y_hi = y_new;
            for _ in 0..200 {
                if (y_hi[n] - threshold).abs() <= cfg.hazard_tol || hi - lo <= 1e-15 * t.abs().max(1.0) {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let (mut y_mid, _) = dp_step(sys, opts, &y, mid, &mut rates)?;
                y_mid[..n].iter_mut().for_each(|x| *x = x.max(0.0));
                if y_mid[n] >= threshold {
                    hi = mid;
                    y_hi = y_mid;
                } else {
                    lo = mid;
                }
            }
            t += hi;
            y = y_hi;
            let total = sys.jump_rates(&y[..n], &mut rates)?;
            if total > 0.0 {
                let j = choose(&rates, total, rng);
                apply_jump(sys, j, &mut y[..n], t)?;
                y[n] = 0.0;
                threshold = Exp1.sample(rng);
                let integrals = y[n + 1..].to_vec();
                if rec.jump(t, j, &y[..n], &integrals, checkpoints)? {
                    return Ok((y[..n].to_vec(), integrals, t));
                }
            } else {
                y[n] = 0.0;
                threshold = Exp1.sample(rng);
            }
            rec.record_until(t, &y[..n], true);
            h = hi.max(cfg.h_min * 10.0);
            continue;
        }
        t = if step == target - t { target } else { t + step };
        y = y_new;
        rec.record_until(t, &y[..n], true);
        h = step * factor;
    }
    Ok((y[..n].to_vec(), y[n + 1..].to_vec(), t))
}
