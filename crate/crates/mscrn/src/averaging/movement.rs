//! Equilibrium of the movement dynamics and the induced product measure.

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::model::Model;

/// Stationary distribution of a continuous-time Markov chain with generator `q`.
///
/// The chain must have exactly one closed communicating class; states outside it get
/// probability zero.
pub fn chain_equilibrium(q: &[Vec<f64>], label: &str) -> Result<Vec<f64>> {
    let d = q.len();
    if d == 1 {
        return Ok(vec![1.0]);
    }
    let edges: Vec<Vec<usize>> =
        (0..d).map(|a| (0..d).filter(|&b| b != a && q[a][b] > 0.0).collect()).collect();
    if edges.iter().all(Vec::is_empty) {
        return Err(Error::IsolatedSpecies { species: label.to_string() });
    }
    let reach: Vec<Vec<bool>> = (0..d)
        .map(|s| {
            let mut seen = vec![false; d];
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(a) = stack.pop() {
                for &b in &edges[a] {
                    if !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
            seen
        })
        .collect();
    // a state is recurrent iff every state it reaches reaches it back
    let recurrent: Vec<bool> = (0..d).map(|a| (0..d).all(|b| !reach[a][b] || reach[b][a])).collect();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for a in (0..d).filter(|&a| recurrent[a]) {
        if !classes.iter().any(|c| reach[c[0]][a]) {
            classes.push((0..d).filter(|&b| reach[a][b]).collect());
        }
    }
    if classes.len() != 1 {
        return Err(Error::ReducibleChain { species: label.to_string(), classes: classes.len() });
    }
    let class = &classes[0];
    let m = class.len();
    // solve pi Q_C = 0 with sum(pi) = 1: rows of the system are columns of Q_C
    let mut a: Vec<Vec<f64>> = (0..m).map(|r| (0..m).map(|c| q[class[c]][class[r]]).collect()).collect();
    let mut rhs = vec![0.0; m];
    a[m - 1] = vec![1.0; m];
    rhs[m - 1] = 1.0;
    let sol = solve_dense(a, rhs).ok_or_else(|| Error::ReducibleChain { species: label.to_string(), classes: 0 })?;
    let mut pi = vec![0.0; d];
    for (i, &s) in class.iter().enumerate() {
        pi[s] = sol[i].max(0.0);
    }
    let total: f64 = pi.iter().sum();
    Ok(pi.into_iter().map(|p| p / total).collect())
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Movement equilibrium `pi_i` of one species over the compartments.
pub fn movement_equilibrium(model: &Model, species: usize) -> Result<Vec<f64>> {
    chain_equilibrium(&model.movement_generator(species), &model.network.species[species].name)
}

/// Distribution of one species over the compartments given its total.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeciesPlacement {
    /// `Multinomial(total, pi)` for counted species.
    Multinomial { total: u64, pi: Vec<f64> },
    /// Deterministic `total * pi` for concentrations.
    Point { values: Vec<f64> },
}

/// Product over species of the equilibrium placements.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductMeasure {
    pub placements: Vec<SpeciesPlacement>,
}

impl ProductMeasure {
    pub fn compartments(&self) -> usize {
        match self.placements.first() {
            Some(SpeciesPlacement::Multinomial { pi, .. }) => pi.len(),
            Some(SpeciesPlacement::Point { values }) => values.len(),
            None => 0,
        }
    }

    /// Mean abundance of each species in each compartment, species-major.
    pub fn mean(&self) -> Vec<f64> {
        self.placements
            .iter()
            .flat_map(|p| match p {
                SpeciesPlacement::Multinomial { total, pi } => pi.iter().map(|q| q * *total as f64).collect::<Vec<_>>(),
                SpeciesPlacement::Point { values } => values.clone(),
            })
            .collect()
    }

    /// Draw a placement, species-major.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.placements {
            match p {
                SpeciesPlacement::Multinomial { total, pi } => out.extend(sample_multinomial(*total, pi, rng)),
                SpeciesPlacement::Point { values } => out.extend(values.iter().copied()),
            }
        }
        out
    }

    /// Probability of a placement with the given counts of species `i` (per compartment).
    pub fn pmf(&self, i: usize, counts: &[u64]) -> f64 {
        match &self.placements[i] {
            SpeciesPlacement::Multinomial { total, pi } => multinomial_pmf(*total, pi, counts),
            SpeciesPlacement::Point { values } => {
                f64::from(u8::from(counts.iter().zip(values).all(|(c, v)| *c as f64 == *v)))
            }
        }
    }
}

/// Equilibrium product measure for the totals `s` (one per species).
pub fn product_measure(model: &Model, totals: &[f64]) -> Result<ProductMeasure> {
    let mut placements = Vec::with_capacity(totals.len());
    for (i, &s) in totals.iter().enumerate() {
        let pi = movement_equilibrium(model, i)?;
        if model.network.species[i].is_discrete() {
            if s < 0.0 || s.fract() != 0.0 {
                return Err(Error::InvalidInitialState(format!("total {s} of a counted species")));
            }
            placements.push(SpeciesPlacement::Multinomial { total: s as u64, pi });
        } else {
            placements.push(SpeciesPlacement::Point { values: pi.iter().map(|p| p * s).collect() });
        }
    }
    Ok(ProductMeasure { placements })
}

/// Sequential-binomial multinomial sampler.
pub fn sample_multinomial<R: Rng + ?Sized>(n: u64, p: &[f64], rng: &mut R) -> Vec<f64> {
    let mut left = n;
    let mut mass = 1.0;
    let mut out = Vec::with_capacity(p.len());
    for (j, &q) in p.iter().enumerate() {
        if j + 1 == p.len() {
            out.push(left as f64);
            break;
        }
        let prob = if mass > 0.0 { (q / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = if left == 0 || prob == 0.0 {
            0
        } else {
            Binomial::new(left, prob).map(|b| b.sample(rng)).unwrap_or(0)
        };
        out.push(x as f64);
        left -= x;
        mass -= q;
    }
    out
}

pub fn ln_factorial(n: u64) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

pub fn multinomial_pmf(n: u64, p: &[f64], counts: &[u64]) -> f64 {
    if counts.iter().sum::<u64>() != n {
        return 0.0;
    }
    let mut log = ln_factorial(n);
    for (&c, &q) in counts.iter().zip(p) {
        if c > 0 {
            if q == 0.0 {
                return 0.0;
            }
            log += c as f64 * q.ln() - ln_factorial(c);
        }
    }
    log.exp()
}

/// Probability weights of `Binomial(n, p)` for `0..=n`.
pub fn binomial_weights(n: u64, p: f64) -> Vec<f64> {
    if p <= 0.0 {
        let mut w = vec![0.0; n as usize + 1];
        w[0] = 1.0;
        return w;
    }
    if p >= 1.0 {
        let mut w = vec![0.0; n as usize + 1];
        w[n as usize] = 1.0;
        return w;
    }
    let mut w = Vec::with_capacity(n as usize + 1);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let lnn = ln_factorial(n);
    let mut lf = 0.0;
    for k in 0..=n {
        if k > 0 {
            lf += (k as f64).ln();
        }
        let lnk = ln_factorial(n - k);
        w.push((lnn - lf - lnk + k as f64 * lp + (n - k) as f64 * lq).exp());
    }
    w
}
