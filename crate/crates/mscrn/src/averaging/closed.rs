//! Closed-form stationary expectations of fast subsystems made of independent linear
//! birth-death processes.
//!
//! A counted fast variable with births at rate `B` and deaths at rate `D x`, where `B`
//! and `D` do not involve fast variables, is stationary Poisson with mean `B / D`. A
//! concentration with the same structure settles at the fixed point `B / D`.

use crate::symbolic::RationalFn;

/// A fast variable of a symbolic subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicVar {
    pub name: String,
    pub discrete: bool,
}

/// A fast reaction: rate and changes of the fast variables (by index).
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicReaction {
    pub label: String,
    pub rate: RationalFn,
    pub change: Vec<(usize, i64)>,
}

fn free_of(r: &RationalFn, vars: &[SymbolicVar]) -> bool {
    vars.iter().all(|v| !r.contains_var(&v.name))
}

/// Stationary means of every fast variable, or the reason the subsystem does not have
/// the birth-death structure.
pub fn birth_death_means(vars: &[SymbolicVar], reactions: &[SymbolicReaction]) -> Result<Vec<RationalFn>, String> {
    let mut births = vec![RationalFn::constant(0.0); vars.len()];
    let mut deaths = vec![RationalFn::constant(0.0); vars.len()];
    for r in reactions {
        let moved: Vec<&(usize, i64)> = r.change.iter().filter(|(_, z)| *z != 0).collect();
        let &&(i, z) = match moved.as_slice() {
            [] => continue,
            [one] => one,
            _ => return Err(format!("reaction {} changes several fast species", r.label)),
        };
        let v = &vars[i];
        if v.discrete && z.abs() != 1 {
            return Err(format!("reaction {} changes {} by {z}", r.label, v.name));
        }
        if z > 0 {
            if !free_of(&r.rate, vars) {
                return Err(format!("birth rate of {} in reaction {} depends on fast species", v.name, r.label));
            }
            births[i] = births[i].add(&r.rate.scale(z as f64));
        } else {
            let coeffs = r.rate.num.coefficients_in(&v.name);
            let linear = coeffs.len() == 2 && coeffs[0].is_zero();
            let slope = RationalFn::new(coeffs.last().cloned().unwrap_or_default(), r.rate.den.clone());
            match slope {
                Some(s) if linear && free_of(&s, vars) => deaths[i] = deaths[i].add(&s.scale(-z as f64)),
                _ => {
                    return Err(format!("death rate of {} in reaction {} is not linear in it", v.name, r.label));
                }
            }
        }
    }
    births
        .iter()
        .zip(&deaths)
        .zip(vars)
        .map(|((b, d), v)| {
            if b.is_zero() {
                Ok(RationalFn::constant(0.0))
            } else {
                b.div(d).ok_or_else(|| format!("{} has births but no deaths", v.name))
            }
        })
        .collect()
}

/// Expectation of `r` when each fast variable is independently Poisson (counted) or
/// fixed (concentration) with the given means.
pub fn expect_over(r: &RationalFn, vars: &[SymbolicVar], means: &[RationalFn]) -> Option<RationalFn> {
    let mut out = r.clone();
    for (v, m) in vars.iter().zip(means) {
        if !out.contains_var(&v.name) {
            continue;
        }
        out = if v.discrete { out.expect_poisson(&v.name, m)? } else { out.subst(&v.name, m) };
    }
    Some(out)
}
