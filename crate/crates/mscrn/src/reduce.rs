//! Reduced limit models: coordinates, limiting stoichiometry and averaged rates, and
//! the hybrid system that simulates them.

use std::sync::Arc;

use crate::analysis::{classify, conserved_basis, spatial_case_for, ConservedBasis, ScaleClassification, SpatialCase};
use crate::averaging::nonspatial::{conserved_name, kappa_values, var_name, Binding};
use crate::averaging::spatial::total_name;
use crate::averaging::{
    averaged_rate_single_scale, averaged_rate_spatial, averaged_rate_three_scale, averaged_rate_two_scale,
    AveragedRate, AveragingOptions, Estimate, RateKind,
};
use crate::error::{Error, Result};
use crate::model::{Model, RateLaw};
use crate::pdmp::{FlowReaction, HybridSystem, JumpReaction, RateFn};

/// What a reduced coordinate measures.
#[derive(Debug, Clone, PartialEq)]
pub enum Coordinate {
    /// Abundance of a species (its total over compartments in spatial models).
    Species(usize),
    /// Conserved quantity `<theta_j, V_f>` of the fast tier.
    Conserved(usize),
}

/// One coordinate of the reduced model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCoordinate {
    pub name: String,
    pub what: Coordinate,
    /// Counted coordinates change by jumps, the others follow a flow.
    pub discrete: bool,
}

/// One reaction of the reduced model.
#[derive(Clone, Debug)]
pub struct ReducedReaction {
    /// Index of the reaction in the full network.
    pub reaction: usize,
    /// Nonzero changes `(coordinate, amount)`.
    pub change: Vec<(usize, i64)>,
    /// Fires as a Poisson-driven jump rather than a flow term.
    pub jump: bool,
    pub rate: Option<AveragedRate>,
}

/// Limit model on the slow time scale.
#[derive(Clone, Debug)]
pub struct ReducedModel {
    pub model: Arc<Model>,
    pub classification: ScaleClassification,
    pub basis: ConservedBasis,
    pub spatial_case: Option<SpatialCase>,
    pub coordinates: Vec<ReducedCoordinate>,
    pub reactions: Vec<ReducedReaction>,
    /// Reduced coordinates of the model's initial state.
    pub initial: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Options of [`build_reduced_model`].
#[derive(Debug, Clone, Default)]
pub struct ReduceOptions {
    pub averaging: AveragingOptions,
    /// Averaging case to use instead of the one given by the movement exponents.
    pub case: Option<SpatialCase>,
}

impl ReducedModel {
    pub fn labels(&self) -> Vec<String> {
        self.coordinates.iter().map(|c| c.name.clone()).collect()
    }

    /// Reduced coordinates of a full scaled state of the original model.
    pub fn project(&self, state: &[f64]) -> Vec<f64> {
        let dd = self.model.n_compartments();
        let total = |i: usize| (0..dd).map(|d| state[self.model.state_index(i, d)]).sum::<f64>();
        self.coordinates
            .iter()
            .map(|c| match c.what {
                Coordinate::Species(i) => total(i),
                Coordinate::Conserved(j) => self.basis.quantities[j].theta.iter().map(|&(i, t)| t as f64 * total(i)).sum(),
            })
            .collect()
    }

    /// Linear functionals of the full state that give each reduced coordinate, as
    /// `(state index, weight)` pairs.
    pub fn observables(&self) -> Vec<(String, Vec<(usize, f64)>)> {
        let dd = self.model.n_compartments();
        let spread = |i: usize, w: f64| (0..dd).map(move |d| (i * dd + d, w));
        self.coordinates
            .iter()
            .map(|c| {
                let weights = match c.what {
                    Coordinate::Species(i) => spread(i, 1.0).collect(),
                    Coordinate::Conserved(j) => {
                        self.basis.quantities[j].theta.iter().flat_map(|&(i, t)| spread(i, t as f64)).collect()
                    }
                };
                (c.name.clone(), weights)
            })
            .collect()
    }
}

fn identity_rate(model: &Model, cls: &ScaleClassification, k: usize) -> AveragedRate {
    let species = &cls.slow().species;
    let template = model.initial_state().map(|s| s.values).unwrap_or_else(|_| vec![0.0; model.state_len()]);
    let coords: Vec<String> = species.iter().map(|&i| var_name(model, i)).collect();
    let mut fixed: Vec<(String, f64)> = cls.dropped.iter().map(|&i| (var_name(model, i), template[i])).collect();
    fixed.extend(kappa_values(model));
    let binding = Binding::new(coords, fixed);
    if let Some(rate) = model.rate_rational(k, 0, &|i| var_name(model, i), true).and_then(|r| binding.closed_form(k, r.into())) {
        return rate;
    }
    let text = match &model.network.reactions[k].rate {
        RateLaw::Expression { exprs } => exprs[0].display(&|i| model.network.species[i].name.clone()).to_string(),
        RateLaw::MassAction { .. } => "mass-action".into(),
    };
    let model = Arc::new(model.clone());
    let species = species.clone();
    let eval = Arc::new(move |coords: &[f64]| {
        let mut full = template.clone();
        for (j, &i) in species.iter().enumerate() {
            full[i] = coords[j];
        }
        let value = model.local_rate(k, 0, &full);
        if !value.is_finite() || value < 0.0 {
            return Err(Error::RateEvaluation { reaction: k, detail: format!("value {value}") });
        }
        Ok(Estimate::exact(value))
    });
    AveragedRate { reaction: k, kind: RateKind::Expression(text), eval }
}

/// Classify `model` and assemble its limit on the slow time scale.
pub fn build_reduced_model(model: &Model, opts: &ReduceOptions) -> Result<ReducedModel> {
    let cls = classify(model)?;
    let basis = if cls.tiers.len() > 1 { conserved_basis(model, &cls)? } else { ConservedBasis::default() };
    let spatial = model.is_spatial();
    let case = match (spatial, cls.tiers.len()) {
        (true, 2) => Some(match opts.case {
            Some(c) => c,
            None => spatial_case_for(model, &cls)?.2,
        }),
        (true, 3) => return Err(Error::CaseUnavailable("spatial networks with three time scales".into())),
        _ => None,
    };
    let slow = cls.slow();
    let mut coordinates: Vec<ReducedCoordinate> = slow
        .species
        .iter()
        .map(|&i| ReducedCoordinate {
            name: if spatial { total_name(model, i) } else { var_name(model, i) },
            what: Coordinate::Species(i),
            discrete: model.network.species[i].is_discrete(),
        })
        .collect();
    coordinates.extend(basis.quantities.iter().enumerate().map(|(j, q)| ReducedCoordinate {
        name: conserved_name(j),
        what: Coordinate::Conserved(j),
        discrete: q.is_discrete(),
    }));
    let ns = slow.species.len();
    let mut reactions = Vec::new();
    let involved: std::collections::BTreeSet<usize> = slow.reactions.union(&basis.reactions).copied().collect();
    for k in involved {
        let mut change = Vec::new();
        if let Some(c) = slow.zeta.cols.iter().position(|&x| x == k) {
            change.extend((0..ns).filter(|&r| slow.zeta.data[r][c] != 0).map(|r| (r, slow.zeta.data[r][c])));
        }
        for (j, q) in basis.quantities.iter().enumerate() {
            if q.reactions.contains(&k) {
                change.push((ns + j, q.change(&model.network, k)));
            }
        }
        let jump = change.iter().any(|&(c, _)| coordinates[c].discrete);
        let rate = match (spatial, cls.tiers.len()) {
            (false, 1) => identity_rate(model, &cls, k),
            (true, 1) => averaged_rate_single_scale(model, &cls, k, &opts.averaging)?,
            (false, 2) => averaged_rate_two_scale(model, &cls, &basis, k, &opts.averaging)?,
            (false, _) => averaged_rate_three_scale(model, &cls, &basis, k, &opts.averaging)?,
            (true, _) => averaged_rate_spatial(model, &cls, &basis, case.expect("case set"), k, &opts.averaging)?,
        };
        reactions.push(ReducedReaction { reaction: k, change, jump, rate: Some(rate) });
    }
    let mut reduced = ReducedModel {
        model: Arc::new(model.clone()),
        classification: cls.clone(),
        basis,
        spatial_case: case,
        coordinates,
        reactions,
        initial: Vec::new(),
        warnings: cls.warnings.clone(),
    };
    reduced.initial = reduced.project(&model.initial_state()?.values);
    Ok(reduced)
}

/// Hybrid system of a reduced model: jumps for reactions that change counted
/// coordinates, flow terms for the others.
pub fn build_limit_system(reduced: &ReducedModel) -> Result<HybridSystem> {
    let mut sys = HybridSystem { labels: reduced.labels(), ..Default::default() };
    for r in &reduced.reactions {
        let avg = r.rate.clone().ok_or(Error::MissingRates { reaction: r.reaction })?;
        let rate: RateFn = Arc::new(move |v: &[f64]| Ok(avg.value(v)?.value.max(0.0)));
        let label = format!("R{}", r.reaction + 1);
        if r.jump {
            sys.jumps.push(JumpReaction { label, rate, jump: r.change.iter().map(|&(c, z)| (c, z as f64)).collect() });
        } else {
            sys.flows.push(FlowReaction { label, rate, drift: r.change.iter().map(|&(c, z)| (c, z as f64)).collect() });
        }
    }
    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_model;

    const GENE: &str = "\
species G alpha=0
species Gp alpha=0
species P alpha=1
G -> Gp @ mass_action(1) beta=0
Gp -> G @ mass_action(2) beta=0
Gp -> Gp + P @ mass_action(3) beta=1
P -> 0 @ mass_action(1) beta=1
init G 1
init Gp 0
init P 0
";

    #[test]
    fn gene_example_is_identity_reduction() {
        let m = parse_model(GENE).unwrap();
        let red = build_reduced_model(&m, &ReduceOptions::default()).unwrap();
        assert_eq!(red.labels(), ["vG", "vGp", "vP"]);
        let sys = build_limit_system(&red).unwrap();
        assert_eq!(sys.jumps.len(), 2);
        assert_eq!(sys.flows.len(), 2);
        assert_eq!(red.reactions[2].rate.as_ref().unwrap().kind.to_string(), "k3*vGp");
        assert_eq!(red.initial, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_scale_example_is_one_flow() {
        let text = "\
species A alpha=1
species B alpha=0
A + B -> 0 @ mass_action(1) beta=1
0 -> B @ mass_action(1) beta=1
B -> 0 @ mass_action(1) beta=1
init A 1
";
        let m = parse_model(text).unwrap();
        let red = build_reduced_model(&m, &ReduceOptions::default()).unwrap();
        assert_eq!(red.labels(), ["vA"]);
        assert_eq!(red.reactions.len(), 1);
        assert!(!red.reactions[0].jump);
        assert_eq!(red.reactions[0].change, vec![(0, -1)]);
        let sys = build_limit_system(&red).unwrap();
        assert!(sys.jumps.is_empty());
        let mut out = [0.0];
        sys.drift(&[1.0], &mut out).unwrap();
        assert!((out[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_rate_is_reported() {
        let m = parse_model(GENE).unwrap();
        let mut red = build_reduced_model(&m, &ReduceOptions::default()).unwrap();
        red.reactions[1].rate = None;
        assert!(matches!(build_limit_system(&red), Err(Error::MissingRates { reaction: 1 })));
    }
}
