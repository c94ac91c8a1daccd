//! Property tests of the structural invariants.

use proptest::prelude::*;

use mscrn::analysis::integer_null_space;
use mscrn::ensemble::replica_rng;
use mscrn::{classify, parse_model, product_measure, serialize_model, simulate, Error, SsaConfig, State};

/// Rank by fraction-free elimination over the integers.
fn rank(m: &[Vec<i64>], cols: usize) -> usize {
    let mut a: Vec<Vec<i128>> = m.iter().map(|r| r.iter().map(|&x| x as i128).collect()).collect();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..a.len()).find(|&i| a[i][c] != 0) else { continue };
        a.swap(r, p);
        for i in 0..a.len() {
            if i != r && a[i][c] != 0 {
                let (f, g) = (a[i][c], a[r][c]);
                for j in 0..cols {
                    a[i][j] = a[i][j] * g - a[r][j] * f;
                }
                let content = a[i].iter().fold(0i128, |acc, &x| num_gcd(acc, x.abs()));
                if content > 1 {
                    a[i].iter_mut().for_each(|x| *x /= content);
                }
            }
        }
        r += 1;
    }
    r
}

fn num_gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        num_gcd(b, a % b)
    }
}

fn matrix() -> impl Strategy<Value = (Vec<Vec<i64>>, usize)> {
    (1usize..5, 1usize..6).prop_flat_map(|(rows, cols)| {
        (prop::collection::vec(prop::collection::vec(-2i64..=2, cols), rows), Just(cols))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn null_space_basis_is_exact_primitive_and_complete((m, cols) in matrix()) {
        let basis = integer_null_space(&m, cols);
        prop_assert_eq!(basis.len(), cols - rank(&m, cols));
        for v in &basis {
            for row in &m {
                prop_assert_eq!(row.iter().zip(v).map(|(a, b)| a * b).sum::<i64>(), 0);
            }
            let content = v.iter().fold(0i128, |acc, &x| num_gcd(acc, (x as i128).abs()));
            prop_assert_eq!(content, 1);
            prop_assert!(*v.iter().find(|x| **x != 0).unwrap() > 0);
        }
        prop_assert_eq!(rank(&basis, cols), basis.len());
        prop_assert_eq!(integer_null_space(&m, cols), basis);
    }
}

#[derive(Debug, Clone)]
struct RandomReaction {
    reactants: Vec<u32>,
    products: Vec<u32>,
    kappa: Vec<u32>,
    beta: (i64, i64),
}

#[derive(Debug, Clone)]
struct RandomModel {
    alphas: Vec<(i64, i64)>,
    compartments: usize,
    reactions: Vec<RandomReaction>,
    moves: Vec<u32>,
    gamma: i64,
}

impl RandomModel {
    fn text(&self) -> String {
        let names: Vec<String> = (0..self.alphas.len()).map(|i| format!("S{i}")).collect();
        let mut out = String::new();
        for (name, (p, q)) in names.iter().zip(&self.alphas) {
            out += &format!("species {name} alpha={p}/{q}");
            if self.compartments > 1 {
                out += " eta=3/2";
            }
            out += "\n";
        }
        if self.compartments > 1 {
            out += &format!("compartments {}\n", (0..self.compartments).map(|d| format!("c{d}")).collect::<Vec<_>>().join(" "));
        }
        if self.gamma != 0 {
            out += &format!("gamma {}\n", self.gamma);
        }
        let side = |counts: &[u32]| {
            let terms: Vec<String> = counts
                .iter()
                .enumerate()
                .filter(|(_, c)| **c > 0)
                .map(|(i, c)| if *c == 1 { names[i].clone() } else { format!("{c} {}", names[i]) })
                .collect();
            if terms.is_empty() { "0".to_string() } else { terms.join(" + ") }
        };
        for r in &self.reactions {
            let kappa: Vec<String> = r.kappa.iter().take(self.compartments).map(|k| format!("{}", *k as f64 / 4.0)).collect();
            out += &format!(
                "{} -> {} @ mass_action({}) beta={}/{}",
                side(&r.reactants),
                side(&r.products),
                kappa.join(", "),
                r.beta.0,
                r.beta.1
            );
            if r.reactants == r.products {
                out += " catalytic";
            }
            out += "\n";
        }
        if self.compartments > 1 {
            for i in 0..self.alphas.len() {
                for d in 0..self.compartments {
                    let e = (d + 1) % self.compartments;
                    let rate = self.moves[(i * self.compartments + d) % self.moves.len()] as f64 / 2.0;
                    out += &format!("move {} from c{d} to c{e} rate {rate}\n", names[i]);
                }
            }
        }
        out
    }
}

fn random_model() -> impl Strategy<Value = RandomModel> {
    (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(ns, nr, dd)| {
        let reaction = (
            prop::collection::vec(0u32..3, ns),
            prop::collection::vec(0u32..3, ns),
            prop::collection::vec(1u32..40, dd),
            (0i64..4, 1i64..3),
        )
            .prop_map(|(reactants, products, kappa, beta)| RandomReaction { reactants, products, kappa, beta });
        (
            prop::collection::vec((0i64..3, 1i64..3), ns),
            Just(dd),
            prop::collection::vec(reaction, nr),
            prop::collection::vec(1u32..9, ns * dd),
            -1i64..2,
        )
            .prop_map(|(alphas, compartments, reactions, moves, gamma)| RandomModel {
                alphas,
                compartments,
                reactions,
                moves,
                gamma,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn serialization_round_trips(rm in random_model()) {
        let model = parse_model(&rm.text()).unwrap();
        let text = serialize_model(&model);
        prop_assert_eq!(parse_model(&text).unwrap(), model.clone());
        prop_assert_eq!(serialize_model(&parse_model(&text).unwrap()), text);
    }

    #[test]
    fn mass_action_vanishes_below_the_reactant_counts(
        nu in prop::collection::vec(0u32..4, 1..4),
        seed in any::<u64>(),
    ) {
        prop_assume!(nu.iter().any(|&n| n > 0));
        let names: Vec<String> = (0..nu.len()).map(|i| format!("S{i}")).collect();
        let mut text: String = names.iter().map(|n| format!("species {n} alpha=0\n")).collect();
        let lhs: Vec<String> = nu.iter().zip(&names).filter(|(n, _)| **n > 0).map(|(n, s)| format!("{n} {s}")).collect();
        text += &format!("{} -> 0 @ mass_action(1.5)\n", lhs.join(" + "));
        let model = parse_model(&text).unwrap();
        let short = (0..nu.len()).filter(|&i| nu[i] > 0).nth((seed % 7) as usize % nu.iter().filter(|&&n| n > 0).count()).unwrap();
        let x: Vec<f64> = nu
            .iter()
            .enumerate()
            .map(|(i, &n)| if i == short { ((seed >> 8) % u64::from(n)) as f64 } else { (n + (seed >> 16) as u32 % 3) as f64 })
            .collect();
        prop_assert_eq!(model.evaluate_rate(0, &State::raw(x), None).unwrap(), 0.0);
    }

    #[test]
    fn event_counts_replay_the_state_change(rm in random_model(), seed in any::<u64>()) {
        let mut rm = rm;
        rm.compartments = 1;
        rm.alphas.iter_mut().for_each(|a| *a = (0, 1));
        rm.reactions.iter_mut().for_each(|r| r.beta = (0, 1));
        rm.gamma = 0;
        let model = parse_model(&rm.text()).unwrap();
        let x0 = State::raw(vec![5.0; model.n_species()]);
        let cfg = SsaConfig { max_events: 20_000, record_events: true, ..SsaConfig::new(1.0, vec![0.0, 0.5]) };
        let traj = match simulate(&model, &x0, &cfg, &mut replica_rng(seed, 0)) {
            Err(Error::EventCapExceeded { .. }) => return Ok(()),
            other => other.unwrap(),
        };
        let z = model.network.stoichiometric_matrix();
        let last = traj.states.last().unwrap();
        for i in 0..model.n_species() {
            let net: i64 = (0..z.cols.len()).map(|k| z.data[i][k] * traj.event_counts[k] as i64).sum();
            prop_assert_eq!(last[i] - 5.0, net as f64);
        }
        prop_assert_eq!(traj.events.len() as u64, traj.event_counts.iter().sum::<u64>());
    }

    #[test]
    fn classification_ignores_time_shift_and_exponent_scale(
        which in 0usize..4,
        shift in -2i64..3,
        scale in prop::sample::select(vec![(1i64, 2i64), (2, 1), (3, 1), (5, 3)]),
    ) {
        let base = FIXTURES[which];
        let original = classify(&parse_model(&render(base, 0, (1, 1))).unwrap()).unwrap();
        let moved = classify(&parse_model(&render(base, shift, scale)).unwrap()).unwrap();
        prop_assert_eq!(moved.tiers.len(), original.tiers.len());
        for (a, b) in moved.tiers.iter().zip(&original.tiers) {
            prop_assert_eq!(&a.species, &b.species);
            prop_assert_eq!(&a.reactions, &b.reactions);
            prop_assert_eq!(&a.discrete_reactions, &b.discrete_reactions);
            prop_assert_eq!(&a.zeta, &b.zeta);
        }
        prop_assert_eq!(moved.class.name(), original.class.name());
    }

    #[test]
    fn product_measure_samples_keep_the_totals(
        rates in prop::collection::vec(1u32..9, 6),
        totals in prop::collection::vec(0u32..50, 2),
        seed in any::<u64>(),
    ) {
        let text = format!(
            "species X alpha=0 eta=2\nspecies Y alpha=0 eta=2\ncompartments a b c\n\
             move X from a to b rate {}\nmove X from b to c rate {}\nmove X from c to a rate {}\n\
             move Y from a to b rate {}\nmove Y from b to a rate {}\nmove Y from b to c rate {}\nmove Y from c to b rate 1\n",
            rates[0], rates[1], rates[2], rates[3], rates[4], rates[5]
        );
        let model = parse_model(&text).unwrap();
        let s: Vec<f64> = totals.iter().map(|&t| f64::from(t)).collect();
        let measure = product_measure(&model, &s).unwrap();
        let mut rng = replica_rng(seed, 0);
        for _ in 0..20 {
            let x = measure.sample(&mut rng);
            prop_assert_eq!(x[0] + x[1] + x[2], s[0]);
            prop_assert_eq!(x[3] + x[4] + x[5], s[1]);
            prop_assert!(x.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        }
    }
}

/// Models with exponent placeholders: `{a:p/q}` is an abundance exponent and
/// `{b:p/q}` a rate exponent.
const FIXTURES: [&str; 4] = [
    "species A alpha={a:1}\nspecies B alpha={a:0}\n\
     A + B -> 0 @ mass_action(1) beta={b:1}\n0 -> B @ mass_action(1) beta={b:1}\nB -> 0 @ mass_action(1) beta={b:1}\n",
    "species G alpha={a:0}\nspecies Gp alpha={a:0}\nspecies P alpha={a:1}\n\
     G + P -> Gp + P @ mass_action(1) beta={b:0}\nGp -> G @ mass_action(1) beta={b:0}\n\
     Gp -> Gp + P @ mass_action(2) beta={b:1}\nP -> 0 @ mass_action(1) beta={b:1}\n",
    "species G alpha={a:0}\nspecies Gp alpha={a:0}\nspecies P alpha={a:1}\n\
     G -> Gp @ mass_action(2) beta={b:1}\nGp -> G @ mass_action(1) beta={b:1}\n\
     Gp -> Gp + P @ mass_action(3) beta={b:1}\nP -> 0 @ mass_action(1) beta={b:1}\n",
    "species A alpha={a:1}\nspecies M alpha={a:0}\nspecies F alpha={a:0}\n\
     A + F -> F @ mass_action(1) beta={b:1}\n0 -> M @ mass_action(2) beta={b:1/2}\nM -> 0 @ mass_action(1) beta={b:1/2}\n\
     M -> M + F @ mass_action(3) beta={b:1}\nF -> 0 @ mass_action(2) beta={b:1}\n",
];

/// Replace the placeholders of `template` by `scale * e`, minus `shift` for rate
/// exponents, and declare `gamma shift`.
fn render(template: &str, shift: i64, scale: (i64, i64)) -> String {
    let mut out = format!("gamma {shift}\n");
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out += &rest[..start];
        let end = start + rest[start..].find('}').unwrap();
        let (kind, value) = rest[start + 1..end].split_once(':').unwrap();
        let (p, q): (i64, i64) = match value.split_once('/') {
            Some((p, q)) => (p.parse().unwrap(), q.parse().unwrap()),
            None => (value.parse().unwrap(), 1),
        };
        let (mut num, den) = (p * scale.0, q * scale.1);
        if kind == "b" {
            num -= shift * den;
        }
        out += &format!("{num}/{den}");
        rest = &rest[end + 1..];
    }
    out + rest
}
