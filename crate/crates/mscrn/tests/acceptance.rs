//! Acceptance criteria. Each test prints one PASS/FAIL line and then asserts it.

mod common;

use std::io::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{
    binomial_pmf, chi2_critical_1pct, chi2_statistic, fixture, ks_critical_1pct, ks_statistic, mean_se,
};
use mscrn::ensemble::replica_rng;
use mscrn::pdmp::{FlowReaction, JumpReaction};
use mscrn::ssa::Channels;
use mscrn::{
    averaged_rate_spatial, averaged_rate_two_scale, build_limit_system, build_reduced_model, classify,
    conserved_basis, parse_model, product_measure, run_pdmp, simulate_conditional_fast, simulate_pdmp,
    simulate_spatial, verify_convergence, AveragingOptions, HybridSystem, McConfig, Mode, Model, OdeConfig,
    PdmpOptions, ReduceOptions, SpatialCase, SsaConfig, VerifyOptions,
};

const TWO_SCALE: &str = "\
species A alpha=1
species B alpha=0
A + B -> 0 @ mass_action(1) beta=1
0 -> B @ mass_action(1) beta=1
B -> 0 @ mass_action(1) beta=1
init A 1
";

/// Print the verdict outside the test harness capture and fail the test on FAIL.
fn report(id: u32, name: &str, ok: bool, limit: Duration, start: Instant, detail: String) {
    let elapsed = start.elapsed();
    let passed = ok && elapsed <= limit;
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {id} {name}: {verdict} ({detail}; {:.2} s of {:.0} s)\n",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(passed, "{line}");
}

fn names(m: &Model, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| m.network.species[i].name.clone()).collect()
}

fn set(v: &[usize]) -> std::collections::BTreeSet<usize> {
    v.iter().copied().collect()
}

#[test]
fn criterion_1_classification_goldens() {
    let start = Instant::now();
    let mut failures = Vec::new();

    let gene = fixture("gene.mscrn");
    let cls = classify(&gene).unwrap();
    let tier = &cls.tiers[0];
    let discrete: Vec<usize> = tier.species.iter().copied().filter(|&i| gene.network.species[i].is_discrete()).collect();
    let continuous: Vec<usize> = tier.species.iter().copied().filter(|&i| !gene.network.species[i].is_discrete()).collect();
    let zeta = gene.network.stoichiometric_matrix();
    let checks = [
        ("gene class", cls.class.name() == "single-scale"),
        ("gene discrete species", names(&gene, &discrete) == ["G", "Gp"]),
        ("gene continuous species", names(&gene, &continuous) == ["P"]),
        ("gene discrete reactions", tier.discrete_reactions == set(&[0, 1])),
        ("gene continuous reactions", tier.continuous_reactions == set(&[2, 3])),
        ("gene limiting stoichiometry", tier.zeta.cols == [0, 1, 2, 3] && tier.zeta.data == zeta.data),
    ];
    failures.extend(checks.iter().filter(|c| !c.1).map(|c| c.0));

    let ab = parse_model(TWO_SCALE).unwrap();
    let cls = classify(&ab).unwrap();
    let basis = conserved_basis(&ab, &cls).unwrap();
    let (slow, fast) = (cls.slow(), cls.fast().unwrap());
    let checks = [
        ("two-scale class", cls.class.name() == "two-scale"),
        ("fast species", names(&ab, &fast.species) == ["B"]),
        ("slow species", names(&ab, &slow.species) == ["A"]),
        ("fast reactions", fast.reactions == set(&[0, 1, 2])),
        ("slow reactions", slow.reactions == set(&[0])),
        ("fast stoichiometry", fast.zeta.cols == [0, 1, 2] && fast.zeta.data == vec![vec![-1, 1, -1]]),
        ("empty conserved basis", basis.is_empty()),
    ];
    failures.extend(checks.iter().filter(|c| !c.1).map(|c| c.0));

    let detail = if failures.is_empty() { "all goldens match".to_string() } else { format!("mismatch: {failures:?}") };
    report(1, "classification goldens", failures.is_empty(), Duration::from_secs(1), start, detail);
}

#[test]
fn criterion_2_averaged_rate_oracle() {
    let start = Instant::now();
    let m = parse_model(TWO_SCALE).unwrap();
    let cls = classify(&m).unwrap();
    let basis = conserved_basis(&m, &cls).unwrap();
    let analytic_opts = AveragingOptions { mode: Mode::Analytic, ..Default::default() };
    let exact = averaged_rate_two_scale(&m, &cls, &basis, 0, &analytic_opts).unwrap().value(&[1.0]).unwrap();
    let mc_opts = AveragingOptions { mode: Mode::MonteCarlo, mc: McConfig { budget: 1_000_000, ..Default::default() } };
    let mc = averaged_rate_two_scale(&m, &cls, &basis, 0, &mc_opts).unwrap().value(&[1.0]).unwrap();
    let ok = exact.value == 0.5 && exact.se == 0.0 && (mc.value - 0.5).abs() <= 3.0 * mc.se;
    let detail = format!("analytic {}, Monte Carlo {:.5} +- {:.5}", exact.value, mc.value, mc.se);
    report(2, "averaged-rate oracle", ok, Duration::from_secs(30), start, detail);
}

/// Closed forms of the averaged rate of `A + B -> 0` on the two-compartment fixture.
fn spatial_oracle(s: f64) -> (f64, f64) {
    let (pa, pb) = ([2.0 / 3.0, 1.0 / 3.0], [0.5, 0.5]);
    let (k1, k2, k3) = ([1.0, 2.0], [1.0, 3.0], [2.0, 1.0]);
    let kb1: f64 = (0..2).map(|d| k1[d] * pa[d] * pb[d]).sum();
    let kb2: f64 = k2.iter().sum();
    let kb3: f64 = (0..2).map(|d| k3[d] * pb[d]).sum();
    let mixed = kb1 * kb2 * s / (kb3 + kb1 * s);
    let local = (0..2).map(|d| k1[d] * k2[d] * pa[d] * s / (k3[d] + k1[d] * pa[d] * s)).sum();
    (mixed, local)
}

const CASES: [SpatialCase; 4] = [SpatialCase::Case1, SpatialCase::Case2, SpatialCase::Case3, SpatialCase::Case4];

fn spatial_rates(m: &Model, k: usize, opts: &AveragingOptions, s: f64) -> Vec<mscrn::Estimate> {
    let cls = classify(m).unwrap();
    let basis = conserved_basis(m, &cls).unwrap();
    CASES.iter().map(|&case| averaged_rate_spatial(m, &cls, &basis, case, k, opts).unwrap().value(&[s]).unwrap()).collect()
}

#[test]
fn criterion_3_spatial_case_formulas() {
    let start = Instant::now();
    let analytic = AveragingOptions { mode: Mode::Analytic, ..Default::default() };
    let m = fixture("ab_spatial.mscrn");
    let mut worst: f64 = 0.0;
    let mut pairs_equal = true;
    for s in [0.25, 1.0, 4.0] {
        let (mixed, local) = spatial_oracle(s);
        let r: Vec<f64> = spatial_rates(&m, 0, &analytic, s).iter().map(|e| e.value).collect();
        for (v, want) in r.iter().zip([mixed, mixed, local, local]) {
            worst = worst.max((v - want).abs() / want);
        }
        pairs_equal &= r[0] == r[1] && r[2] == r[3];
    }
    let homogeneous = fixture("ab_homogeneous.mscrn");
    let mut spread: f64 = 0.0;
    for s in [0.25, 1.0, 4.0] {
        let r: Vec<f64> = spatial_rates(&homogeneous, 0, &analytic, s).iter().map(|e| e.value).collect();
        let want = s / (1.0 + s);
        spread = r.iter().fold(spread, |acc, v| acc.max((v - want).abs() / want));
    }
    let ok = worst <= 1e-12 && pairs_equal && spread <= 1e-12;
    let detail = format!(
        "largest relative error {worst:.1e}, case pairs equal {pairs_equal}, homogeneous spread {spread:.1e}"
    );
    report(3, "spatial case formulas", ok, Duration::from_secs(10), start, detail);
}

fn rescale_fast_movement(factor: u32) -> Model {
    let text = std::fs::read_to_string(common::fixture_path("ab_spatial.mscrn")).unwrap();
    let text = text
        .replace("move B from c1 to c2 rate 1", &format!("move B from c1 to c2 rate {factor}"))
        .replace("move B from c2 to c1 rate 1", &format!("move B from c2 to c1 rate {factor}"));
    parse_model(&text).unwrap()
}

#[test]
fn criterion_4_movement_rescaling_invariance() {
    let start = Instant::now();
    let base = fixture("ab_spatial.mscrn");
    let scaled = rescale_fast_movement(7);
    let analytic = AveragingOptions { mode: Mode::Analytic, ..Default::default() };
    let mut exact_equal = true;
    for s in [0.5, 2.0] {
        let a = spatial_rates(&base, 0, &analytic, s);
        let b = spatial_rates(&scaled, 0, &analytic, s);
        exact_equal &= a[2].value == b[2].value && a[3].value == b[3].value;
    }
    let mc = AveragingOptions { mode: Mode::MonteCarlo, mc: McConfig { budget: 100_000, ..Default::default() } };
    let mc_other = AveragingOptions { mc: McConfig { seed: 1, ..mc.mc.clone() }, ..mc.clone() };
    let cls_a = classify(&base).unwrap();
    let cls_b = classify(&scaled).unwrap();
    let basis_a = conserved_basis(&base, &cls_a).unwrap();
    let basis_b = conserved_basis(&scaled, &cls_b).unwrap();
    let mut worst_z: f64 = 0.0;
    for case in [SpatialCase::Case3, SpatialCase::Case4] {
        let a = averaged_rate_spatial(&base, &cls_a, &basis_a, case, 0, &mc).unwrap().value(&[1.0]).unwrap();
        let b = averaged_rate_spatial(&scaled, &cls_b, &basis_b, case, 0, &mc_other).unwrap().value(&[1.0]).unwrap();
        worst_z = worst_z.max((a.value - b.value).abs() / a.se.hypot(b.se));
    }
    let ok = exact_equal && worst_z <= 3.0;
    let detail = format!("analytic rates identical {exact_equal}, largest Monte Carlo z {worst_z:.2}");
    report(4, "movement-rescaling invariance", ok, Duration::from_secs(60), start, detail);
}

#[test]
fn criterion_5_convergence_harness() {
    let start = Instant::now();
    let opts = VerifyOptions::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["ab.mscrn", "gene.mscrn"] {
        let r = verify_convergence(&fixture(name), &opts).unwrap();
        let last = *r.errors.last().unwrap();
        ok &= r.passed() && last <= 0.05 && r.trend == mscrn::verify::Trend::Decreasing;
        parts.push(format!("{name} errors {:?} trend {:?}", r.errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>(), r.trend));
    }
    report(5, "convergence harness", ok, Duration::from_secs(300), start, parts.join(", "));
}

fn three_compartment_model() -> Model {
    // detailed balance gives pi = (1/4, 1/2, 1/4)
    parse_model(
        "\
species X alpha=0 eta=1/2
compartments a b c
move X from a to b rate 2
move X from b to a rate 1
move X from b to c rate 1
move X from c to b rate 2
init X in a 20
",
    )
    .unwrap()
}

/// Time-averaged occupancy fractions over roughly `events` movement events, with
/// standard errors from batch means.
fn occupancy(m: &Model, count: f64, rate_per_particle: f64, events: f64, seed: u64) -> Vec<(f64, f64)> {
    let t_end = events / (count * rate_per_particle);
    let grid: Vec<f64> = (1..=2000).map(|i| t_end * i as f64 / 2000.0).collect();
    let cfg = SsaConfig::new(1.0, grid);
    let traj = simulate_spatial(m, &m.initial_state().unwrap(), &cfg, &mut replica_rng(seed, 0)).unwrap();
    let dd = m.n_compartments();
    (0..dd)
        .map(|d| {
            let xs: Vec<f64> = traj.states.iter().skip(200).map(|s| s[d] / count).collect();
            let batches: Vec<f64> = xs.chunks(xs.len() / 30).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
            mean_se(&batches)
        })
        .collect()
}

#[test]
fn criterion_6_movement_equilibrium_suite() {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();

    let two = fixture("movement.mscrn");
    let tri = three_compartment_model();
    for (m, count, rate, pi) in [
        (&two, 1000.0, 4.0 / 3.0, vec![2.0 / 3.0, 1.0 / 3.0]),
        (&tri, 20.0, 1.5, vec![0.25, 0.5, 0.25]),
    ] {
        let occ = occupancy(m, count, rate, 1e5, 3);
        let worst = occ.iter().zip(&pi).map(|(&(f, se), p)| (f - p).abs() / se).fold(0.0, f64::max);
        ok &= worst <= 3.0;
        parts.push(format!("{} compartments largest z {worst:.2}", pi.len()));
    }

    // marginals of end states and of product-measure samples against binomial laws
    let n_tot = 20u64;
    let pi = [0.25, 0.5, 0.25];
    let cfg = SsaConfig::new(1.0, vec![10.0]);
    let x0 = tri.initial_state().unwrap();
    let ends: Vec<Vec<f64>> = (0..4000)
        .map(|r| simulate_spatial(&tri, &x0, &cfg, &mut replica_rng(5, r)).unwrap().states[0].clone())
        .collect();
    let measure = product_measure(&tri, &[n_tot as f64]).unwrap();
    let mut rng = replica_rng(6, 0);
    let samples: Vec<Vec<f64>> = (0..4000).map(|_| measure.sample(&mut rng)).collect();
    let mut worst_ratio: f64 = 0.0;
    for data in [&ends, &samples] {
        for (d, &p) in pi.iter().enumerate() {
            let mut observed = vec![0u64; n_tot as usize + 1];
            for s in data.iter() {
                observed[s[d] as usize] += 1;
            }
            let probs: Vec<f64> = (0..=n_tot).map(|k| binomial_pmf(n_tot, p, k)).collect();
            let (stat, df) = chi2_statistic(&observed, &probs);
            worst_ratio = worst_ratio.max(stat / chi2_critical_1pct(df));
        }
    }
    ok &= worst_ratio <= 1.0;
    parts.push(format!("largest chi-square over its 1% critical value {worst_ratio:.2}"));
    report(6, "movement equilibrium suite", ok, Duration::from_secs(60), start, parts.join(", "));
}

#[test]
fn criterion_7_pdmp_correctness() {
    let start = Instant::now();
    let mut parts = Vec::new();

    // gene limit with Gp -> G switched off and Gp = 1: dP/dt = 2 - P
    let text = std::fs::read_to_string(common::fixture_path("gene.mscrn"))
        .unwrap()
        .replace("Gp -> G @ mass_action(1)", "Gp -> G @ mass_action(0)")
        .replace("init G 1", "init G 0")
        .replace("init Gp 0", "init Gp 1")
        .replace("init P 0.5", "init P 0");
    let red = build_reduced_model(&parse_model(&text).unwrap(), &ReduceOptions::default()).unwrap();
    let sys = build_limit_system(&red).unwrap();
    let ode = OdeConfig::default();
    let grid = [0.25, 0.5, 1.0];
    let traj = simulate_pdmp(&sys, &red.initial, 1.0, &grid, &ode, &mut replica_rng(0, 0)).unwrap();
    let p = red.labels().iter().position(|l| l == "vP").unwrap();
    let mut ode_ok = traj.event_counts.iter().all(|&c| c == 0);
    let mut worst: f64 = 0.0;
    for (state, &t) in traj.states.iter().zip(&grid) {
        let exact = 2.0 * (1.0 - (-t).exp());
        let tol = 10.0 * (ode.rtol * exact + ode.atol);
        worst = worst.max((state[p] - exact).abs() / tol);
    }
    ode_ok &= worst <= 1.0;
    parts.push(format!("ODE error {worst:.2} of the allowed 10x tolerance"));

    // constant jump rate 3, with and without a concurrent flow
    let jump = JumpReaction { label: "tick".into(), rate: Arc::new(|_| Ok(3.0)), jump: vec![(0, 1.0)] };
    let flow = FlowReaction { label: "decay".into(), rate: Arc::new(|v: &[f64]| Ok(v[1])), drift: vec![(1, -1.0)] };
    let pure = HybridSystem { labels: vec!["n".into(), "y".into()], jumps: vec![jump.clone()], flows: vec![] };
    let hybrid = HybridSystem { flows: vec![flow], ..pure.clone() };
    let mut ks_ok = true;
    for (label, s) in [("pure jump", &pure), ("hybrid", &hybrid)] {
        let opts = PdmpOptions {
            t_end: f64::INFINITY,
            stop_after_jumps: Some(10_000),
            record_events: true,
            ..Default::default()
        };
        let run = run_pdmp(s, &[0.0, 1.0], &opts, &mut replica_rng(7, 0)).unwrap();
        let times: Vec<f64> = run.trajectory.events.iter().map(|e| e.0).collect();
        let gaps: Vec<f64> = std::iter::once(times[0]).chain(times.windows(2).map(|w| w[1] - w[0])).collect();
        let d = ks_statistic(&gaps, |x| 1.0 - (-3.0 * x).exp());
        let crit = ks_critical_1pct(gaps.len());
        ks_ok &= gaps.len() == 10_000 && d <= crit;
        parts.push(format!("{label} KS {d:.4} against {crit:.4}"));
    }
    report(7, "PDMP correctness", ode_ok && ks_ok, Duration::from_secs(60), start, parts.join(", "));
}

#[test]
fn criterion_8_conservation() {
    let start = Instant::now();
    let mut parts = Vec::new();

    let m = fixture("activation.mscrn");
    let cls = classify(&m).unwrap();
    let basis = conserved_basis(&m, &cls).unwrap();
    let q = &basis.quantities[0];
    let grid: Vec<f64> = (1..=5000).map(|i| i as f64 * 0.01).collect();
    let traj = simulate_conditional_fast(&m, &cls, &[3.0, 0.0, 1.0], &[3.0, 0.0], 50.0, &grid, 1).unwrap();
    let fast = &cls.fast().unwrap().species;
    let value = |fast_state: &[f64]| {
        let mut full = vec![0.0; m.n_species()];
        for (j, &i) in fast.iter().enumerate() {
            full[i] = fast_state[j];
        }
        q.value(&full)
    };
    let jumps: u64 = traj.event_counts.iter().sum();
    let conserved_ok = jumps > 0 && traj.states.iter().all(|s| value(s) == 3.0);
    parts.push(format!("activation sum constant over {jumps} jumps: {conserved_ok}"));

    let mv = fixture("movement.mscrn");
    let x0 = mv.initial_state().unwrap();
    let mut cfg = SsaConfig::new(1.0, (1..=200).map(|i| i as f64 * 0.1).collect());
    cfg.record_events = true;
    let traj = simulate_spatial(&mv, &x0, &cfg, &mut replica_rng(2, 0)).unwrap();
    let totals_ok = traj.totals.as_ref().unwrap().iter().all(|t| t[0] == 1000.0);
    let channels = Channels::new(&mv, 1.0).unwrap();
    let mut x = x0.values.clone();
    let mut replay_ok = true;
    for &(_, c) in &traj.events {
        for &(i, z) in channels.change(c) {
            x[i] += z as f64;
        }
        replay_ok &= x.iter().sum::<f64>() == 1000.0 && x.iter().all(|&v| v >= 0.0);
    }
    replay_ok &= x == *traj.states.last().unwrap();
    parts.push(format!("movement totals constant over {} logged events: {}", traj.events.len(), totals_ok && replay_ok));
    report(8, "conservation", conserved_ok && totals_ok && replay_ok, Duration::from_secs(60), start, parts.join(", "));
}

