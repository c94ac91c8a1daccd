//! Command line front end.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mscrn::ensemble::{run_ensemble, EnsembleStats, Observable};
use mscrn::model::{format_exponent, IntMatrix};
use mscrn::{
    build_limit_system, build_reduced_model, classify, conserved_basis, parse_model, serialize_reduced,
    simulate_pdmp, spatial_case_for, verify_convergence, AveragingOptions, Error, McConfig, Model, Mode,
    OdeConfig, ReduceOptions, SsaConfig, Trajectory, VerifyOptions,
};

#[derive(Parser, Debug)]
#[command(name = "mscrn", version, about = "Scaling limits of multiscale reaction networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Number of independent replicas.
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Recording times: `t1,t2,...` or `start:stop:step`.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Event budget of each Monte Carlo stationary estimate.
    #[arg(long, global = true)]
    budget: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify time scales and print partitions, matrices and conserved quantities.
    Analyze { model: PathBuf },
    /// Simulate the finite-N process or the reduced limit.
    Simulate {
        model: PathBuf,
        /// `ssa` simulates the model at size N, `pdmp` simulates its reduced limit.
        #[arg(long, value_enum, default_value_t = Engine::Ssa)]
        engine: Engine,
        /// System size of the finite-N process.
        #[arg(long = "N", default_value_t = 100.0)]
        n: f64,
    },
    /// Print the reduced model.
    Reduce {
        model: PathBuf,
        /// Averaging case 1-4 instead of the one given by the movement exponents.
        #[arg(long)]
        case: Option<u8>,
    },
    /// Tabulate averaged rates at reduced states `x1,x2;y1,y2;...` (default: initial state).
    AvgRates {
        model: PathBuf,
        /// Reduced states separated by `;`, coordinates separated by `,`.
        #[arg(long)]
        at: Option<String>,
        /// Closed forms only, simulation only, or closed forms where available.
        #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
        mode: ModeArg,
        /// Averaging case 1-4 instead of the one given by the movement exponents.
        #[arg(long)]
        case: Option<u8>,
    },
    /// Compare finite-N ensembles with the reduced limit.
    Verify {
        model: PathBuf,
        /// System sizes `n1,n2,...`.
        #[arg(long = "N", default_value = "10,100,1000")]
        n: String,
        /// Largest normalized error accepted at the largest system size.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Format {
    Csv,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Engine {
    Ssa,
    Pdmp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ModeArg {
    Analytic,
    Montecarlo,
    Auto,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

enum Failure {
    Usage(String),
    Lib(Error),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn parse_list(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("invalid number '{s}'"))))
        .collect()
}

fn parse_grid(text: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| usage(format!("invalid grid '{text}'")));
            let (a, b, h) = (num(start)?, num(stop)?, num(step)?);
            if h <= 0.0 || b < a {
                return Err(usage(format!("invalid grid '{text}'")));
            }
            let n = ((b - a) / h + 1e-9).floor() as usize;
            Ok((0..=n).map(|j| a + j as f64 * h).collect())
        }
        [_] => parse_list(text),
        _ => Err(usage(format!("invalid grid '{text}'"))),
    }
}

fn parse_case(case: Option<u8>) -> Result<Option<mscrn::SpatialCase>, Failure> {
    use mscrn::SpatialCase::*;
    Ok(match case {
        None => None,
        Some(1) => Some(Case1),
        Some(2) => Some(Case2),
        Some(3) => Some(Case3),
        Some(4) => Some(Case4),
        Some(c) => return Err(usage(format!("case must be 1-4, got {c}"))),
    })
}

fn load(path: &PathBuf) -> Result<Model, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    Ok(parse_model(&text)?)
}

fn averaging(cli: &Cli, mode: Mode) -> AveragingOptions {
    let mut mc = McConfig { seed: cli.seed, ..McConfig::default() };
    if let Some(b) = cli.budget {
        mc.budget = b;
    }
    AveragingOptions { mode, mc }
}

fn matrix_json(m: &IntMatrix, row_name: &dyn Fn(usize) -> String) -> Value {
    json!({
        "rows": m.rows.iter().map(|&r| row_name(r)).collect::<Vec<_>>(),
        "columns": m.cols.iter().map(|&k| k + 1).collect::<Vec<_>>(),
        "data": m.data,
    })
}

fn analyze(model: &Model) -> Result<Value, Failure> {
    let cls = classify(model)?;
    let name = |i: usize| model.network.species[i].name.clone();
    let names = |v: &[usize]| v.iter().map(|&i| name(i)).collect::<Vec<_>>();
    let one_based = |s: &std::collections::BTreeSet<usize>| s.iter().map(|k| k + 1).collect::<Vec<_>>();
    let tier_names: &[&str] = match cls.tiers.len() {
        1 => &["single"],
        2 => &["slow", "fast"],
        _ => &["slow", "middle", "fast"],
    };
    let tiers: Vec<Value> = cls
        .tiers
        .iter()
        .zip(tier_names)
        .map(|(t, label)| {
            let discrete: Vec<usize> = t.species.iter().copied().filter(|&i| model.network.species[i].is_discrete()).collect();
            let continuous: Vec<usize> = t.species.iter().copied().filter(|&i| !model.network.species[i].is_discrete()).collect();
            json!({
                "tier": label,
                "gap": format_exponent(t.gap),
                "species": names(&t.species),
                "discrete_species": names(&discrete),
                "continuous_species": names(&continuous),
                "reactions": one_based(&t.reactions),
                "discrete_reactions": one_based(&t.discrete_reactions),
                "continuous_reactions": one_based(&t.continuous_reactions),
                "zeta": matrix_json(&t.zeta, &name),
            })
        })
        .collect();
    let class = match &cls.class {
        mscrn::ScaleClass::SingleScale => json!({"name": "single-scale"}),
        mscrn::ScaleClass::TwoScale { epsilon } => json!({"name": "two-scale", "epsilon": format_exponent(*epsilon)}),
        mscrn::ScaleClass::ThreeScale { epsilon1, epsilon2 } => json!({
            "name": "three-scale",
            "epsilon1": format_exponent(*epsilon1),
            "epsilon2": format_exponent(*epsilon2),
        }),
    };
    let mut out = json!({
        "class": class,
        "tiers": tiers,
        "dropped": names(&cls.dropped),
        "warnings": cls.warnings,
        "stoichiometry": matrix_json(&model.network.stoichiometric_matrix(), &name),
    });
    if cls.tiers.len() > 1 {
        let basis = conserved_basis(model, &cls)?;
        out["conserved"] = json!({
            "quantities": basis.quantities.iter().map(|q| json!({
                "theta": q.theta.iter().map(|&(i, t)| json!([name(i), t])).collect::<Vec<_>>(),
                "alpha": format_exponent(q.alpha),
                "reactions": one_based(&q.reactions),
            })).collect::<Vec<_>>(),
            "reactions": one_based(&basis.reactions),
            "zeta": basis.zeta.as_ref().map(|z| matrix_json(z, &|j| format!("c{}", j + 1))),
        });
        if model.is_spatial() {
            out["spatial_case"] = match spatial_case_for(model, &cls) {
                Ok((eta_f, eta_s, case)) => json!({
                    "case": case.number(),
                    "eta_f": format_exponent(eta_f),
                    "eta_s": format_exponent(eta_s),
                }),
                Err(e) => json!({"error": e.to_string()}),
            };
        }
    }
    Ok(out)
}

fn stats_csv(stats: &EnsembleStats) -> String {
    let mut out = String::from("time,observable,mean,variance,std_error,q05,q50,q95\n");
    for (t, time) in stats.times.iter().enumerate() {
        for (o, label) in stats.labels.iter().enumerate() {
            let q = stats.quantiles[o][t];
            let _ = writeln!(
                out,
                "{time},{label},{},{},{},{},{},{}",
                stats.mean[o][t], stats.variance[o][t], stats.std_error[o][t], q[0], q[1], q[2]
            );
        }
    }
    out
}

fn trajectory_csv(traj: &Trajectory, species: &[String]) -> String {
    let mut header = vec!["time".to_string()];
    header.extend(traj.labels.iter().cloned());
    if traj.totals.is_some() {
        header.extend(species.iter().map(|s| format!("S_{s}")));
    }
    let mut out = header.join(",") + "\n";
    for t in 0..traj.times.len() {
        let mut row = vec![traj.times[t].to_string()];
        row.extend(traj.states[t].iter().map(|x| x.to_string()));
        if let Some(totals) = &traj.totals {
            row.extend(totals[t].iter().map(|x| x.to_string()));
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

fn simulate(cli: &Cli, model: &Model, engine: Engine, n: f64) -> Result<String, Failure> {
    let grid = match &cli.grid {
        Some(g) => parse_grid(g)?,
        None => (0..=10).map(|j| j as f64 * 0.1).collect(),
    };
    let t_end = grid.iter().copied().fold(0.0, f64::max);
    let replicas = cli.replicas.unwrap_or(1);
    let species: Vec<String> = model.network.species.iter().map(|s| s.name.clone()).collect();
    let (labels, run): (Vec<String>, Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> mscrn::Result<Trajectory> + Sync>) =
        match engine {
            Engine::Ssa => {
                let x0 = model.initial_state()?;
                let cfg = SsaConfig::new(n, grid.clone());
                let m = model.clone();
                (model.state_labels(), Box::new(move |rng| {
                    if m.is_spatial() {
                        mscrn::simulate_spatial(&m, &x0, &cfg, rng)
                    } else {
                        mscrn::simulate(&m, &x0, &cfg, rng)
                    }
                }))
            }
            Engine::Pdmp => {
                let opts = ReduceOptions { averaging: averaging(cli, Mode::Auto), case: None };
                let reduced = build_reduced_model(model, &opts)?;
                let sys = build_limit_system(&reduced)?;
                let v0 = reduced.initial.clone();
                let g = grid.clone();
                (reduced.labels(), Box::new(move |rng| simulate_pdmp(&sys, &v0, t_end, &g, &OdeConfig::default(), rng)))
            }
        };
    if replicas == 1 {
        let traj = run(&mut mscrn::ensemble::replica_rng(cli.seed, 0))?;
        return Ok(match cli.format {
            Format::Csv => trajectory_csv(&traj, &species),
            Format::Json => serde_json::to_string_pretty(&traj).expect("serializable"),
        });
    }
    let observables: Vec<Observable> = labels.iter().enumerate().map(|(j, l)| Observable::coordinate(l, j)).collect();
    let stats = run_ensemble(replicas, cli.seed, &observables, |rng| run(rng))?;
    Ok(match cli.format {
        Format::Csv => stats_csv(&stats),
        Format::Json => serde_json::to_string_pretty(&stats).expect("serializable"),
    })
}

fn avg_rates(cli: &Cli, model: &Model, at: Option<&str>, mode: ModeArg, case: Option<u8>) -> Result<String, Failure> {
    let mode = match mode {
        ModeArg::Analytic => Mode::Analytic,
        ModeArg::Montecarlo => Mode::MonteCarlo,
        ModeArg::Auto => Mode::Auto,
    };
    let opts = ReduceOptions { averaging: averaging(cli, mode), case: parse_case(case)? };
    let reduced = build_reduced_model(model, &opts)?;
    let points: Vec<Vec<f64>> = match at {
        Some(text) => text.split(';').map(parse_list).collect::<Result<_, _>>()?,
        None => vec![reduced.initial.clone()],
    };
    let labels = reduced.labels();
    if let Some(p) = points.iter().find(|p| p.len() != labels.len()) {
        return Err(usage(format!("point {p:?} needs {} coordinates ({})", labels.len(), labels.join(", "))));
    }
    let mut rows = Vec::new();
    for r in &reduced.reactions {
        let rate = r.rate.as_ref().ok_or(Error::MissingRates { reaction: r.reaction })?;
        for p in &points {
            let e = rate.value(p)?;
            rows.push((r.reaction + 1, rate.kind.to_string(), p.clone(), e));
        }
    }
    Ok(match cli.format {
        Format::Csv => {
            let mut out = format!("reaction,kind,{},value,std_error\n", labels.join(","));
            for (k, kind, p, e) in rows {
                let coords: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(out, "R{k},\"{kind}\",{},{},{}", coords.join(","), e.value, e.se);
            }
            out
        }
        Format::Json => serde_json::to_string_pretty(&json!({
            "coordinates": labels,
            "rates": rows.iter().map(|(k, kind, p, e)| json!({
                "reaction": k, "kind": kind, "at": p, "value": e.value, "std_error": e.se,
            })).collect::<Vec<_>>(),
        }))
        .expect("serializable"),
    })
}

fn write_out(cli: &Cli, text: &str) -> Result<(), Failure> {
    match &cli.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            let tail = if text.ends_with('\n') { "" } else { "\n" };
            match write!(stdout, "{text}{tail}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Io(e.to_string())),
                _ => Ok(()),
            }
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Analyze { model } => {
            let m = load(model)?;
            write_out(cli, &serde_json::to_string_pretty(&analyze(&m)?).expect("serializable"))
        }
        Command::Simulate { model, engine, n } => {
            let m = load(model)?;
            let text = simulate(cli, &m, *engine, *n)?;
            write_out(cli, &text)
        }
        Command::Reduce { model, case } => {
            let m = load(model)?;
            let opts = ReduceOptions { averaging: averaging(cli, Mode::Auto), case: parse_case(*case)? };
            write_out(cli, &serialize_reduced(&build_reduced_model(&m, &opts)?))
        }
        Command::AvgRates { model, at, mode, case } => {
            let m = load(model)?;
            let text = avg_rates(cli, &m, at.as_deref(), *mode, *case)?;
            write_out(cli, &text)
        }
        Command::Verify { model, n, tolerance } => {
            let m = load(model)?;
            let mut opts = VerifyOptions {
                n_grid: parse_list(n)?,
                seed: cli.seed,
                tolerance: *tolerance,
                ..VerifyOptions::default()
            };
            if let Some(r) = cli.replicas {
                opts.replicas = r;
            }
            if let Some(g) = &cli.grid {
                opts.times = parse_grid(g)?;
            }
            opts.reduce.averaging = averaging(cli, Mode::Auto);
            let report = verify_convergence(&m, &opts)?;
            let json = serde_json::to_string_pretty(&report).expect("serializable");
            match (&cli.out, cli.format) {
                (Some(path), _) => {
                    std::fs::write(path, &json).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                    let csv = path.with_extension("csv");
                    std::fs::write(&csv, report.to_csv()).map_err(|e| Failure::Io(format!("{}: {e}", csv.display())))
                }
                (None, Format::Json) => write_out(cli, &json),
                (None, Format::Csv) => write_out(cli, &report.to_csv()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
