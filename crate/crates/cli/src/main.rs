//! Command-line front end for the evacuation scenario and its experiments.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use thiserror::Error;
use wassinc::evac::{build_problem, probe_system, EvacConfig};
use wassinc::inclusion::{gronwall_bounds, SolveOptions};
use wassinc::io::{aux_to_csv, bundle_to_csv, fmt_f64, measure_to_csv, read_measure, schedule_to_csv};
use wassinc::mayer::{check_admissibility, evaluate_bundle, simulate_decision, solve_mayer, MayerProblem};
use wassinc::measures::support_radius;
use wassinc::relaxation::{relaxation_gap, value_function, ValueMode};
use wassinc::transport::w1;

use output::Outputs;

/// Thread count override for parallel sections.
const THREADS_ENV: &str = "WASSINC_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<wassinc::Error> for CliError {
    fn from(e: wassinc::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Solver(e.to_string())
        }
    }
}

fn lib_err<E: Into<wassinc::Error>>(e: E) -> CliError {
    CliError::from(e.into())
}

#[derive(Parser, Debug)]
#[command(name = "wassinc", version, about = "Controlled crowd dynamics on discrete measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[optimizer] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Ordinary,
    Relaxed,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact Wasserstein-1 distance between two measure files.
    W1 {
        a: PathBuf,
        b: PathBuf,
        /// Also write the distance and optimal plan to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the scenario under a constant (clipped) leader control.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Run with all leader accelerations set to zero.
        #[arg(long, conflicts_with = "control")]
        zero_control: bool,
        /// Constant control, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        control: Option<Vec<f64>>,
    },
    /// Hypothesis probes and a priori bounds for the scenario.
    Probe {
        #[command(flatten)]
        common: Common,
    },
    /// Relaxation gap of the configured relaxed control.
    Relax {
        #[command(flatten)]
        common: Common,
        /// Cells per coarse interval, comma separated.
        #[arg(long, value_delimiter = ',')]
        subdivisions: Option<Vec<usize>>,
    },
    /// Ordinary and relaxed value functions over the configured search space.
    Value {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,
    },
    /// Solve the evacuation problem.
    Optimize {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var(THREADS_ENV) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<String, CliError> {
    match command {
        Command::W1 { a, b, out } => cmd_w1(&a, &b, out.as_deref()),
        Command::Simulate {
            common,
            zero_control,
            control,
        } => cmd_simulate(&common, zero_control, control),
        Command::Probe { common } => cmd_probe(&common),
        Command::Relax { common, subdivisions } => cmd_relax(&common, subdivisions),
        Command::Value { common, mode } => cmd_value(&common, mode),
        Command::Optimize { common } => cmd_optimize(&common),
    }
}

fn load(common: &Common) -> Result<(EvacConfig, MayerProblem, Value), CliError> {
    let mut cfg = EvacConfig::load(&common.config).map_err(lib_err)?;
    if let Some(seed) = common.seed {
        cfg.optimizer.seed = seed;
    }
    let problem = build_problem(&cfg.scenario().map_err(lib_err)?).map_err(lib_err)?;
    let inputs = json!({
        "config": common.config.display().to_string(),
        "scenario": serde_json::to_value(&cfg).expect("config serializes"),
    });
    Ok((cfg, problem, inputs))
}

fn cmd_w1(a: &Path, b: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let mu = read_measure(a).map_err(lib_err)?;
    let nu = read_measure(b).map_err(lib_err)?;
    let (d, plan) = w1(&mu, &nu).map_err(lib_err)?;
    if let Some(dir) = out {
        let mut outs = Outputs::create(dir)?;
        outs.write_json("w1.json", "distance and plan marginal error", json!({
            "w1": d,
            "marginal_error": plan.marginal_error(&mu, &nu),
        }))?;
        let mut csv = String::from("i,j,mass\n");
        for (i, j, m) in &plan.entries {
            csv.push_str(&format!("{i},{j},{}\n", fmt_f64(*m)));
        }
        outs.write("plan.csv", "optimal plan: source atom i, target atom j, transported mass", &csv)?;
        outs.finish("w1", json!({"a": a.display().to_string(), "b": b.display().to_string()}), None)?;
    }
    Ok(fmt_f64(d))
}

fn cmd_simulate(common: &Common, zero: bool, control: Option<Vec<f64>>) -> Result<String, CliError> {
    let (cfg, problem, inputs) = load(common)?;
    let cd = problem.system.control_dim();
    let u = if zero { vec![0.0; cd] } else { control.unwrap_or_else(|| vec![0.0; cd]) };
    if u.len() != cd {
        return Err(CliError::Validation(format!("--control needs {cd} values, got {}", u.len())));
    }
    let bundle = simulate_decision(&problem, &u, 1, SolveOptions::default()).map_err(lib_err)?;
    let eval = evaluate_bundle(&problem, &bundle, &cfg.optimizer);
    let adm = check_admissibility(&bundle, &problem);
    let weights_constant = bundle.weights.as_slice() == problem.mu0.weights();
    let schedule = match &bundle.selection {
        wassinc::inclusion::Selection::Ordinary(s) => s.values.clone(),
        wassinc::inclusion::Selection::Relaxed(_) => unreachable!("clipped solves are ordinary"),
    };

    let mut outs = Outputs::create(&common.out)?;
    outs.write("trajectory.csv", "crowd atoms per time: t, atom, w, x.., v.. (phase coordinates and their velocities)", &bundle_to_csv(&bundle))?;
    outs.write("leaders.csv", "leader state per time: t, positions then velocities", &aux_to_csv(&bundle))?;
    outs.write("schedule.csv", "applied (clipped) control per interval", &schedule_to_csv(&bundle.grid.times(), &schedule))?;
    outs.write("initial.csv", "initial crowd measure", &measure_to_csv(&problem.mu0))?;
    outs.write_json("summary.json", "cost, constraint values and admissibility", json!({
        "cost": eval.cost,
        "evacuated_fraction": 0.0 - eval.cost,
        "max_lambda": eval.max_lambda,
        "admissible": adm.admissible,
        "weights_constant": weights_constant,
        "steps": bundle.steps(),
    }))?;
    outs.finish("simulate", inputs, Some(cfg.optimizer.seed))?;
    Ok(format!("simulate: evacuated fraction {} admissible {}", fmt_f64(0.0 - eval.cost), adm.admissible))
}

fn cmd_probe(common: &Common) -> Result<String, CliError> {
    let (cfg, problem, inputs) = load(common)?;
    let est = problem.estimates.clone().unwrap_or_default();
    let sys = cfg.scenario().map_err(lib_err)?.system().map_err(lib_err)?;
    let again = probe_system(&sys, &problem.mu0);
    debug_assert_eq!(again, est);
    let r = support_radius(&problem.mu0);
    let bounds = gronwall_bounds(r, est.m_hat, &problem.grid).map_err(lib_err)?;
    let mut outs = Outputs::create(&common.out)?;
    outs.write_json("probe.json", "hypothesis estimates and the resulting support and speed bounds", json!({
        "estimates": serde_json::to_value(est).expect("serializes"),
        "initial_radius": r,
        "bounds": serde_json::to_value(bounds).expect("serializes"),
    }))?;
    outs.finish("probe", inputs, Some(cfg.optimizer.seed))?;
    Ok(format!(
        "probe: m_hat {} lk_hat {} R {}",
        fmt_f64(est.m_hat),
        fmt_f64(est.lk_hat),
        fmt_f64(bounds.radius)
    ))
}

fn cmd_relax(common: &Common, subdivisions: Option<Vec<usize>>) -> Result<String, CliError> {
    let (cfg, problem, inputs) = load(common)?;
    let Some((relaxed, grid)) = cfg.relaxed_control().map_err(lib_err)? else {
        return Err(CliError::Validation("config has no [relaxation] section".into()));
    };
    let rc = cfg.relaxation.as_ref().expect("checked above");
    let ns = subdivisions.unwrap_or_else(|| rc.subdivisions.clone());
    if ns.is_empty() || ns.contains(&0) {
        return Err(CliError::Validation("--subdivisions needs positive integers".into()));
    }
    let mut csv = String::from("N,gap\n");
    let mut gaps = Vec::new();
    for &n in &ns {
        let run = relaxation_gap(problem.system.as_ref(), &problem.mu0, &relaxed, &grid, n, rc.resolution).map_err(lib_err)?;
        csv.push_str(&format!("{n},{}\n", fmt_f64(run.gap)));
        gaps.push(run.gap);
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let mut outs = Outputs::create(&common.out)?;
    outs.write("gap.csv", "relaxation gap (max W1 over the fine grid) per subdivision N", &csv)?;
    outs.write_json("verdict.json", "gaps and whether they strictly decrease with N", json!({
        "subdivisions": ns,
        "gaps": gaps,
        "strictly_decreasing": decreasing,
        "resolution": rc.resolution,
    }))?;
    outs.finish("relax", inputs, Some(cfg.optimizer.seed))?;
    Ok(format!("relax: gaps {} strictly decreasing {decreasing}", gaps.iter().map(|g| fmt_f64(*g)).collect::<Vec<_>>().join(" ")))
}

fn cmd_value(common: &Common, mode: Mode) -> Result<String, CliError> {
    let (cfg, mut problem, inputs) = load(common)?;
    let Some(vc) = &cfg.value else {
        return Err(CliError::Validation("config has no [value] section".into()));
    };
    problem.cost = vc.cost();
    problem.validate().map_err(lib_err)?;
    let modes: Vec<ValueMode> = match mode {
        Mode::Ordinary => vec![ValueMode::Ordinary],
        Mode::Relaxed => vec![ValueMode::Relaxed],
        Mode::Both => vec![ValueMode::Ordinary, ValueMode::Relaxed],
    };
    let mut results = Vec::new();
    for m in modes {
        let r = value_function(&problem, problem.grid.t0, &problem.mu0, m, &vc.search()).map_err(lib_err)?;
        results.push(r);
    }
    let mut outs = Outputs::create(&common.out)?;
    outs.write_json("value.json", "value per mode with the minimizing selection", serde_json::to_value(&results).expect("serializes"))?;
    outs.finish("value", inputs, Some(cfg.optimizer.seed))?;
    Ok(format!(
        "value: {}",
        results
            .iter()
            .map(|r| format!("{:?} {}", r.mode, fmt_f64(r.value)))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

fn cmd_optimize(common: &Common) -> Result<String, CliError> {
    let (cfg, problem, inputs) = load(common)?;
    let report = solve_mayer(&problem, &cfg.optimizer).map_err(lib_err)?;
    let adm = check_admissibility(&report.trajectory, &problem);
    let mut outs = Outputs::create(&common.out)?;
    let mut value = serde_json::to_value(&report).expect("serializes");
    value["admissibility"] = serde_json::to_value(&adm).expect("serializes");
    outs.write_json("report.json", "best candidate: cost, constraints, schedule, optimizer trace and seed", value)?;
    outs.write("trajectory.csv", "crowd atoms per time: t, atom, w, x.., v..", &bundle_to_csv(&report.trajectory))?;
    outs.write("leaders.csv", "leader state per time: t, positions then velocities", &aux_to_csv(&report.trajectory))?;
    outs.write("schedule.csv", "optimal control per interval", &schedule_to_csv(&report.trajectory.grid.times(), &report.schedule.values))?;
    outs.finish("optimize", inputs, Some(cfg.optimizer.seed))?;
    if !report.feasible {
        return Err(CliError::Solver(format!("no feasible candidate; best cost {}", fmt_f64(report.cost))));
    }
    Ok(format!(
        "optimize: evacuated fraction {} admissible {}",
        fmt_f64(0.0 - report.cost),
        adm.admissible
    ))
}
