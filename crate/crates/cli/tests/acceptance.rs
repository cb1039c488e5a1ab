//! End-to-end acceptance suite. Prints one line per criterion and exits
//! nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wassinc::evac::{build_problem, sublinearity_at, EvacConfig, EvacSystem};
use wassinc::inclusion::{
    family_bounds_check, gronwall_bounds, solve, solve_with, solve_with_policy, test_function_library,
    verify_round_trip, weak_form_residual, ClosureSystem, ControlSchedule, ControlSetSpec, ControlSystem,
    ParticleState, Selection, SolveOptions, TimeGrid, TrajectoryBundle,
};
use wassinc::mayer::{check_admissibility, solve_mayer, zero_control_evaluation, CostSpec, MayerProblem, RegionSpec};
use wassinc::measures::{dist, support_radius, DiscreteMeasure};
use wassinc::relaxation::{relaxation_gap, solve_relaxed, value_function, RelaxedControl, SearchSpec, ValueMode};
use wassinc::transport::{w1_distance, w1_oracle_uniform};

type Outcome = Result<String, String>;

/// Bundles kept for the replay check, with the system that produced them.
struct Replays {
    entries: Vec<(String, Arc<dyn ControlSystem + Send + Sync>, TrajectoryBundle)>,
}

impl Replays {
    fn push(&mut self, label: impl Into<String>, system: Arc<dyn ControlSystem + Send + Sync>, bundle: TrajectoryBundle) {
        self.entries.push((label.into(), system, bundle));
    }
}

fn sci(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fixed(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config_path(name: &str) -> PathBuf {
    workspace_root().join("configs").join(name)
}

fn load_config(name: &str) -> EvacConfig {
    EvacConfig::load(&config_path(name)).expect("bundled config loads")
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, uniform: bool) -> DiscreteMeasure {
    let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    if uniform {
        DiscreteMeasure::uniform(pts).unwrap()
    } else {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        DiscreteMeasure::new_normalized(pts, w).unwrap()
    }
}

fn transport_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=3);
        let a = random_cloud(&mut rng, n, d, true);
        let b = random_cloud(&mut rng, n, d, true);
        let exact = w1_distance(&a, &b).map_err(|e| e.to_string())?;
        let oracle = w1_oracle_uniform(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((exact - oracle).abs());
    }
    if worst > 1e-9 {
        return Err(format!("max deviation from permutation oracle {worst:e}"));
    }
    let mut axiom_err: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.gen_range(1..=3);
        let ms: Vec<DiscreteMeasure> = (0..3)
            .map(|_| {
                let n = rng.gen_range(1..=6);
                random_cloud(&mut rng, n, d, false)
            })
            .collect();
        let w = |i: usize, j: usize| w1_distance(&ms[i], &ms[j]).unwrap();
        axiom_err = axiom_err
            .max(w(0, 0))
            .max((w(0, 1) - w(1, 0)).abs())
            .max(w(0, 2) - w(0, 1) - w(1, 2))
            .max(-w(0, 1));
    }
    if axiom_err > 1e-9 {
        return Err(format!("metric axioms violated by {axiom_err:e}"));
    }
    Ok(format!("oracle deviation {worst:.1e}, axiom slack {axiom_err:.1e}"))
}

fn translation_flow(replays: &mut Replays) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mu0 = random_cloud(&mut rng, 5, 2, false);
    let u = vec![0.6, -0.8];
    let sys: Arc<dyn ControlSystem + Send + Sync> = Arc::new(ClosureSystem::translation(2, ControlSetSpec::Box(vec![1.0, 1.0])));
    let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    let b = solve(sys.as_ref(), &mu0, &ControlSchedule::constant(u.clone(), 1000), &grid).map_err(|e| e.to_string())?;
    let mu_t = b.final_measure();
    let shifted = mu0.translate(&u).unwrap();
    let err = w1_distance(&mu_t, &shifted).unwrap();
    let moved = w1_distance(&mu_t, &mu0).unwrap();
    replays.push("translation", sys, b);
    let norm_u = (u[0] * u[0] + u[1] * u[1]).sqrt();
    if err > 1e-9 || (moved - norm_u).abs() > 1e-9 {
        return Err(format!("W1 to translate {err:e}, displacement {moved} vs {norm_u}"));
    }
    Ok(format!("W1 to translate {err:.1e}, displacement error {:.1e}", (moved - norm_u).abs()))
}

fn integrator_order(replays: &mut Replays) -> Outcome {
    let mu0 = DiscreteMeasure::uniform(vec![vec![1.0, -0.5], vec![0.3, 2.0], vec![-1.5, 0.2]]).unwrap();
    let sys: Arc<dyn ControlSystem + Send + Sync> = Arc::new(ClosureSystem::linear(2, 1.0));
    let exact: Vec<f64> = mu0.flat_points().iter().map(|x| x * 1f64.exp()).collect();
    let mut errors = Vec::new();
    for steps in [100, 200, 400] {
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let b = solve(sys.as_ref(), &mu0, &ControlSchedule::constant(vec![0.0], steps), &grid).map_err(|e| e.to_string())?;
        let end = &b.positions[steps];
        let err = (0..mu0.len())
            .map(|i| dist(&end[2 * i..2 * i + 2], &exact[2 * i..2 * i + 2]))
            .fold(0.0, f64::max);
        errors.push(err);
        replays.push(format!("linear/{steps}"), sys.clone(), b);
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let text = format!("max particle errors {}, ratios {}", sci(&errors), fixed(&ratios));
    if ratios.iter().all(|r| *r >= 8.0) {
        Ok(text)
    } else {
        Err(text)
    }
}

fn evac_system(cfg: &EvacConfig) -> (MayerProblem, Arc<EvacSystem>) {
    let scenario = cfg.scenario().unwrap();
    let problem = build_problem(&scenario).unwrap();
    (problem, Arc::new(scenario.system().unwrap()))
}

fn a_priori_bounds(replays: &mut Replays) -> Outcome {
    let cfg = load_config("evac.toml");
    let (problem, sys) = evac_system(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cd = sys.control_dim();
    let mut bundles = Vec::new();
    for _ in 0..20 {
        let raw: Vec<Vec<f64>> = (0..problem.grid.steps)
            .map(|_| (0..cd).map(|_| rng.gen_range(-8.0..8.0)).collect())
            .collect();
        let b = solve_with_policy(sys.as_ref(), &problem.mu0, &problem.grid, SolveOptions::default(), |k, _, _, set| {
            set.project(&raw[k])
        })
        .map_err(|e| e.to_string())?;
        bundles.push(b);
    }
    let mut m_bar: f64 = 0.0;
    for b in &bundles {
        for k in 0..=b.steps() {
            let state = b.state(k);
            m_bar = m_bar.max(sublinearity_at(&sys, &state, b.grid.time(k), &[]));
        }
    }
    let r = support_radius(&problem.mu0);
    let bounds = gronwall_bounds(r, m_bar, &problem.grid).map_err(|e| e.to_string())?;
    let report = family_bounds_check(&bundles, &bounds, 1e-6).map_err(|e| e.to_string())?;
    for (i, b) in bundles.into_iter().enumerate() {
        replays.push(format!("evac-random/{i}"), sys.clone(), b);
    }
    let text = format!(
        "m_bar {m_bar:.3}, R {:.3} (seen {:.3}), m_r {:.3} (seen {:.3})",
        bounds.radius, report.max_support_radius, bounds.modulus, report.max_speed
    );
    if report.passes() {
        Ok(text)
    } else {
        Err(format!(
            "{text}; {} support and {} continuity violations",
            report.support_violations.len(),
            report.continuity_violations.len()
        ))
    }
}

fn phase_barycenter(mu: &DiscreteMeasure) -> Vec<f64> {
    let mut c = vec![0.0; mu.dim()];
    for (w, x) in mu.atoms() {
        for (ck, xk) in c.iter_mut().zip(x) {
            *ck += w * xk;
        }
    }
    c
}

fn weak_form(replays: &mut Replays) -> Outcome {
    let cfg = load_config("evac.toml");
    let (problem, sys) = evac_system(&cfg);
    let center = phase_barycenter(&problem.mu0);
    let library = test_function_library(&center, 3.0);
    let c = cfg.congestion.c;
    let mut residuals = Vec::new();
    for steps in [100, 200, 400] {
        let grid = TimeGrid::new(problem.grid.t0, problem.grid.t_end, steps).unwrap();
        let b = solve_with_policy(sys.as_ref(), &problem.mu0, &grid, SolveOptions::default(), |_, t, _, set| {
            let s = (std::f64::consts::PI * t).sin();
            let u = vec![0.6 * c * s, 0.2 * c * s, 0.6 * c * s, -0.2 * c * s];
            set.project(&u)
        })
        .map_err(|e| e.to_string())?;
        let res = library.iter().map(|phi| weak_form_residual(&b, phi)).fold(0.0, f64::max);
        residuals.push(res);
        replays.push(format!("evac-smooth/{steps}"), sys.clone(), b);
    }
    let text = format!("residuals {}", sci(&residuals));
    if residuals.windows(2).all(|w| w[1] <= w[0] / 2.0) {
        Ok(text)
    } else {
        Err(text)
    }
}

fn relaxation_gaps(replays: &mut Replays) -> Outcome {
    let ns = [4, 8, 16, 32];
    let check = |gaps: &[f64]| gaps.windows(2).all(|w| w[1] < w[0] && w[1] <= 0.75 * w[0] + 1e-9);

    let sys: Arc<dyn ControlSystem + Send + Sync> = Arc::new(ClosureSystem::translation(2, ControlSetSpec::Box(vec![1.0, 1.0])));
    let mu0 = DiscreteMeasure::uniform(vec![vec![0.0, 0.0], vec![1.0, 0.5]]).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
    let opposite = RelaxedControl::constant(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.5, 0.5], 4).unwrap();
    let mut toy = Vec::new();
    for &n in &ns {
        let run = relaxation_gap(sys.as_ref(), &mu0, &opposite, &grid, n, 2).map_err(|e| e.to_string())?;
        toy.push(run.gap);
        replays.push(format!("opposite/relaxed/{n}"), sys.clone(), run.relaxed);
        replays.push(format!("opposite/chattering/{n}"), sys.clone(), run.chattering);
    }
    let single = RelaxedControl::constant(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1.0, 0.0], 4).unwrap();
    let single_gap = relaxation_gap(sys.as_ref(), &mu0, &single, &grid, 4, 2).map_err(|e| e.to_string())?.gap;

    let cfg = load_config("evac.toml");
    let (problem, esys) = evac_system(&cfg);
    let (relaxed, coarse) = cfg.relaxed_control().unwrap().expect("config has a relaxation section");
    let resolution = cfg.relaxation.as_ref().unwrap().resolution;
    let mut evac = Vec::new();
    for &n in &ns {
        let run = relaxation_gap(esys.as_ref(), &problem.mu0, &relaxed, &coarse, n, resolution).map_err(|e| e.to_string())?;
        evac.push(run.gap);
        if n == ns[0] {
            replays.push("evac-relaxed", esys.clone(), run.relaxed);
            replays.push("evac-chattering", esys.clone(), run.chattering);
        }
    }
    let text = format!("opposite {}, evac {}, single atom {single_gap:.1e}", sci(&toy), sci(&evac));
    if check(&toy) && check(&evac) && single_gap <= 1e-9 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn value_comparison(replays: &mut Replays) -> Outcome {
    let kappa = 0.8;
    let horizon = 1.0;
    let field = move |_t: f64, s: &ParticleState<'_>, u: &[f64], x: &[f64], out: &mut [f64]| {
        let mut bary = [0.0; 2];
        for (w, y) in s.atoms() {
            bary[0] += w * y[0];
            bary[1] += w * y[1];
        }
        for k in 0..2 {
            out[k] = u[k] + kappa * (bary[k] - x[k]);
        }
    };
    let atoms = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let sys: Arc<dyn ControlSystem + Send + Sync> = Arc::new(ClosureSystem::new(2, ControlSetSpec::Atoms(atoms.clone()), field));
    let mu0 = DiscreteMeasure::uniform(vec![
        vec![0.0, 0.0],
        vec![0.4, 0.0],
        vec![-0.4, 0.0],
        vec![0.0, 0.4],
        vec![0.0, -0.4],
    ])
    .unwrap();
    let target = vec![0.5 * horizon, 0.5 * horizon];
    let goal = target.clone();
    let cost = CostSpec::Custom(Arc::new(move |mu: &DiscreteMeasure| mu.atoms().map(|(w, x)| w * dist(x, &goal)).sum()));
    let grid = TimeGrid::new(0.0, horizon, 40).unwrap();
    let region = RegionSpec::Ball { center: target, radius: 0.1 };
    let problem = MayerProblem::new(sys.clone(), grid, mu0.clone(), region, cost).map_err(|e| e.to_string())?;
    let search = SearchSpec { atoms, intervals: 4, substeps: 10, denominator: 4 };
    let ordinary = value_function(&problem, 0.0, &mu0, ValueMode::Ordinary, &search).map_err(|e| e.to_string())?;
    let relaxed = value_function(&problem, 0.0, &mu0, ValueMode::Relaxed, &search).map_err(|e| e.to_string())?;
    for r in [&ordinary, &relaxed] {
        let b = match &r.argmin {
            Selection::Ordinary(s) => solve_with(sys.as_ref(), &mu0, s, &grid, SolveOptions::default()).map_err(|e| e.to_string())?,
            Selection::Relaxed(c) => solve_relaxed(sys.as_ref(), &mu0, c, &grid).map_err(|e| e.to_string())?,
        };
        let replayed = problem.terminal_cost(&b.final_measure());
        if replayed != r.value {
            return Err(format!("{:?} argmin replays to {replayed}, value {}", r.mode, r.value));
        }
        replays.push(format!("value/{:?}", r.mode), sys.clone(), b);
    }
    let (v, v_co) = (ordinary.value, relaxed.value);
    let text = format!("V {v:.6e}, V_co {v_co:.6e}, gap {:.1e}", (v - v_co).abs());
    if v_co <= v + 1e-9 && (v - v_co).abs() <= 0.05 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn replay_all(replays: &Replays) -> Outcome {
    let mut failures = Vec::new();
    for (label, sys, bundle) in &replays.entries {
        match verify_round_trip(sys.as_ref(), bundle) {
            Ok(r) if r.ok => {}
            Ok(r) => failures.push(format!("{label} diverges at step {:?}", r.first_divergence)),
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(format!("{} bundles replay bit-for-bit", replays.entries.len()))
    } else {
        Err(failures.join("; "))
    }
}

fn evacuation() -> Outcome {
    let cfg = load_config("evac.toml");
    let problem = build_problem(&cfg.scenario().unwrap()).map_err(|e| e.to_string())?;
    let report = solve_mayer(&problem, &cfg.optimizer).map_err(|e| e.to_string())?;
    let adm = check_admissibility(&report.trajectory, &problem);
    let (zero, _) = zero_control_evaluation(&problem, &cfg.optimizer).map_err(|e| e.to_string())?;
    let text = format!(
        "cost {:.4} vs zero control {:.4}, max lambda {:.1e}, control violations {}, admissible {}",
        report.cost,
        zero.cost,
        adm.max_lambda,
        adm.control_violations.len(),
        adm.admissible
    );
    if adm.admissible && adm.max_lambda <= 1e-6 && adm.control_violations.is_empty() && report.cost < zero.cost {
        Ok(text)
    } else {
        Err(text)
    }
}

fn run_cli(args: &[&str], out: Option<&Path>) -> (Option<i32>, Vec<(String, Vec<u8>)>, Vec<u8>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wassinc"));
    cmd.args(args);
    if let Some(dir) = out {
        cmd.arg("--out").arg(dir);
    }
    let output = cmd.output().expect("binary runs");
    let mut files = Vec::new();
    if let Some(dir) = out {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .map(|it| it.filter_map(Result::ok).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
            .unwrap_or_default();
        names.sort();
        for name in names {
            let bytes = std::fs::read(dir.join(&name)).unwrap();
            files.push((name, bytes));
        }
    }
    (output.status.code(), files, output.stdout)
}

fn determinism() -> Outcome {
    let small = config_path("evac_small.toml");
    let small = small.to_str().unwrap();
    let a = config_path("dirac_a.csv");
    let b = config_path("dirac_b.csv");
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("w1", vec!["w1", a.to_str().unwrap(), b.to_str().unwrap()]),
        ("simulate", vec!["simulate", "--config", small, "--zero-control"]),
        ("probe", vec!["probe", "--config", small]),
        ("relax", vec!["relax", "--config", small]),
        ("value", vec!["value", "--config", small]),
        ("optimize", vec!["optimize", "--config", small]),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut checked = Vec::new();
    for (name, args) in runs {
        let d1 = tmp.path().join(format!("{name}-1"));
        let d2 = tmp.path().join(format!("{name}-2"));
        let first = run_cli(&args, Some(&d1));
        let second = run_cli(&args, Some(&d2));
        if first.0 != Some(0) {
            return Err(format!("{name} exited with {:?}", first.0));
        }
        if first != second {
            return Err(format!("{name} output differs between runs"));
        }
        if first.1.is_empty() {
            return Err(format!("{name} wrote no files"));
        }
        checked.push(format!("{name}({})", first.1.len()));
    }
    Ok(format!("byte-identical reruns: {}", checked.join(" ")))
}

fn main() -> ExitCode {
    let mut replays = Replays { entries: Vec::new() };
    let mut failed = 0;
    let mut report = |n: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    };
    let t = Instant::now();
    report(1, "exact transport", t, transport_exactness());
    let t = Instant::now();
    report(2, "translation flow", t, translation_flow(&mut replays));
    let t = Instant::now();
    report(3, "integrator order", t, integrator_order(&mut replays));
    let t = Instant::now();
    report(4, "a priori bounds", t, a_priori_bounds(&mut replays));
    let t = Instant::now();
    report(5, "weak form consistency", t, weak_form(&mut replays));
    let t = Instant::now();
    report(6, "relaxation gap", t, relaxation_gaps(&mut replays));
    let t = Instant::now();
    report(7, "relaxed value", t, value_comparison(&mut replays));
    let t = Instant::now();
    report(8, "round trip", t, replay_all(&replays));
    let t = Instant::now();
    report(9, "evacuation", t, evacuation());
    let t = Instant::now();
    report(10, "cli determinism", t, determinism());
    if failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
