//! Mayer problems with state constraints and a derivative-free direct solver.
//!
//! Decision variables are piecewise-constant control values on a few time
//! blocks. Each candidate is simulated with state-dependent clipping of the
//! control to `U(t_k, μ(t_k))`, scored with a penalty objective, and ranked
//! feasible-first. The optimizer is a multi-start Nelder–Mead with box
//! projection.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::HypothesisEstimates;
use crate::inclusion::{
    solve_with_policy, ControlSchedule, ControlSetSpec, ControlSystem, ParticleState, Selection, SolveError,
    SolveOptions, TimeGrid, TrajectoryBundle,
};
use crate::measures::{dist, norm, DiscreteMeasure};

/// Tolerance for constraint satisfaction.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MayerError {
    #[error("region: {0}")]
    Region(String),
    #[error("mollified cost needs a positive width, got {0}")]
    Width(f64),
    #[error("problem: {0}")]
    Problem(String),
    #[error("optimizer options: {0}")]
    Options(String),
    #[error("no candidate could be evaluated; last error: {0}")]
    NoCandidate(SolveError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Closed region in position space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RegionSpec {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{x : ⟨normal, x⟩ ≤ offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    Union { parts: Vec<RegionSpec> },
}

impl RegionSpec {
    pub fn validate(&self, dim: usize) -> Result<(), MayerError> {
        let bad = |m: String| Err(MayerError::Region(m));
        match self {
            RegionSpec::Ball { center, radius } => {
                if center.len() != dim {
                    return bad(format!("ball center has dimension {}, expected {dim}", center.len()));
                }
                if !(*radius >= 0.0 && radius.is_finite()) || center.iter().any(|c| !c.is_finite()) {
                    return bad("ball needs a finite center and nonnegative radius".into());
                }
            }
            RegionSpec::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return bad(format!("box corners must have dimension {dim}"));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return bad("box needs lower ≤ upper".into());
                }
            }
            RegionSpec::HalfSpace { normal, offset } => {
                if normal.len() != dim {
                    return bad(format!("half-space normal must have dimension {dim}"));
                }
                if !(norm(normal) > 0.0) || !offset.is_finite() {
                    return bad("half-space needs a nonzero normal".into());
                }
            }
            RegionSpec::Union { parts } => {
                if parts.is_empty() {
                    return bad("empty union".into());
                }
                for p in parts {
                    p.validate(dim)?;
                }
            }
        }
        Ok(())
    }

    /// Euclidean distance from `x` to the region.
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            RegionSpec::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
            RegionSpec::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(c, (l, u))| {
                    let e = (l - c).max(c - u).max(0.0);
                    e * e
                })
                .sum::<f64>()
                .sqrt(),
            RegionSpec::HalfSpace { normal, offset } => {
                let a: f64 = normal.iter().zip(x).map(|(n, c)| n * c).sum();
                ((a - offset) / norm(normal)).max(0.0)
            }
            RegionSpec::Union { parts } => parts.iter().map(|p| p.distance(x)).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.distance(x) == 0.0
    }
}

/// `Λ(μ, H) = Σ_i w_i d_H(x_i)`.
pub fn lambda_constraint(mu: &DiscreteMeasure, region: &RegionSpec) -> f64 {
    mu.atoms().map(|(w, x)| w * region.distance(x)).sum()
}

pub type CustomCost = Arc<dyn Fn(&DiscreteMeasure) -> f64 + Send + Sync>;

/// Terminal cost `φ(μ(T))` to be minimized.
#[derive(Clone)]
pub enum CostSpec {
    /// `-μ(S)`.
    IndicatorFraction,
    /// `-∫ ramp_ε(d_S) dμ`, the ramp being 1 on `S` and 0 beyond distance `ε`.
    Mollified { width: f64 },
    /// Any functional of the position marginal.
    Custom(CustomCost),
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostSpec::IndicatorFraction => write!(f, "IndicatorFraction"),
            CostSpec::Mollified { width } => write!(f, "Mollified {{ width: {width} }}"),
            CostSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl CostSpec {
    pub fn validate(&self) -> Result<(), MayerError> {
        match self {
            CostSpec::Mollified { width } if !(*width > 0.0) => Err(MayerError::Width(*width)),
            _ => Ok(()),
        }
    }
}

/// Evaluates the terminal cost on a measure over positions.
pub fn evaluate_cost(cost: &CostSpec, mu_t: &DiscreteMeasure, target: &RegionSpec) -> f64 {
    match cost {
        CostSpec::IndicatorFraction => {
            0.0 - mu_t
                .atoms()
                .filter(|(_, x)| target.contains(x))
                .map(|(w, _)| w)
                .sum::<f64>()
        }
        CostSpec::Mollified { width } => {
            0.0 - mu_t
                .atoms()
                .map(|(w, x)| w * (1.0 - target.distance(x) / width).max(0.0))
                .sum::<f64>()
        }
        CostSpec::Custom(f) => f(mu_t),
    }
}

/// Mass strictly outside `S` but within distance `ε` of it; bounds the gap
/// between the mollified and the indicator cost.
pub fn boundary_layer_mass(mu_t: &DiscreteMeasure, target: &RegionSpec, width: f64) -> f64 {
    mu_t.atoms()
        .filter(|(_, x)| {
            let d = target.distance(x);
            d > 0.0 && d < width
        })
        .map(|(w, _)| w)
        .sum()
}

/// Running state constraint `Λ(μ(t), H) ≤ tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningConstraint {
    pub region: RegionSpec,
    #[serde(default)]
    pub tolerance: f64,
}

/// Minimize `φ(μ(T))` subject to the dynamics, `U(t, μ)`, a running
/// constraint and an optional terminal set.
#[derive(Clone)]
pub struct MayerProblem {
    pub system: Arc<dyn ControlSystem + Send + Sync>,
    pub grid: TimeGrid,
    pub mu0: DiscreteMeasure,
    /// Number of leading coordinates that are positions; costs and
    /// constraints act on that marginal.
    pub position_dims: usize,
    pub target: RegionSpec,
    pub cost: CostSpec,
    pub running: Option<RunningConstraint>,
    pub terminal: Option<RegionSpec>,
    /// Componentwise magnitude bound on decision variables.
    pub control_box: Vec<f64>,
    pub estimates: Option<HypothesisEstimates>,
}

impl fmt::Debug for MayerProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MayerProblem")
            .field("grid", &self.grid)
            .field("atoms", &self.mu0.len())
            .field("position_dims", &self.position_dims)
            .field("target", &self.target)
            .field("cost", &self.cost)
            .field("running", &self.running)
            .field("terminal", &self.terminal)
            .field("control_box", &self.control_box)
            .finish()
    }
}

impl MayerProblem {
    /// Problem with no state constraints; the decision box is taken from
    /// `U(t0, μ0)`.
    pub fn new(
        system: Arc<dyn ControlSystem + Send + Sync>,
        grid: TimeGrid,
        mu0: DiscreteMeasure,
        target: RegionSpec,
        cost: CostSpec,
    ) -> Result<Self, MayerError> {
        let position_dims = system.dim();
        let aux = system.initial_aux();
        let state = ParticleState {
            dim: mu0.dim(),
            weights: mu0.weights(),
            points: mu0.flat_points(),
            aux: &aux,
        };
        let control_box = envelope(&system.control_set(grid.t0, &state));
        let p = MayerProblem {
            system,
            grid,
            mu0,
            position_dims,
            target,
            cost,
            running: None,
            terminal: None,
            control_box,
            estimates: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MayerError> {
        self.grid.validate()?;
        let d = self.system.dim();
        if self.mu0.dim() != d {
            return Err(MayerError::Problem(format!(
                "initial measure has dimension {}, system expects {d}",
                self.mu0.dim()
            )));
        }
        if self.position_dims == 0 || self.position_dims > d {
            return Err(MayerError::Problem(format!("position block {} out of range", self.position_dims)));
        }
        if self.control_box.len() != self.system.control_dim() {
            return Err(MayerError::Problem("control box does not match control dimension".into()));
        }
        if self.control_box.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(MayerError::Problem("control box needs finite nonnegative bounds".into()));
        }
        self.target.validate(self.position_dims)?;
        self.cost.validate()?;
        if let Some(r) = &self.running {
            r.region.validate(self.position_dims)?;
        }
        if let Some(q) = &self.terminal {
            q.validate(self.position_dims)?;
        }
        Ok(())
    }

    pub fn positions(&self, mu: &DiscreteMeasure) -> DiscreteMeasure {
        if mu.dim() == self.position_dims {
            return mu.clone();
        }
        mu.project(0..self.position_dims).expect("position block in range")
    }

    /// `φ(μ)` evaluated on the position marginal.
    pub fn terminal_cost(&self, mu: &DiscreteMeasure) -> f64 {
        evaluate_cost(&self.cost, &self.positions(mu), &self.target)
    }
}

/// Symmetric bounding box of a control set.
pub fn envelope(set: &ControlSetSpec) -> Vec<f64> {
    match set {
        ControlSetSpec::Atoms(a) => {
            let mut b = vec![0.0f64; set.dim()];
            for u in a {
                for (x, c) in b.iter_mut().zip(u) {
                    *x = x.max(c.abs());
                }
            }
            b
        }
        ControlSetSpec::Box(b) => b.clone(),
        ControlSetSpec::Balls { block, radii } => radii.iter().flat_map(|r| std::iter::repeat(*r).take(*block)).collect(),
    }
}

/// Constraint audit of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// `Λ(μ(t_k), H)` per grid time (empty without a running constraint).
    pub lambda: Vec<f64>,
    pub max_lambda: f64,
    /// First grid time with `Λ` above tolerance.
    pub first_violation: Option<f64>,
    /// `Σ w_i d_Q(x_i)` at `T` when a terminal set is present.
    pub terminal_distance: Option<f64>,
    /// Intervals whose control exceeds `U(t_k, μ(t_k))`.
    pub control_violations: Vec<usize>,
    pub admissible: bool,
}

/// Checks the running constraint, the terminal set and the per-interval
/// control bounds at left endpoints, all with tolerance [`FEASIBILITY_TOL`].
pub fn check_admissibility(bundle: &TrajectoryBundle, problem: &MayerProblem) -> AdmissibilityReport {
    let mut lambda = Vec::new();
    let mut first_violation = None;
    if let Some(run) = &problem.running {
        for k in 0..=bundle.steps() {
            let l = lambda_constraint(&problem.positions(&bundle.measure(k)), &run.region);
            if l > run.tolerance + FEASIBILITY_TOL && first_violation.is_none() {
                first_violation = Some(bundle.grid.time(k));
            }
            lambda.push(l);
        }
    }
    let max_lambda = lambda.iter().copied().fold(0.0, f64::max);
    let terminal_distance = problem
        .terminal
        .as_ref()
        .map(|q| lambda_constraint(&problem.positions(&bundle.final_measure()), q));

    let mut control_violations = Vec::new();
    for k in 0..bundle.steps() {
        let state = bundle.state(k);
        let set = problem.system.control_set(bundle.grid.time(k), &state);
        let ok = match &bundle.selection {
            Selection::Ordinary(s) => set.contains(&s.values[k], FEASIBILITY_TOL),
            Selection::Relaxed(r) => r.weights[k]
                .iter()
                .zip(&r.atoms)
                .all(|(l, u)| *l == 0.0 || set.contains(u, FEASIBILITY_TOL)),
        };
        if !ok {
            control_violations.push(k);
        }
    }
    let admissible = first_violation.is_none()
        && terminal_distance.map_or(true, |d| d <= FEASIBILITY_TOL)
        && control_violations.is_empty();
    AdmissibilityReport {
        lambda,
        max_lambda,
        first_violation,
        terminal_distance,
        control_violations,
        admissible,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOptions {
    pub seed: u64,
    pub starts: usize,
    /// Objective evaluations per start.
    pub max_evals: usize,
    /// Number of piecewise-constant control blocks over the horizon.
    pub blocks: usize,
    pub w_run: f64,
    pub w_term: f64,
    /// Weight of the mean distance to the target, added to the search
    /// objective only, so plateaus of the indicator cost still have a slope.
    pub shaping: f64,
    /// Initial simplex edge as a fraction of the decision box.
    pub initial_step: f64,
    pub parallel: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            seed: 0,
            starts: 8,
            max_evals: 120,
            blocks: 4,
            w_run: 100.0,
            w_term: 100.0,
            shaping: 0.05,
            initial_step: 0.5,
            parallel: true,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<(), MayerError> {
        if self.starts == 0 || self.max_evals == 0 || self.blocks == 0 {
            return Err(MayerError::Options("starts, max_evals and blocks must be positive".into()));
        }
        if !(self.w_run >= 0.0 && self.w_term >= 0.0 && self.shaping >= 0.0) {
            return Err(MayerError::Options("weights must be nonnegative".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(MayerError::Options("initial_step must be positive".into()));
        }
        Ok(())
    }
}

/// Score of one simulated candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub cost: f64,
    pub max_lambda: f64,
    pub terminal_distance: f64,
    pub feasible: bool,
    /// Penalty objective driven by the search.
    pub objective: f64,
}

impl Evaluation {
    /// Feasible first, then lower cost, then lower objective.
    pub fn ranks_before(&self, other: &Evaluation) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            _ => self
                .cost
                .total_cmp(&other.cost)
                .then(self.objective.total_cmp(&other.objective))
                .is_lt(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub seed: u64,
    pub schedule: ControlSchedule,
    #[serde(skip)]
    pub trajectory: TrajectoryBundle,
    pub cost: f64,
    pub objective: f64,
    pub max_lambda: f64,
    pub terminal_distance: f64,
    pub feasible: bool,
    /// Start that produced the returned candidate.
    pub start: usize,
    pub evaluations: usize,
    /// Best-so-far penalty objective after each evaluation, starts in order.
    pub trace: Vec<f64>,
}

/// Decision vector to per-interval controls.
fn expand(z: &[f64], blocks: usize, control_dim: usize, steps: usize) -> impl Fn(usize) -> Vec<f64> + '_ {
    move |k| {
        let b = (k * blocks / steps).min(blocks - 1);
        z[b * control_dim..(b + 1) * control_dim].to_vec()
    }
}

/// Simulates the control encoded by `z`, clipping each interval's value to
/// `U(t_k, μ(t_k))`.
pub fn simulate_decision(
    problem: &MayerProblem,
    z: &[f64],
    blocks: usize,
    opts: SolveOptions,
) -> Result<TrajectoryBundle, SolveError> {
    let cd = problem.system.control_dim();
    let pick = expand(z, blocks, cd, problem.grid.steps);
    solve_with_policy(problem.system.as_ref(), &problem.mu0, &problem.grid, opts, |k, _, _, set| {
        set.project(&pick(k))
    })
}

/// Scores a simulated trajectory.
pub fn evaluate_bundle(problem: &MayerProblem, bundle: &TrajectoryBundle, options: &OptimizerOptions) -> Evaluation {
    let final_pos = problem.positions(&bundle.final_measure());
    let cost = evaluate_cost(&problem.cost, &final_pos, &problem.target);
    let mut max_lambda: f64 = 0.0;
    let mut tol = 0.0;
    if let Some(run) = &problem.running {
        tol = run.tolerance;
        for k in 0..=bundle.steps() {
            let pos = DiscreteMeasure::from_flat(bundle.dim, bundle.positions[k].clone(), bundle.weights.clone())
                .expect("bundle measure");
            max_lambda = max_lambda.max(lambda_constraint(&problem.positions(&pos), &run.region));
        }
    }
    let terminal_distance = problem
        .terminal
        .as_ref()
        .map_or(0.0, |q| lambda_constraint(&final_pos, q));
    let feasible = max_lambda <= tol + FEASIBILITY_TOL && terminal_distance <= FEASIBILITY_TOL;
    let shaping = if options.shaping > 0.0 {
        options.shaping * lambda_constraint(&final_pos, &problem.target)
    } else {
        0.0
    };
    let objective = cost
        + options.w_run * (max_lambda - tol).max(0.0)
        + options.w_term * terminal_distance
        + shaping;
    Evaluation {
        cost,
        max_lambda,
        terminal_distance,
        feasible,
        objective,
    }
}

struct StartResult {
    best_z: Vec<f64>,
    best: Option<Evaluation>,
    trace: Vec<f64>,
    evaluations: usize,
    last_error: Option<SolveError>,
}

fn run_start(problem: &MayerProblem, options: &OptimizerOptions, start: usize) -> StartResult {
    let n = options.blocks * problem.system.control_dim();
    let bounds: Vec<f64> = (0..options.blocks).flat_map(|_| problem.control_box.iter().copied()).collect();
    let clamp = |z: &mut [f64]| {
        for (c, b) in z.iter_mut().zip(&bounds) {
            *c = c.clamp(-b, *b);
        }
    };
    let mut x0 = vec![0.0; n];
    if start > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(start as u64);
        for (c, b) in x0.iter_mut().zip(&bounds) {
            *c = if *b > 0.0 { rng.gen_range(-*b..=*b) } else { 0.0 };
        }
    }

    let mut res = StartResult {
        best_z: x0.clone(),
        best: None,
        trace: Vec::new(),
        evaluations: 0,
        last_error: None,
    };
    let opts = SolveOptions { record_fields: false };
    let f = |z: &[f64], res: &mut StartResult| -> f64 {
        res.evaluations += 1;
        let value = match simulate_decision(problem, z, options.blocks, opts) {
            Ok(b) => {
                let e = evaluate_bundle(problem, &b, options);
                if res.best.map_or(true, |cur| e.ranks_before(&cur)) {
                    res.best = Some(e);
                    res.best_z = z.to_vec();
                }
                e.objective
            }
            Err(err) => {
                res.last_error = Some(err);
                f64::INFINITY
            }
        };
        let prev = res.trace.last().copied().unwrap_or(f64::INFINITY);
        res.trace.push(prev.min(value));
        value
    };

    // initial simplex
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = f(&x0, &mut res);
    simplex.push((x0.clone(), v0));
    for i in 0..n {
        if res.evaluations >= options.max_evals {
            break;
        }
        let mut x = x0.clone();
        let step = options.initial_step * bounds[i];
        x[i] += if x[i] + step <= bounds[i] { step } else { -step };
        clamp(&mut x);
        let v = f(&x, &mut res);
        simplex.push((x, v));
    }

    while res.evaluations < options.max_evals && simplex.len() == n + 1 && n > 0 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let worst = simplex[n].clone();
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect();
            clamp(&mut p);
            p
        };
        let xr = along(1.0);
        let fr = f(&xr, &mut res);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = f(&xe, &mut res);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = along(0.5);
                let fc = f(&xc, &mut res);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = f(&xc, &mut res);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    if res.evaluations >= options.max_evals {
                        break;
                    }
                    let mut x: Vec<f64> = best.iter().zip(&item.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    clamp(&mut x);
                    let v = f(&x, &mut res);
                    *item = (x, v);
                }
            }
        }
    }
    res
}

/// Multi-start Nelder–Mead on the penalty objective.
///
/// Start 0 is the zero control; the others are uniform in the decision box,
/// drawn from per-start streams of the seed. The returned candidate is the
/// best by (feasibility, cost, objective, start index).
pub fn solve_mayer(problem: &MayerProblem, options: &OptimizerOptions) -> Result<SolveReport, MayerError> {
    problem.validate()?;
    options.validate()?;
    let results: Vec<StartResult> = if options.parallel {
        (0..options.starts)
            .into_par_iter()
            .map(|s| run_start(problem, options, s))
            .collect()
    } else {
        (0..options.starts).map(|s| run_start(problem, options, s)).collect()
    };

    let mut trace = Vec::new();
    let mut evaluations = 0;
    let mut chosen: Option<(usize, Evaluation)> = None;
    let mut last_error = None;
    for (s, r) in results.iter().enumerate() {
        evaluations += r.evaluations;
        let prev = trace.last().copied().unwrap_or(f64::INFINITY);
        trace.extend(r.trace.iter().map(|v| prev.min(*v)));
        if let Some(e) = r.best {
            if chosen.map_or(true, |(_, c)| e.ranks_before(&c)) {
                chosen = Some((s, e));
            }
        }
        if r.last_error.is_some() {
            last_error = r.last_error.clone();
        }
    }
    let Some((start, eval)) = chosen else {
        return Err(MayerError::NoCandidate(
            last_error.unwrap_or(SolveError::Grid("no evaluations".into())),
        ));
    };
    let trajectory = simulate_decision(problem, &results[start].best_z, options.blocks, SolveOptions::default())?;
    let schedule = match &trajectory.selection {
        Selection::Ordinary(s) => s.clone(),
        Selection::Relaxed(_) => unreachable!("policy solves are ordinary"),
    };
    Ok(SolveReport {
        seed: options.seed,
        schedule,
        trajectory,
        cost: eval.cost,
        objective: eval.objective,
        max_lambda: eval.max_lambda,
        terminal_distance: eval.terminal_distance,
        feasible: eval.feasible,
        start,
        evaluations,
        trace,
    })
}

/// Cost of the all-zero control, for baseline comparisons.
pub fn zero_control_evaluation(problem: &MayerProblem, options: &OptimizerOptions) -> Result<(Evaluation, TrajectoryBundle), MayerError> {
    let z = vec![0.0; problem.system.control_dim()];
    let bundle = simulate_decision(problem, &z, 1, SolveOptions::default())?;
    Ok((evaluate_bundle(problem, &bundle, options), bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inclusion::{verify_round_trip, ClosureSystem};
    use proptest::prelude::*;

    fn ball(c: &[f64], r: f64) -> RegionSpec {
        RegionSpec::Ball { center: c.to_vec(), radius: r }
    }

    #[test]
    fn region_distances() {
        let b = RegionSpec::Box { lower: vec![0.0, 0.0], upper: vec![1.0, 1.0] };
        assert_eq!(b.distance(&[0.5, 0.5]), 0.0);
        assert!((b.distance(&[4.0, 5.0]) - 5.0).abs() < 1e-15);
        let h = RegionSpec::HalfSpace { normal: vec![3.0, 4.0], offset: 5.0 };
        assert!((h.distance(&[3.0, 4.0]) - 4.0).abs() < 1e-15);
        assert_eq!(h.distance(&[0.0, 0.0]), 0.0);
        let u = RegionSpec::Union { parts: vec![ball(&[0.0, 0.0], 1.0), ball(&[5.0, 0.0], 1.0)] };
        assert!((u.distance(&[3.5, 0.0]) - 0.5).abs() < 1e-15);
        assert!(u.validate(2).is_ok());
        assert!(RegionSpec::Union { parts: vec![] }.validate(2).is_err());
        assert!(ball(&[0.0], -1.0).validate(1).is_err());
    }

    #[test]
    fn lambda_examples() {
        let h = RegionSpec::Box { lower: vec![-1.0, -1.0], upper: vec![1.0, 1.0] };
        let inside = DiscreteMeasure::uniform(vec![vec![0.0, 0.5], vec![-0.9, 0.9]]).unwrap();
        assert_eq!(lambda_constraint(&inside, &h), 0.0);
        let d = DiscreteMeasure::dirac(vec![3.0, 0.0]).unwrap();
        assert_eq!(lambda_constraint(&d, &h), 2.0);
        let mixed = DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![2.0, 2.0], vec![-1.0, 4.0]], vec![0.5, 0.25, 0.25]).unwrap();
        let oracle = 0.25 * 2.0f64.sqrt() + 0.25 * 3.0;
        assert!((lambda_constraint(&mixed, &h) - oracle).abs() < 1e-15);
    }

    #[test]
    fn cost_examples() {
        let s = ball(&[0.0, 0.0], 1.0);
        let all_in = DiscreteMeasure::uniform(vec![vec![0.1, 0.0], vec![0.0, -0.5]]).unwrap();
        assert_eq!(evaluate_cost(&CostSpec::IndicatorFraction, &all_in, &s), -1.0);
        let far = DiscreteMeasure::uniform(vec![vec![5.0, 0.0], vec![0.0, 7.0]]).unwrap();
        assert_eq!(evaluate_cost(&CostSpec::Mollified { width: 0.5 }, &far, &s), 0.0);
        let half = DiscreteMeasure::uniform(vec![vec![0.1, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(evaluate_cost(&CostSpec::IndicatorFraction, &half, &s), -0.5);
        assert!(CostSpec::Mollified { width: 0.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn mollified_cost_gap_bounded_by_boundary_layer(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..12),
            width in 0.01f64..1.0,
        ) {
            let mu = DiscreteMeasure::uniform(pts.iter().map(|(a, b)| vec![*a, *b]).collect()).unwrap();
            let s = ball(&[0.2, -0.1], 0.8);
            let c0 = evaluate_cost(&CostSpec::IndicatorFraction, &mu, &s);
            let ce = evaluate_cost(&CostSpec::Mollified { width }, &mu, &s);
            prop_assert!((ce - c0).abs() <= boundary_layer_mass(&mu, &s, width) + 1e-15);
        }

        #[test]
        fn ranking_is_total(a in any::<bool>(), b in any::<bool>(), ca in -1.0f64..0.0, cb in -1.0f64..0.0) {
            let ea = Evaluation { cost: ca, max_lambda: 0.0, terminal_distance: 0.0, feasible: a, objective: ca };
            let eb = Evaluation { cost: cb, max_lambda: 0.0, terminal_distance: 0.0, feasible: b, objective: cb };
            prop_assert!(!(ea.ranks_before(&eb) && eb.ranks_before(&ea)));
            if a && !b { prop_assert!(ea.ranks_before(&eb)); }
        }
    }

    fn zero_problem() -> MayerProblem {
        let sys = ClosureSystem::new(2, ControlSetSpec::Box(vec![1.0, 1.0]), |_, _, _, _, out| out.fill(0.0));
        let mu0 = DiscreteMeasure::uniform(vec![vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        MayerProblem::new(Arc::new(sys), grid, mu0, ball(&[0.0, 0.0], 0.5), CostSpec::IndicatorFraction).unwrap()
    }

    #[test]
    fn zero_dynamics_cost_is_initial_cost() {
        let p = zero_problem();
        let opts = OptimizerOptions { starts: 3, max_evals: 20, blocks: 2, parallel: false, ..Default::default() };
        let rep = solve_mayer(&p, &opts).unwrap();
        assert_eq!(rep.cost, evaluate_cost(&CostSpec::IndicatorFraction, &p.mu0, &p.target));
        assert_eq!(rep.cost, -0.5);
    }

    fn translation_problem() -> MayerProblem {
        let sys = ClosureSystem::translation(2, ControlSetSpec::Box(vec![1.0, 1.0]));
        let mu0 = DiscreteMeasure::dirac(vec![0.0, 0.0]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let mut p = MayerProblem::new(Arc::new(sys), grid, mu0, ball(&[0.6, 0.4], 0.1), CostSpec::IndicatorFraction).unwrap();
        p.running = Some(RunningConstraint {
            region: RegionSpec::Box { lower: vec![-2.0, -2.0], upper: vec![2.0, 2.0] },
            tolerance: 0.0,
        });
        p
    }

    #[test]
    fn translation_reaches_target() {
        let p = translation_problem();
        let opts = OptimizerOptions { starts: 4, max_evals: 80, blocks: 1, parallel: false, ..Default::default() };
        let rep = solve_mayer(&p, &opts).unwrap();
        assert!((rep.cost + 1.0).abs() <= 1e-3, "{rep:?}");
        assert!(rep.feasible);
        assert!(rep.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(verify_round_trip(p.system.as_ref(), &rep.trajectory).unwrap().ok);
        assert!(check_admissibility(&rep.trajectory, &p).admissible);
    }

    #[test]
    fn optimizer_is_deterministic() {
        let p = translation_problem();
        let opts = OptimizerOptions { starts: 3, max_evals: 30, blocks: 2, ..Default::default() };
        let a = solve_mayer(&p, &opts).unwrap();
        let b = solve_mayer(&p, &OptimizerOptions { parallel: false, ..opts }).unwrap();
        assert_eq!(a.schedule, b.schedule);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn admissibility_examples() {
        let p = zero_problem();
        let mut p = p;
        p.running = Some(RunningConstraint {
            region: RegionSpec::Box { lower: vec![-1.0, -1.0], upper: vec![3.0, 1.0] },
            tolerance: 0.0,
        });
        p.terminal = Some(RegionSpec::Box { lower: vec![-1.0, -1.0], upper: vec![3.0, 1.0] });
        let b = simulate_decision(&p, &[0.0, 0.0], 1, SolveOptions::default()).unwrap();
        assert!(check_admissibility(&b, &p).admissible);

        let t = translation_problem();
        let mut t = t;
        t.running = Some(RunningConstraint {
            region: RegionSpec::Box { lower: vec![-1.0, -1.0], upper: vec![0.5, 1.0] },
            tolerance: 0.0,
        });
        let b = simulate_decision(&t, &[1.0, 0.0], 1, SolveOptions::default()).unwrap();
        let rep = check_admissibility(&b, &t);
        assert!(!rep.admissible);
        // the Dirac leaves x ≤ 0.5 right after t = 0.5
        assert!((rep.first_violation.unwrap() - 0.6).abs() < 1e-12);
        assert!(rep.control_violations.is_empty());
    }

    #[test]
    fn clipping_keeps_controls_admissible() {
        let t = translation_problem();
        let b = simulate_decision(&t, &[5.0, -3.0], 1, SolveOptions::default()).unwrap();
        assert!(b.inadmissible.is_empty());
        match &b.selection {
            Selection::Ordinary(s) => assert_eq!(s.values[0], vec![1.0, -1.0]),
            _ => unreachable!(),
        }
    }
}
