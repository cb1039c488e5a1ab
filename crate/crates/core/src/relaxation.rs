//! Convexified dynamics over a finite control family, chattering
//! realizations, relaxation gaps, and value functions.
//!
//! A [`RelaxedControl`] assigns each grid interval a probability vector over a
//! fixed list of control atoms; the driving field is the convex combination
//! `Σ λ_k v(t, μ, u_k)`. [`chattering_schedule`] turns it back into an
//! ordinary schedule by letting each atom act on a contiguous block of
//! sub-intervals proportional to its weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inclusion::{
    integrate, ControlSchedule, ControlSystem, Selection, SolveError, SolveOptions, TimeGrid, TrajectoryBundle,
    ADMISSIBILITY_TOL,
};
use crate::mayer::MayerProblem;
use crate::measures::DiscreteMeasure;
use crate::transport::w1_distance;

/// Tolerance on per-interval weight sums.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxationError {
    #[error("relaxed control needs at least one atom")]
    NoAtoms,
    #[error("control atoms have inconsistent dimensions")]
    AtomDimension,
    #[error("interval {interval}: expected {expected} weights, found {found}")]
    WeightCount {
        interval: usize,
        expected: usize,
        found: usize,
    },
    #[error("interval {interval}: weights must be finite and nonnegative")]
    BadWeight { interval: usize },
    #[error("interval {interval}: weights sum to {sum}, expected 1")]
    WeightSum { interval: usize, sum: f64 },
    #[error("relaxed control has {found} intervals, grid has {expected}")]
    IntervalCount { expected: usize, found: usize },
    #[error("subdivision must be at least 1")]
    Subdivision,
    #[error("empty search space: {0}")]
    EmptySearch(&'static str),
    #[error("start time {tau} is outside [{t0}, {t_end}]")]
    StartTime { tau: f64, t0: f64, t_end: f64 },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Piecewise-constant convex weights over a fixed atom list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxedControl {
    pub atoms: Vec<Vec<f64>>,
    /// `weights[i][k]` is the weight of atom `k` on interval `i`.
    pub weights: Vec<Vec<f64>>,
}

impl RelaxedControl {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) -> Result<Self, RelaxationError> {
        let r = RelaxedControl { atoms, weights };
        r.validate()?;
        Ok(r)
    }

    /// Same weights on every interval.
    pub fn constant(atoms: Vec<Vec<f64>>, lambda: Vec<f64>, intervals: usize) -> Result<Self, RelaxationError> {
        Self::new(atoms, vec![lambda; intervals])
    }

    /// The vertex relaxed control that puts full weight on `schedule`'s values.
    pub fn from_schedule(schedule: &ControlSchedule) -> Self {
        let mut atoms: Vec<Vec<f64>> = Vec::new();
        let mut idx = Vec::with_capacity(schedule.len());
        for u in &schedule.values {
            let k = match atoms.iter().position(|a| a == u) {
                Some(k) => k,
                None => {
                    atoms.push(u.clone());
                    atoms.len() - 1
                }
            };
            idx.push(k);
        }
        let weights = idx
            .into_iter()
            .map(|k| {
                let mut w = vec![0.0; atoms.len()];
                w[k] = 1.0;
                w
            })
            .collect();
        RelaxedControl { atoms, weights }
    }

    pub fn validate(&self) -> Result<(), RelaxationError> {
        let Some(first) = self.atoms.first() else {
            return Err(RelaxationError::NoAtoms);
        };
        if self.atoms.iter().any(|a| a.len() != first.len()) {
            return Err(RelaxationError::AtomDimension);
        }
        for (i, w) in self.weights.iter().enumerate() {
            if w.len() != self.atoms.len() {
                return Err(RelaxationError::WeightCount {
                    interval: i,
                    expected: self.atoms.len(),
                    found: w.len(),
                });
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(RelaxationError::BadWeight { interval: i });
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(RelaxationError::WeightSum { interval: i, sum });
            }
        }
        Ok(())
    }

    pub fn intervals(&self) -> usize {
        self.weights.len()
    }

    /// Repeats each interval's weights `n` times.
    pub fn refine(&self, n: usize) -> Self {
        RelaxedControl {
            atoms: self.atoms.clone(),
            weights: self
                .weights
                .iter()
                .flat_map(|w| std::iter::repeat(w.clone()).take(n))
                .collect(),
        }
    }

    pub(crate) fn mix(&self, interval: usize) -> Vec<(f64, Vec<f64>)> {
        self.weights[interval]
            .iter()
            .zip(&self.atoms)
            .map(|(l, u)| (*l, u.clone()))
            .collect()
    }
}

/// Solves with the convex-combination field of each interval.
///
/// An interval is flagged inadmissible when an atom with positive weight lies
/// outside `U(t_k, μ(t_k))`.
pub fn solve_relaxed(
    system: &dyn ControlSystem,
    mu0: &DiscreteMeasure,
    relaxed: &RelaxedControl,
    grid: &TimeGrid,
) -> Result<TrajectoryBundle, RelaxationError> {
    Ok(solve_relaxed_with(system, mu0, relaxed, grid, SolveOptions::default())?)
}

pub(crate) fn solve_relaxed_with(
    system: &dyn ControlSystem,
    mu0: &DiscreteMeasure,
    relaxed: &RelaxedControl,
    grid: &TimeGrid,
    opts: SolveOptions,
) -> Result<TrajectoryBundle, SolveError> {
    grid.validate()?;
    if relaxed.intervals() != grid.steps {
        return Err(SolveError::ScheduleLength {
            expected: grid.steps,
            found: relaxed.intervals(),
        });
    }
    let (positions, aux, field_left, field_right, inadmissible, _) = integrate(system, mu0, grid, opts, |k, _, _, set| {
        let mix = relaxed.mix(k);
        let ok = mix
            .iter()
            .all(|(l, u)| *l == 0.0 || set.contains(u, ADMISSIBILITY_TOL));
        (mix, ok)
    })?;
    Ok(TrajectoryBundle {
        grid: *grid,
        dim: mu0.dim(),
        weights: mu0.weights().to_vec(),
        positions,
        aux,
        selection: Selection::Relaxed(relaxed.clone()),
        field_left,
        field_right,
        inadmissible,
    })
}

/// Splits `n` sub-intervals among the weights by largest remainder.
///
/// Each atom first gets `floor(λ_k n)`; the leftover sub-intervals go to the
/// largest fractional parts, ties broken by atom index. The result sums to `n`.
pub fn block_lengths(lambda: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = lambda.iter().map(|l| l * n as f64).collect();
    let mut blocks: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor().max(0.0) as usize).collect();
    let mut assigned: usize = blocks.iter().sum();
    let mut order: Vec<usize> = (0..lambda.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - blocks[a] as f64;
        let rb = quotas[b] - blocks[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(n.saturating_sub(assigned)) {
        blocks[k] += 1;
        assigned += 1;
    }
    while assigned > n {
        let k = *order.iter().rev().find(|&&k| blocks[k] > 0).expect("positive block");
        blocks[k] -= 1;
        assigned -= 1;
    }
    blocks
}

/// Ordinary schedule on `grid.refine(n)` realizing `relaxed` by contiguous
/// per-atom blocks inside each interval of `grid`.
pub fn chattering_schedule(
    relaxed: &RelaxedControl,
    grid: &TimeGrid,
    n: usize,
) -> Result<ControlSchedule, RelaxationError> {
    if n < 1 {
        return Err(RelaxationError::Subdivision);
    }
    relaxed.validate()?;
    if relaxed.intervals() != grid.steps {
        return Err(RelaxationError::IntervalCount {
            expected: grid.steps,
            found: relaxed.intervals(),
        });
    }
    let mut values = Vec::with_capacity(grid.steps * n);
    for w in &relaxed.weights {
        for (k, len) in block_lengths(w, n).into_iter().enumerate() {
            values.extend(std::iter::repeat(relaxed.atoms[k].clone()).take(len));
        }
    }
    Ok(ControlSchedule { values })
}

/// Relaxed and chattering trajectories compared on a common fine grid.
#[derive(Debug, Clone)]
pub struct GapRun {
    pub cells: usize,
    pub resolution: usize,
    /// `max_t W1(relaxed(t), chattering(t))` over the fine grid.
    pub gap: f64,
    pub relaxed: TrajectoryBundle,
    pub chattering: TrajectoryBundle,
}

/// Measures how well chattering reproduces a relaxed trajectory.
///
/// Every interval of `grid` is cut into `cells` equal cells (the subdivision
/// of the approximation argument); inside each cell the relaxed weights are
/// realized by [`chattering_schedule`] with `resolution` sub-steps. Both
/// trajectories run on `grid.refine(cells * resolution)` and the gap is the
/// largest exact W1 distance over that grid.
pub fn relaxation_gap(
    system: &dyn ControlSystem,
    mu0: &DiscreteMeasure,
    relaxed: &RelaxedControl,
    grid: &TimeGrid,
    cells: usize,
    resolution: usize,
) -> Result<GapRun, RelaxationError> {
    if cells < 1 || resolution < 1 {
        return Err(RelaxationError::Subdivision);
    }
    let cell_grid = grid.refine(cells);
    let cell_control = relaxed.refine(cells);
    let schedule = chattering_schedule(&cell_control, &cell_grid, resolution)?;
    let fine = cell_grid.refine(resolution);
    let opts = SolveOptions { record_fields: false };
    let relaxed_run = solve_relaxed_with(system, mu0, &cell_control.refine(resolution), &fine, opts)?;
    let chattering = crate::inclusion::solve_with(system, mu0, &schedule, &fine, opts)?;
    let mut gap: f64 = 0.0;
    for k in 0..=fine.steps {
        if relaxed_run.positions[k] == chattering.positions[k] {
            continue;
        }
        let w = w1_distance(&relaxed_run.measure(k), &chattering.measure(k)).map_err(SolveError::from)?;
        gap = gap.max(w);
    }
    Ok(GapRun {
        cells,
        resolution,
        gap,
        relaxed: relaxed_run,
        chattering,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    Ordinary,
    Relaxed,
}

/// Finite search space for value functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    /// Control atoms available on every interval.
    pub atoms: Vec<Vec<f64>>,
    /// Decision intervals on `[τ, T]`.
    pub intervals: usize,
    /// Integration steps per decision interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Denominator of the relaxed weight grid.
    #[serde(default = "default_denominator")]
    pub denominator: usize,
}

fn default_substeps() -> usize {
    10
}

fn default_denominator() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueResult {
    pub mode: ValueMode,
    pub value: f64,
    pub argmin: Selection,
    pub candidates: usize,
}

/// All weight vectors with entries in `{0, 1/q, ..., 1}` summing to one,
/// pure atom 0 first.
pub fn simplex_grid(k: usize, q: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in (0..=left).rev() {
            prefix.push(c);
            rec(k - 1, left - c, prefix, out);
            prefix.pop();
        }
    }
    if k == 0 || q == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    rec(k, q, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|c| c.into_iter().map(|x| x as f64 / q as f64).collect())
        .collect()
}

fn digits(mut index: usize, base: usize, len: usize) -> Vec<usize> {
    let mut d = vec![0; len];
    for slot in d.iter_mut().rev() {
        *slot = index % base;
        index /= base;
    }
    d
}

/// Minimum of the terminal cost over the finite search space, started from
/// `mu_tau` at time `tau` and integrated to the problem horizon. State
/// constraints are not imposed. Candidates are enumerated exhaustively and
/// the first minimizer in enumeration order wins.
pub fn value_function(
    problem: &MayerProblem,
    tau: f64,
    mu_tau: &DiscreteMeasure,
    mode: ValueMode,
    search: &SearchSpec,
) -> Result<ValueResult, RelaxationError> {
    let t_end = problem.grid.t_end;
    if !(tau >= problem.grid.t0 && tau <= t_end) {
        return Err(RelaxationError::StartTime {
            tau,
            t0: problem.grid.t0,
            t_end,
        });
    }
    if search.atoms.is_empty() {
        return Err(RelaxationError::EmptySearch("no control atoms"));
    }
    if search.atoms.iter().any(|a| a.len() != search.atoms[0].len()) {
        return Err(RelaxationError::AtomDimension);
    }
    if tau == t_end {
        let empty = Selection::Ordinary(ControlSchedule::new(Vec::new()));
        return Ok(ValueResult {
            mode,
            value: problem.terminal_cost(mu_tau),
            argmin: empty,
            candidates: 1,
        });
    }
    if search.intervals == 0 || search.substeps == 0 {
        return Err(RelaxationError::EmptySearch("no decision intervals"));
    }
    let grid = TimeGrid::new(tau, t_end, search.intervals * search.substeps)?;
    let k = search.atoms.len();
    let choices: Vec<Vec<f64>> = match mode {
        ValueMode::Ordinary => (0..k)
            .map(|i| {
                let mut w = vec![0.0; k];
                w[i] = 1.0;
                w
            })
            .collect(),
        ValueMode::Relaxed => {
            if search.denominator == 0 {
                return Err(RelaxationError::EmptySearch("zero simplex denominator"));
            }
            simplex_grid(k, search.denominator)
        }
    };
    let per = choices.len();
    let total = per
        .checked_pow(search.intervals as u32)
        .ok_or(RelaxationError::EmptySearch("search space too large"))?;
    let opts = SolveOptions { record_fields: false };
    let system = problem.system.as_ref();

    let candidate = |index: usize| -> Selection {
        let pick = digits(index, per, search.intervals);
        match mode {
            ValueMode::Ordinary => Selection::Ordinary(ControlSchedule {
                values: pick
                    .iter()
                    .flat_map(|&c| std::iter::repeat(search.atoms[c].clone()).take(search.substeps))
                    .collect(),
            }),
            ValueMode::Relaxed => Selection::Relaxed(RelaxedControl {
                atoms: search.atoms.clone(),
                weights: pick
                    .iter()
                    .flat_map(|&c| std::iter::repeat(choices[c].clone()).take(search.substeps))
                    .collect(),
            }),
        }
    };
    let evaluate = |index: usize| -> Result<f64, SolveError> {
        let bundle = match candidate(index) {
            Selection::Ordinary(s) => crate::inclusion::solve_with(system, mu_tau, &s, &grid, opts)?,
            Selection::Relaxed(r) => solve_relaxed_with(system, mu_tau, &r, &grid, opts)?,
        };
        Ok(problem.terminal_cost(&bundle.final_measure()))
    };
    let values: Vec<Result<f64, SolveError>> = (0..total).into_par_iter().map(evaluate).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        let v = v?;
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    let (index, value) = best.ok_or(RelaxationError::EmptySearch("no candidates"))?;
    Ok(ValueResult {
        mode,
        value,
        argmin: candidate(index),
        candidates: total,
    })
}
