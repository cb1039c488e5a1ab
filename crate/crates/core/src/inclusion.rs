//! Controlled non-local continuity equations solved along characteristics.
//!
//! A [`ControlSystem`] supplies the velocity `v(t, μ, u)(x)` and the
//! admissible control set `U(t, μ)`. The measure curve is represented by the
//! same weighted atoms at every time; each atom follows
//! `ẋ_i = v(t, μ(t), u(t))(x_i)` and the whole ensemble (plus any auxiliary
//! state such as leader positions) is advanced by one classical RK4 step per
//! grid interval. The non-local term is re-evaluated at every RK4 stage from
//! the stage ensemble, so the scheme is fourth order for the coupled system.
//!
//! A [`TrajectoryBundle`] is a discrete trajectory-selection pair: the measure
//! curve on the grid together with the piecewise-constant selection that drove
//! it. Re-solving from the stored selection reproduces the curve bit-for-bit
//! (see [`verify_round_trip`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{dist, norm, support_radius, DiscreteMeasure, MeasureError};
use crate::relaxation::RelaxedControl;
use crate::transport::{w1_distance, TransportError};

/// Membership tolerance used when flagging inadmissible controls.
pub const ADMISSIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("schedule has {found} intervals, grid has {expected}")]
    ScheduleLength { expected: usize, found: usize },
    #[error("control {index} has dimension {found}, system expects {expected}")]
    ControlDimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("measure dimension {found} does not match system dimension {expected}")]
    StateDimension { expected: usize, found: usize },
    #[error("non-finite velocity at t = {time} for particle {particle}")]
    NonFinite { time: f64, particle: usize },
    #[error("non-finite auxiliary rate at t = {time}")]
    NonFiniteAux { time: f64 },
    #[error("negative input `{0}`")]
    Negative(&'static str),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Uniform grid `t_k = t0 + k (T - t0) / steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self, SolveError> {
        let g = TimeGrid { t0, t_end, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.t0.is_finite() && self.t_end.is_finite() && self.t0 < self.t_end) {
            return Err(SolveError::Grid(format!("need t0 < T, got {} and {}", self.t0, self.t_end)));
        }
        if self.steps == 0 {
            return Err(SolveError::Grid("need at least one step".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            return self.t_end;
        }
        self.t0 + (self.t_end - self.t0) * (k as f64 / self.steps as f64)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Same horizon with `n` sub-intervals per interval.
    pub fn refine(&self, n: usize) -> Self {
        TimeGrid {
            steps: self.steps * n,
            ..*self
        }
    }
}

/// Admissible control set, either finite or a product of symmetric bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSetSpec {
    /// `{u_1, ..., u_K}`.
    Atoms(Vec<Vec<f64>>),
    /// `|u_i| ≤ b_i` componentwise.
    Box(Vec<f64>),
    /// Consecutive blocks of length `block`, block `i` in the ball of radius `radii[i]`.
    Balls { block: usize, radii: Vec<f64> },
}

impl ControlSetSpec {
    pub fn dim(&self) -> usize {
        match self {
            ControlSetSpec::Atoms(a) => a.first().map_or(0, Vec::len),
            ControlSetSpec::Box(b) => b.len(),
            ControlSetSpec::Balls { block, radii } => block * radii.len(),
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            ControlSetSpec::Atoms(a) => !a.is_empty() && a.iter().all(|u| u.len() == a[0].len()),
            ControlSetSpec::Box(b) => b.iter().all(|&x| x >= 0.0),
            ControlSetSpec::Balls { block, radii } => *block > 0 && radii.iter().all(|&r| r >= 0.0),
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match self {
            ControlSetSpec::Atoms(a) => a.iter().any(|x| dist(x, u) <= tol),
            ControlSetSpec::Box(b) => u.iter().zip(b).all(|(x, b)| x.abs() <= b + tol),
            ControlSetSpec::Balls { block, radii } => u
                .chunks(*block)
                .zip(radii)
                .all(|(c, r)| norm(c) <= r + tol),
        }
    }

    /// Nearest admissible point (nearest atom, componentwise clip, or radial
    /// shrink per block). Points already inside are returned unchanged.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlSetSpec::Atoms(a) => a
                .iter()
                .min_by(|x, y| dist(x, u).total_cmp(&dist(y, u)))
                .cloned()
                .unwrap_or_default(),
            ControlSetSpec::Box(b) => u.iter().zip(b).map(|(x, b)| x.clamp(-b, *b)).collect(),
            ControlSetSpec::Balls { block, radii } => {
                let mut out = u.to_vec();
                for (c, r) in out.chunks_mut(*block).zip(radii) {
                    let n = norm(c);
                    if n > *r {
                        let s = if n > 0.0 { r / n } else { 0.0 };
                        c.iter_mut().for_each(|x| *x *= s);
                    }
                }
                out
            }
        }
    }
}

/// Read-only view of the particle ensemble at one (stage) time.
#[derive(Debug, Clone, Copy)]
pub struct ParticleState<'a> {
    pub dim: usize,
    pub weights: &'a [f64],
    /// Flat atom-major coordinates.
    pub points: &'a [f64],
    pub aux: &'a [f64],
}

impl<'a> ParticleState<'a> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, &'a [f64])> + 'a {
        let dim = self.dim;
        self.weights.iter().copied().zip(self.points.chunks_exact(dim))
    }

    /// Owned copy as a measure.
    pub fn measure(&self) -> DiscreteMeasure {
        DiscreteMeasure::from_flat(self.dim, self.points.to_vec(), self.weights.to_vec())
            .expect("ensemble of a valid measure")
    }
}

/// Controlled non-local dynamics `v(t, μ, u)` with admissible sets `U(t, μ)`,
/// optionally coupled to a finite-dimensional auxiliary state.
pub trait ControlSystem: Sync {
    /// Dimension of the space the measure lives on.
    fn dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    fn aux_dim(&self) -> usize {
        0
    }

    /// Auxiliary state at the initial time.
    fn initial_aux(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Writes `v(t, μ, u)(x)` into `out`.
    fn field_at(&self, t: f64, state: &ParticleState<'_>, u: &[f64], x: &[f64], out: &mut [f64]);

    /// Writes the auxiliary rate into `out`.
    fn aux_rate(&self, _t: f64, _state: &ParticleState<'_>, _u: &[f64], _out: &mut [f64]) {}

    fn control_set(&self, t: f64, state: &ParticleState<'_>) -> ControlSetSpec;

    /// Velocity of every atom. The default evaluates [`ControlSystem::field_at`] atom by atom.
    fn velocities(&self, t: f64, state: &ParticleState<'_>, u: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (i, x) in state.points.chunks_exact(d).enumerate() {
            self.field_at(t, state, u, x, &mut out[i * d..(i + 1) * d]);
        }
    }
}

type FieldFn = dyn Fn(f64, &ParticleState<'_>, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// A [`ControlSystem`] built from a closure and a fixed control set.
pub struct ClosureSystem {
    dim: usize,
    controls: ControlSetSpec,
    field: Box<FieldFn>,
}

impl ClosureSystem {
    pub fn new<F>(dim: usize, controls: ControlSetSpec, field: F) -> Self
    where
        F: Fn(f64, &ParticleState<'_>, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ClosureSystem {
            dim,
            controls,
            field: Box::new(field),
        }
    }

    /// `v(t, μ, u)(x) = u`.
    pub fn translation(dim: usize, controls: ControlSetSpec) -> Self {
        Self::new(dim, controls, |_, _, u, _, out| out.copy_from_slice(u))
    }

    /// Uncontrolled `v(x) = a x`.
    pub fn linear(dim: usize, a: f64) -> Self {
        Self::new(dim, ControlSetSpec::Box(vec![0.0; 1]), move |_, _, _, x, out| {
            for (o, c) in out.iter_mut().zip(x) {
                *o = a * c;
            }
        })
    }
}

impl ControlSystem for ClosureSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn control_dim(&self) -> usize {
        self.controls.dim()
    }

    fn field_at(&self, t: f64, state: &ParticleState<'_>, u: &[f64], x: &[f64], out: &mut [f64]) {
        (self.field)(t, state, u, x, out)
    }

    fn control_set(&self, _t: f64, _state: &ParticleState<'_>) -> ControlSetSpec {
        self.controls.clone()
    }
}

/// Piecewise-constant control: `values[k]` acts on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub values: Vec<Vec<f64>>,
}

impl ControlSchedule {
    pub fn new(values: Vec<Vec<f64>>) -> Self {
        ControlSchedule { values }
    }

    pub fn constant(u: Vec<f64>, steps: usize) -> Self {
        ControlSchedule {
            values: vec![u; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The selection that generated a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Ordinary(ControlSchedule),
    Relaxed(RelaxedControl),
}

/// Discrete trajectory-selection pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryBundle {
    pub grid: TimeGrid,
    pub dim: usize,
    pub weights: Vec<f64>,
    /// `steps + 1` flat coordinate buffers.
    pub positions: Vec<Vec<f64>>,
    /// `steps + 1` auxiliary states.
    pub aux: Vec<Vec<f64>>,
    pub selection: Selection,
    /// Atom velocities at `(t_k, μ(t_k))` under the control of interval `k`.
    pub field_left: Vec<Vec<f64>>,
    /// Atom velocities at `(t_{k+1}, μ(t_{k+1}))` under the control of interval `k`.
    pub field_right: Vec<Vec<f64>>,
    /// Intervals whose control was outside `U(t_k, μ(t_k))`.
    pub inadmissible: Vec<usize>,
}

impl TrajectoryBundle {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn measure(&self, k: usize) -> DiscreteMeasure {
        DiscreteMeasure::from_flat(self.dim, self.positions[k].clone(), self.weights.clone())
            .expect("bundle holds valid measures")
    }

    pub fn state(&self, k: usize) -> ParticleState<'_> {
        ParticleState {
            dim: self.dim,
            weights: &self.weights,
            points: &self.positions[k],
            aux: &self.aux[k],
        }
    }

    pub fn final_measure(&self) -> DiscreteMeasure {
        self.measure(self.steps())
    }

    pub fn has_fields(&self) -> bool {
        self.field_left.len() == self.steps() && self.field_right.len() == self.steps()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Store per-step velocity snapshots (needed by [`weak_form_residual`]).
    pub record_fields: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { record_fields: true }
    }
}

/// Per-interval control: a convex combination of controls.
pub(crate) type Mix = Vec<(f64, Vec<f64>)>;

struct Workspace {
    n_pts: usize,
    tmp: Vec<f64>,
}

impl Workspace {
    /// `out = Σ λ_j f(t, y, u_j)` over the mixture.
    fn rhs(
        &mut self,
        system: &dyn ControlSystem,
        t: f64,
        weights: &[f64],
        y: &[f64],
        mix: &[(f64, Vec<f64>)],
        out: &mut [f64],
    ) -> Result<(), SolveError> {
        let d = system.dim();
        let state = ParticleState {
            dim: d,
            weights,
            points: &y[..self.n_pts],
            aux: &y[self.n_pts..],
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        for (lam, u) in mix {
            if *lam == 0.0 {
                continue;
            }
            self.tmp.iter_mut().for_each(|o| *o = 0.0);
            let (tp, ta) = self.tmp.split_at_mut(self.n_pts);
            system.velocities(t, &state, u, tp);
            system.aux_rate(t, &state, u, ta);
            for (o, v) in out.iter_mut().zip(&self.tmp) {
                *o += lam * v;
            }
        }
        if let Some(bad) = out[..self.n_pts].iter().position(|c| !c.is_finite()) {
            return Err(SolveError::NonFinite {
                time: t,
                particle: bad / d,
            });
        }
        if out[self.n_pts..].iter().any(|c| !c.is_finite()) {
            return Err(SolveError::NonFiniteAux { time: t });
        }
        Ok(())
    }
}

/// Core RK4 loop. `control` returns the mixture for interval `k` given the
/// left-endpoint state and control set; `admissible` decides which intervals
/// are flagged.
pub(crate) fn integrate<C>(
    system: &dyn ControlSystem,
    mu0: &DiscreteMeasure,
    grid: &TimeGrid,
    opts: SolveOptions,
    mut control: C,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<Mix>), SolveError>
where
    C: FnMut(usize, f64, &ParticleState<'_>, &ControlSetSpec) -> (Mix, bool),
{
    grid.validate()?;
    let d = system.dim();
    if mu0.dim() != d {
        return Err(SolveError::StateDimension {
            expected: d,
            found: mu0.dim(),
        });
    }
    let weights = mu0.weights();
    let n_pts = mu0.flat_points().len();
    let aux0 = system.initial_aux();
    let total = n_pts + aux0.len();
    let mut y: Vec<f64> = mu0.flat_points().to_vec();
    y.extend_from_slice(&aux0);

    let mut ws = Workspace {
        n_pts,
        tmp: vec![0.0; total],
    };
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; total], vec![0.0; total], vec![0.0; total], vec![0.0; total]);
    let mut stage = vec![0.0; total];

    let mut positions = Vec::with_capacity(grid.steps + 1);
    let mut aux = Vec::with_capacity(grid.steps + 1);
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut flagged = Vec::new();
    let mut mixes = Vec::with_capacity(grid.steps);
    positions.push(y[..n_pts].to_vec());
    aux.push(y[n_pts..].to_vec());

    let h = grid.dt();
    for k in 0..grid.steps {
        let t = grid.time(k);
        let state = ParticleState {
            dim: d,
            weights,
            points: &y[..n_pts],
            aux: &y[n_pts..],
        };
        let set = system.control_set(t, &state);
        let (mix, ok) = control(k, t, &state, &set);
        for (_, u) in &mix {
            if u.len() != system.control_dim() {
                return Err(SolveError::ControlDimension {
                    index: k,
                    expected: system.control_dim(),
                    found: u.len(),
                });
            }
        }
        if !ok {
            flagged.push(k);
        }

        ws.rhs(system, t, weights, &y, &mix, &mut k1)?;
        for i in 0..total {
            stage[i] = y[i] + 0.5 * h * k1[i];
        }
        ws.rhs(system, t + 0.5 * h, weights, &stage, &mix, &mut k2)?;
        for i in 0..total {
            stage[i] = y[i] + 0.5 * h * k2[i];
        }
        ws.rhs(system, t + 0.5 * h, weights, &stage, &mix, &mut k3)?;
        for i in 0..total {
            stage[i] = y[i] + h * k3[i];
        }
        ws.rhs(system, t + h, weights, &stage, &mix, &mut k4)?;
        for i in 0..total {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if opts.record_fields {
            left.push(k1[..n_pts].to_vec());
            let t1 = grid.time(k + 1);
            ws.rhs(system, t1, weights, &y, &mix, &mut k4)?;
            right.push(k4[..n_pts].to_vec());
        }
        positions.push(y[..n_pts].to_vec());
        aux.push(y[n_pts..].to_vec());
        mixes.push(mix);
    }
    Ok((positions, aux, left, right, flagged, mixes))
}

fn ordinary_bundle(
    mu0: &DiscreteMeasure,
    grid: &TimeGrid,
    parts: (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<Mix>),
) -> TrajectoryBundle {
    let (positions, aux, field_left, field_right, inadmissible, mixes) = parts;
    let values = mixes
        .into_iter()
        .map(|mut m| m.pop().map(|(_, u)| u).unwrap_or_default())
        .collect();
    TrajectoryBundle {
        grid: *grid,
        dim: mu0.dim(),
        weights: mu0.weights().to_vec(),
        positions,
        aux,
        selection: Selection::Ordinary(ControlSchedule { values }),
        field_left,
        field_right,
        inadmissible,
    }
}

/// Solves the controlled continuity equation driven by `schedule`.
///
/// Controls outside `U(t_k, μ(t_k))` are applied as given and listed in
/// [`TrajectoryBundle::inadmissible`].
pub fn solve(
    system: &dyn ControlSystem,
    mu0: &DiscreteMeasure,
    schedule: &ControlSchedule,
    grid: &TimeGrid,
) -> Result<TrajectoryBundle, SolveError> {
    solve_with(system, mu0, schedule, grid, SolveOptions::default())
}

pub fn solve_with(
    system: &dyn ControlSystem,
    mu0: &DiscreteMeasure,
    schedule: &ControlSchedule,
    grid: &TimeGrid,
    opts: SolveOptions,
) -> Result<TrajectoryBundle, SolveError> {
    grid.validate()?;
    if schedule.len() != grid.steps {
        return Err(SolveError::ScheduleLength {
            expected: grid.steps,
            found: schedule.len(),
        });
    }
    let parts = integrate(system, mu0, grid, opts, |k, _, _, set| {
        let u = schedule.values[k].clone();
        let ok = set.contains(&u, ADMISSIBILITY_TOL);
        (vec![(1.0, u)], ok)
    })?;
    Ok(ordinary_bundle(mu0, grid, parts))
}

/// Solves with a state-feedback rule: `policy(k, t_k, state, U(t_k, μ(t_k)))`
/// picks the control of interval `k`. The applied values are recorded as the
/// bundle's schedule, so [`verify_round_trip`] replays them exactly.
pub fn solve_with_policy<P>(
    system: &dyn ControlSystem,
    mu0: &DiscreteMeasure,
    grid: &TimeGrid,
    opts: SolveOptions,
    mut policy: P,
) -> Result<TrajectoryBundle, SolveError>
where
    P: FnMut(usize, f64, &ParticleState<'_>, &ControlSetSpec) -> Vec<f64>,
{
    let parts = integrate(system, mu0, grid, opts, |k, t, state, set| {
        let u = policy(k, t, state, set);
        let ok = set.contains(&u, ADMISSIBILITY_TOL);
        (vec![(1.0, u)], ok)
    })?;
    Ok(ordinary_bundle(mu0, grid, parts))
}

/// A priori support and speed bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriBounds {
    /// `R_r`: every atom stays in `B(0, R_r)`.
    pub radius: f64,
    /// `m_r`: constant bound on atom speeds, so `W1(μ(t), μ(s)) ≤ m_r (t - s)`.
    pub modulus: f64,
}

/// Grönwall envelope for fields with `|v(x)| ≤ m̄ (1 + |x| + M1(μ))` started
/// in `B(0, r)`. The radius `ρ` solves `ρ' = m̄ (1 + 2ρ)`, `ρ(t0) = r`:
/// `R_r = ((1 + 2r) e^{2 m̄ (T - t0)} - 1) / 2`, and `m_r = m̄ (1 + 2 R_r)`.
pub fn gronwall_bounds(r: f64, m_bar: f64, grid: &TimeGrid) -> Result<AprioriBounds, SolveError> {
    if !(r >= 0.0) {
        return Err(SolveError::Negative("r"));
    }
    if !(m_bar >= 0.0) {
        return Err(SolveError::Negative("m_bar"));
    }
    let horizon = grid.t_end - grid.t0;
    let radius = if m_bar == 0.0 {
        r
    } else {
        ((1.0 + 2.0 * r) * (2.0 * m_bar * horizon).exp() - 1.0) / 2.0
    };
    Ok(AprioriBounds {
        radius,
        modulus: m_bar * (1.0 + 2.0 * radius),
    })
}

/// Smooth compactly supported test function `φ(t, x)` with analytic derivatives.
pub trait TestFunction {
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn time_derivative(&self, t: f64, x: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// `φ(t, x) = p(t) (1 + a·(x - c)) β(|x - c|² / R²)` with the bump
/// `β(s) = exp(-1/(1 - s))` on `s < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBump {
    /// Coefficients of `p`, lowest degree first.
    pub time_poly: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
    pub slope: Vec<f64>,
}

impl PolyBump {
    fn poly(&self, t: f64) -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for c in self.time_poly.iter().rev() {
            dp = dp * t + p;
            p = p * t + c;
        }
        (p, dp)
    }

    fn spatial(&self, x: &[f64]) -> (f64, f64, f64) {
        let mut s = 0.0;
        let mut lin = 1.0;
        for k in 0..x.len() {
            let z = x[k] - self.center[k];
            s += z * z;
            lin += self.slope[k] * z;
        }
        s /= self.radius * self.radius;
        if s >= 1.0 {
            return (0.0, 0.0, lin);
        }
        let b = (-1.0 / (1.0 - s)).exp();
        let db = -b / ((1.0 - s) * (1.0 - s));
        (b, db, lin)
    }
}

impl TestFunction for PolyBump {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        let (b, _, lin) = self.spatial(x);
        self.poly(t).0 * lin * b
    }

    fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        let (b, _, lin) = self.spatial(x);
        self.poly(t).1 * lin * b
    }

    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (b, db, lin) = self.spatial(x);
        let p = self.poly(t).0;
        let r2 = self.radius * self.radius;
        for k in 0..x.len() {
            let z = x[k] - self.center[k];
            out[k] = p * (self.slope[k] * b + lin * db * 2.0 * z / r2);
        }
    }
}

/// Four polynomial-times-bump test functions centred at `center`.
pub fn test_function_library(center: &[f64], radius: f64) -> Vec<PolyBump> {
    let d = center.len();
    let tilt: Vec<f64> = (0..d).map(|k| if k % 2 == 0 { 0.7 } else { -0.4 }).collect();
    let tilt2: Vec<f64> = (0..d).map(|k| 0.3 * (k as f64 + 1.0)).collect();
    vec![
        PolyBump { time_poly: vec![1.0], center: center.to_vec(), radius, slope: vec![0.0; d] },
        PolyBump { time_poly: vec![1.0, 0.5], center: center.to_vec(), radius, slope: tilt.clone() },
        PolyBump { time_poly: vec![0.5, -1.0, 1.0], center: center.to_vec(), radius, slope: tilt2 },
        PolyBump { time_poly: vec![1.0, 0.0, 0.0, -0.8], center: center.to_vec(), radius: 0.8 * radius, slope: tilt },
    ]
}

/// Signed weak-form defect of a bundle against `φ`:
///
/// `∫ ∫ (∂_t φ + ⟨∇φ, v⟩) dμ(t) dt - (∫ φ(T) dμ(T) - ∫ φ(t0) dμ(t0))`
///
/// with the time integral by the trapezoid rule on each interval, using the
/// interval's own velocity snapshots at both endpoints, and exact sums over
/// atoms. The boundary terms vanish for test functions supported away from
/// the endpoints; keeping them allows time-independent `φ`.
pub fn weak_form_defect(bundle: &TrajectoryBundle, phi: &dyn TestFunction) -> f64 {
    assert!(bundle.has_fields(), "bundle was solved without field snapshots");
    let d = bundle.dim;
    let mut grad = vec![0.0; d];
    let integrand = |k: usize, field: &[f64], grad: &mut Vec<f64>| -> f64 {
        let t = bundle.grid.time(k);
        let pts = &bundle.positions[k];
        let mut acc = 0.0;
        for (i, &w) in bundle.weights.iter().enumerate() {
            let x = &pts[i * d..(i + 1) * d];
            phi.gradient(t, x, grad);
            let v = &field[i * d..(i + 1) * d];
            let adv: f64 = grad.iter().zip(v).map(|(a, b)| a * b).sum();
            acc += w * (phi.time_derivative(t, x) + adv);
        }
        acc
    };
    let h = bundle.grid.dt();
    let mut total = 0.0;
    for k in 0..bundle.steps() {
        let a = integrand(k, &bundle.field_left[k], &mut grad);
        let b = integrand(k + 1, &bundle.field_right[k], &mut grad);
        total += 0.5 * h * (a + b);
    }
    let boundary = |k: usize| -> f64 {
        let t = bundle.grid.time(k);
        bundle
            .weights
            .iter()
            .zip(bundle.positions[k].chunks_exact(d))
            .map(|(w, x)| w * phi.value(t, x))
            .sum()
    };
    total - (boundary(bundle.steps()) - boundary(0))
}

/// Magnitude of [`weak_form_defect`].
pub fn weak_form_residual(bundle: &TrajectoryBundle, phi: &dyn TestFunction) -> f64 {
    weak_form_defect(bundle, phi).abs()
}

/// The selection stored in a bundle.
pub fn extract_selection(bundle: &TrajectoryBundle) -> &Selection {
    &bundle.selection
}

/// Outcome of a replay check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoundTrip {
    pub ok: bool,
    /// First grid index whose measure (or auxiliary state) differs.
    pub first_divergence: Option<usize>,
}

/// First grid index at which two bundles' states differ bit-wise.
pub fn first_divergence(a: &TrajectoryBundle, b: &TrajectoryBundle) -> Option<usize> {
    let n = a.positions.len().max(b.positions.len());
    (0..n).find(|&k| {
        a.positions.get(k) != b.positions.get(k) || a.aux.get(k) != b.aux.get(k)
    })
}

/// Re-solves from the bundle's own selection and initial measure and checks
/// that every measure is reproduced bit-for-bit.
pub fn verify_round_trip(system: &dyn ControlSystem, bundle: &TrajectoryBundle) -> Result<RoundTrip, SolveError> {
    let mu0 = bundle.measure(0);
    let opts = SolveOptions { record_fields: false };
    let replay = match extract_selection(bundle) {
        Selection::Ordinary(s) => solve_with(system, &mu0, s, &bundle.grid, opts)?,
        Selection::Relaxed(r) => crate::relaxation::solve_relaxed_with(system, &mu0, r, &bundle.grid, opts)?,
    };
    let first = first_divergence(bundle, &replay);
    Ok(RoundTrip {
        ok: first.is_none(),
        first_divergence: first,
    })
}

/// Particle-identity coupling cost `Σ w_i |x_i(t) - x_i(s)|`, an upper bound on W1.
pub fn coupling_distance(weights: &[f64], dim: usize, a: &[f64], b: &[f64]) -> f64 {
    weights
        .iter()
        .zip(a.chunks_exact(dim).zip(b.chunks_exact(dim)))
        .map(|(w, (x, y))| w * dist(x, y))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportViolation {
    pub bundle: usize,
    pub step: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityViolation {
    pub bundle: usize,
    pub s: usize,
    pub t: usize,
    pub distance: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyReport {
    pub bundles: usize,
    pub max_support_radius: f64,
    /// Largest `W1(μ(t), μ(s)) / (t - s)` bound seen (coupling based).
    pub max_speed: f64,
    pub support_violations: Vec<SupportViolation>,
    pub continuity_violations: Vec<ContinuityViolation>,
}

impl FamilyReport {
    pub fn passes(&self) -> bool {
        self.support_violations.is_empty() && self.continuity_violations.is_empty()
    }
}

/// Checks uniform support containment in `B(0, R_r)` and the equi-continuity
/// bound `W1(μ(t), μ(s)) ≤ m_r (t - s) + tol` for every bundle and grid pair.
/// Distances use the particle coupling; a pair failing that bound is
/// re-checked with the exact W1 when atoms are few enough.
pub fn family_bounds_check(
    bundles: &[TrajectoryBundle],
    bounds: &AprioriBounds,
    tol: f64,
) -> Result<FamilyReport, SolveError> {
    let mut report = FamilyReport {
        bundles: bundles.len(),
        max_support_radius: 0.0,
        max_speed: 0.0,
        support_violations: Vec::new(),
        continuity_violations: Vec::new(),
    };
    for (b, bundle) in bundles.iter().enumerate() {
        for k in 0..=bundle.steps() {
            let r = support_radius(&bundle.measure(k));
            report.max_support_radius = report.max_support_radius.max(r);
            if r > bounds.radius {
                report.support_violations.push(SupportViolation { bundle: b, step: k, radius: r });
            }
        }
        for s in 0..=bundle.steps() {
            for t in s + 1..=bundle.steps() {
                let span = bundle.grid.time(t) - bundle.grid.time(s);
                let bound = bounds.modulus * span + tol;
                let mut distance =
                    coupling_distance(&bundle.weights, bundle.dim, &bundle.positions[s], &bundle.positions[t]);
                report.max_speed = report.max_speed.max(distance / span);
                if distance > bound && bundle.weights.len() <= 512 {
                    distance = w1_distance(&bundle.measure(s), &bundle.measure(t))?;
                }
                if distance > bound {
                    report.continuity_violations.push(ContinuityViolation { bundle: b, s, t, distance, bound });
                }
            }
        }
    }
    Ok(report)
}
