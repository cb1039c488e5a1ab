//! Leader–follower evacuation.
//!
//! The crowd is a measure on phase space `(x, v) ∈ R^{2d}` driven by
//! `(v, Φ⋆μ + φ⋆ν_M)`, where `Φ` is the Morse interaction, `φ` the
//! Cucker–Smale alignment and `ν_M` the uniform measure on the `M` leaders.
//! Leaders are double integrators `ẏ_i = w_i`, `ẇ_i = u_i` carried as the
//! auxiliary state of the control system, so crowd and leaders share one RK4
//! step. Leader accelerations obey the soft congestion bound
//! `|u_i| ≤ C (1 - η (ρ⋆μ)(y_i))`, clamped at zero.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    ball_pairs, ball_samples, cs_gain, morse_gain, probe_lipschitz, probe_sublinearity, HypothesisEstimates,
    KernelError, KernelParams, Mollifier, MorseVariant,
};
use crate::inclusion::{ControlSetSpec, ControlSystem, ParticleState, TimeGrid};
use crate::mayer::{
    lambda_constraint, CostSpec, MayerError, MayerProblem, OptimizerOptions, RegionSpec, RunningConstraint,
};
use crate::measures::{momentum, norm, support_radius, DiscreteMeasure, MeasureError, PhaseMeasure};
use crate::relaxation::{RelaxationError, RelaxedControl, SearchSpec};

#[derive(Debug, Error)]
pub enum EvacError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario: {0}")]
    Invalid(String),
    #[error("initial crowd leaves the safe region (Λ = {0})")]
    OutsideSafeRegion(f64),
    #[error("control has dimension {found}, expected {expected}")]
    ControlDimension { expected: usize, found: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Mayer(#[from] MayerError),
    #[error(transparent)]
    Relaxation(#[from] RelaxationError),
}

/// Leader positions and velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderState {
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
}

impl LeaderState {
    pub fn validate(&self, d: usize) -> Result<(), EvacError> {
        if self.positions.is_empty() {
            return Err(EvacError::Invalid("need at least one leader".into()));
        }
        if self.positions.len() != self.velocities.len() {
            return Err(EvacError::Invalid("leader positions and velocities differ in count".into()));
        }
        for p in self.positions.iter().chain(&self.velocities) {
            if p.len() != d {
                return Err(EvacError::Invalid(format!("leader coordinates must have dimension {d}")));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(EvacError::Invalid("leader state must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    /// `[y_1, ..., y_M, w_1, ..., w_M]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.positions.iter().chain(&self.velocities).flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], d: usize) -> Self {
        let m = flat.len() / (2 * d);
        let chunk = |k: usize| flat[k * d..(k + 1) * d].to_vec();
        LeaderState {
            positions: (0..m).map(chunk).collect(),
            velocities: (m..2 * m).map(chunk).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CongestionParams {
    /// Maximal leader acceleration.
    pub c: f64,
    pub eta: f64,
}

impl CongestionParams {
    pub fn validate(&self) -> Result<(), EvacError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(EvacError::Invalid(format!("congestion c must be positive, got {}", self.c)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(EvacError::Invalid(format!("congestion eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// `C (1 - η (ρ⋆μ_x)(y))` clamped at zero, `μ_x` the crowd's position marginal.
pub fn congestion_bound(mu: &PhaseMeasure, y: &[f64], p: &CongestionParams, rho: &Mollifier) -> f64 {
    let d = mu.space_dim();
    let m = mu.measure();
    let density: f64 = m
        .atoms()
        .map(|(w, z)| w * rho.eval(&sub(y, &z[..d])))
        .sum();
    bound_from_density(density, p)
}

fn bound_from_density(density: f64, p: &CongestionParams) -> f64 {
    (p.c * (1.0 - p.eta * density)).max(0.0)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Velocity part of `(Φ⋆μ + φ⋆ν_M)(x, v)` evaluated with explicit loops.
pub fn crowd_field(mu: &PhaseMeasure, leaders: &LeaderState, kernels: &KernelParams, x: &[f64], v: &[f64]) -> Vec<f64> {
    let d = mu.space_dim();
    let mut out = v.to_vec();
    out.extend(std::iter::repeat(0.0).take(d));
    let acc = &mut out[d..];
    for (w, z) in mu.measure().atoms() {
        let dx = sub(x, &z[..d]);
        let dv = sub(v, &z[d..]);
        add_morse(acc, w, &dx, &dv, kernels);
    }
    let inv = 1.0 / leaders.count() as f64;
    for (y, wl) in leaders.positions.iter().zip(&leaders.velocities) {
        let g = cs_gain(norm(&sub(x, y)), &kernels.cs);
        for k in 0..d {
            acc[k] += inv * g * (v[k] - wl[k]);
        }
    }
    out
}

fn add_morse(acc: &mut [f64], w: f64, dx: &[f64], dv: &[f64], kernels: &KernelParams) {
    let r = norm(dx);
    let g = morse_gain(r, &kernels.morse);
    match kernels.morse.variant {
        MorseVariant::AsWritten => {
            for k in 0..acc.len() {
                acc[k] += w * g * dv[k];
            }
        }
        MorseVariant::Positional => {
            if r > 0.0 {
                for k in 0..acc.len() {
                    acc[k] += w * g * dx[k] / r;
                }
            }
        }
    }
}

/// Time derivative `(w, u)` of the leader state.
pub fn leader_field(u: &[f64], leaders: &LeaderState) -> Result<LeaderState, EvacError> {
    let d = leaders.positions.first().map_or(0, Vec::len);
    if u.len() != leaders.count() * d {
        return Err(EvacError::ControlDimension {
            expected: leaders.count() * d,
            found: u.len(),
        });
    }
    Ok(LeaderState {
        positions: leaders.velocities.clone(),
        velocities: u.chunks(d).map(<[f64]>::to_vec).collect(),
    })
}

/// Coupled crowd–leader control system.
#[derive(Debug, Clone)]
pub struct EvacSystem {
    pub space_dim: usize,
    pub leaders0: LeaderState,
    pub kernels: KernelParams,
    pub congestion: CongestionParams,
    pub mollifier: Mollifier,
}

impl EvacSystem {
    pub fn new(
        space_dim: usize,
        leaders0: LeaderState,
        kernels: KernelParams,
        congestion: CongestionParams,
    ) -> Result<Self, EvacError> {
        leaders0.validate(space_dim)?;
        kernels.validate()?;
        congestion.validate()?;
        let mollifier = Mollifier::from_params(&kernels, space_dim)?;
        Ok(EvacSystem {
            space_dim,
            leaders0,
            kernels,
            congestion,
            mollifier,
        })
    }

    pub fn leader_count(&self) -> usize {
        self.leaders0.count()
    }

    fn density(&self, state: &ParticleState<'_>, y: &[f64]) -> f64 {
        let d = self.space_dim;
        let r2 = self.mollifier.radius * self.mollifier.radius;
        let mut acc = 0.0;
        for (w, z) in state.atoms() {
            let mut s = 0.0;
            for k in 0..d {
                let e = y[k] - z[k];
                s += e * e;
            }
            if s < r2 {
                acc += w * self.mollifier.scale * (-1.0 / (1.0 - s / r2)).exp();
            }
        }
        acc
    }

    /// Congestion bounds `b_i` for every leader in `state`.
    pub fn bounds(&self, state: &ParticleState<'_>) -> Vec<f64> {
        let d = self.space_dim;
        (0..self.leader_count())
            .map(|i| bound_from_density(self.density(state, &state.aux[i * d..(i + 1) * d]), &self.congestion))
            .collect()
    }

    fn leader_term(&self, state: &ParticleState<'_>, x: &[f64], v: &[f64], acc: &mut [f64]) {
        let d = self.space_dim;
        let m = self.leader_count();
        let inv = 1.0 / m as f64;
        for l in 0..m {
            let y = &state.aux[l * d..(l + 1) * d];
            let w = &state.aux[(m + l) * d..(m + l + 1) * d];
            let mut r = 0.0;
            for k in 0..d {
                r += (x[k] - y[k]) * (x[k] - y[k]);
            }
            let g = inv * cs_gain(r.sqrt(), &self.kernels.cs);
            for k in 0..d {
                acc[k] += g * (v[k] - w[k]);
            }
        }
    }
}

impl ControlSystem for EvacSystem {
    fn dim(&self) -> usize {
        2 * self.space_dim
    }

    fn control_dim(&self) -> usize {
        self.leader_count() * self.space_dim
    }

    fn aux_dim(&self) -> usize {
        2 * self.leader_count() * self.space_dim
    }

    fn initial_aux(&self) -> Vec<f64> {
        self.leaders0.to_flat()
    }

    fn field_at(&self, _t: f64, state: &ParticleState<'_>, _u: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.space_dim;
        let (pos, vel) = x.split_at(d);
        out[..d].copy_from_slice(vel);
        let acc = &mut out[d..];
        acc.fill(0.0);
        for (w, z) in state.atoms() {
            let dx = sub(pos, &z[..d]);
            let dv = sub(vel, &z[d..]);
            add_morse(acc, w, &dx, &dv, &self.kernels);
        }
        self.leader_term(state, pos, vel, acc);
    }

    /// Pairwise evaluation using the antisymmetry `Φ(-x, -v) = -Φ(x, v)`.
    fn velocities(&self, _t: f64, state: &ParticleState<'_>, _u: &[f64], out: &mut [f64]) {
        let d = self.space_dim;
        let n = state.len();
        let pts = state.points;
        let w = state.weights;
        for i in 0..n {
            let (o, p) = (&mut out[i * 2 * d..(i + 1) * 2 * d], &pts[i * 2 * d..(i + 1) * 2 * d]);
            o[..d].copy_from_slice(&p[d..]);
            o[d..].fill(0.0);
        }
        let positional = self.kernels.morse.variant == MorseVariant::Positional;
        let mut f = vec![0.0; d];
        for i in 0..n {
            let pi = &pts[i * 2 * d..(i + 1) * 2 * d];
            for j in i + 1..n {
                let pj = &pts[j * 2 * d..(j + 1) * 2 * d];
                let mut r = 0.0;
                for k in 0..d {
                    r += (pi[k] - pj[k]) * (pi[k] - pj[k]);
                }
                let r = r.sqrt();
                let g = morse_gain(r, &self.kernels.morse);
                if positional {
                    if r == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        f[k] = g * (pi[k] - pj[k]) / r;
                    }
                } else {
                    for k in 0..d {
                        f[k] = g * (pi[d + k] - pj[d + k]);
                    }
                }
                for k in 0..d {
                    out[i * 2 * d + d + k] += w[j] * f[k];
                    out[j * 2 * d + d + k] -= w[i] * f[k];
                }
            }
        }
        for i in 0..n {
            let p = &pts[i * 2 * d..(i + 1) * 2 * d];
            let acc = &mut out[i * 2 * d + d..(i + 1) * 2 * d];
            self.leader_term(state, &p[..d], &p[d..], acc);
        }
    }

    fn aux_rate(&self, _t: f64, state: &ParticleState<'_>, u: &[f64], out: &mut [f64]) {
        let half = self.leader_count() * self.space_dim;
        out[..half].copy_from_slice(&state.aux[half..]);
        out[half..].copy_from_slice(u);
    }

    fn control_set(&self, _t: f64, state: &ParticleState<'_>) -> ControlSetSpec {
        ControlSetSpec::Balls {
            block: self.space_dim,
            radii: self.bounds(state),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrowdConfig {
    /// Number of equally weighted atoms drawn uniformly in the box.
    pub atoms: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Common initial velocity (zero when omitted).
    #[serde(default)]
    pub velocity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionsConfig {
    /// Evacuation target `S`.
    pub target: RegionSpec,
    /// Safe region `H` of the running constraint.
    pub safe: RegionSpec,
    #[serde(default)]
    pub terminal: Option<RegionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationConfig {
    /// Coarse intervals over the horizon.
    pub steps: usize,
    pub atoms: Vec<Vec<f64>>,
    /// Weights on every coarse interval.
    pub weights: Vec<f64>,
    pub subdivisions: Vec<usize>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_resolution() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueConfig {
    pub atoms: Vec<Vec<f64>>,
    pub intervals: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_denominator")]
    pub denominator: usize,
    /// Ramp width of the mollified terminal cost; the indicator is used when absent.
    #[serde(default)]
    pub width: Option<f64>,
}

fn default_substeps() -> usize {
    10
}

fn default_denominator() -> usize {
    4
}

impl ValueConfig {
    pub fn search(&self) -> SearchSpec {
        SearchSpec {
            atoms: self.atoms.clone(),
            intervals: self.intervals,
            substeps: self.substeps,
            denominator: self.denominator,
        }
    }

    pub fn cost(&self) -> CostSpec {
        match self.width {
            Some(width) => CostSpec::Mollified { width },
            None => CostSpec::IndicatorFraction,
        }
    }
}

/// Scenario file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvacConfig {
    pub crowd: CrowdConfig,
    pub leaders: LeaderState,
    #[serde(default)]
    pub kernels: KernelParams,
    pub congestion: CongestionParams,
    pub regions: RegionsConfig,
    pub grid: TimeGrid,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default)]
    pub relaxation: Option<RelaxationConfig>,
    #[serde(default)]
    pub value: Option<ValueConfig>,
}

impl EvacConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvacError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, EvacError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvacError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn space_dim(&self) -> usize {
        self.crowd.lower.len()
    }

    /// Crowd atoms from stream 0 of the optimizer seed.
    pub fn sample_crowd(&self) -> Result<PhaseMeasure, EvacError> {
        let c = &self.crowd;
        let d = self.space_dim();
        if c.atoms == 0 {
            return Err(EvacError::Invalid("crowd needs at least one atom".into()));
        }
        if d == 0 || c.upper.len() != d || c.lower.iter().zip(&c.upper).any(|(l, u)| !(l <= u)) {
            return Err(EvacError::Invalid("crowd box needs matching lower ≤ upper corners".into()));
        }
        let vel = c.velocity.clone().unwrap_or_else(|| vec![0.0; d]);
        if vel.len() != d {
            return Err(EvacError::Invalid(format!("crowd velocity must have dimension {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.optimizer.seed);
        let pts = (0..c.atoms)
            .map(|_| {
                let mut p: Vec<f64> = c
                    .lower
                    .iter()
                    .zip(&c.upper)
                    .map(|(l, u)| if l < u { rng.gen_range(*l..*u) } else { *l })
                    .collect();
                p.extend_from_slice(&vel);
                p
            })
            .collect();
        Ok(PhaseMeasure::new(DiscreteMeasure::uniform(pts)?)?)
    }

    pub fn scenario(&self) -> Result<EvacScenario, EvacError> {
        Ok(EvacScenario {
            crowd: self.sample_crowd()?,
            leaders: self.leaders.clone(),
            kernels: self.kernels,
            congestion: self.congestion,
            target: self.regions.target.clone(),
            safe: self.regions.safe.clone(),
            terminal: self.regions.terminal.clone(),
            grid: self.grid,
        })
    }

    /// Relaxed control on the coarse relaxation grid.
    pub fn relaxed_control(&self) -> Result<Option<(RelaxedControl, TimeGrid)>, EvacError> {
        let Some(r) = &self.relaxation else {
            return Ok(None);
        };
        let grid = TimeGrid::new(self.grid.t0, self.grid.t_end, r.steps).map_err(|e| EvacError::Invalid(e.to_string()))?;
        let control = RelaxedControl::constant(r.atoms.clone(), r.weights.clone(), r.steps)?;
        Ok(Some((control, grid)))
    }
}

#[derive(Debug, Clone)]
pub struct EvacScenario {
    pub crowd: PhaseMeasure,
    pub leaders: LeaderState,
    pub kernels: KernelParams,
    pub congestion: CongestionParams,
    pub target: RegionSpec,
    pub safe: RegionSpec,
    pub terminal: Option<RegionSpec>,
    pub grid: TimeGrid,
}

impl EvacScenario {
    pub fn system(&self) -> Result<EvacSystem, EvacError> {
        EvacSystem::new(self.crowd.space_dim(), self.leaders.clone(), self.kernels, self.congestion)
    }
}

/// Probe samples drawn around the initial support.
const PROBE_SAMPLES: usize = 256;
const PROBE_SEED: u64 = 0x5eed;

/// Sublinearity and Lipschitz estimates of the crowd field at the initial
/// leader state, sampled in a ball twice the initial support radius.
pub fn probe_system(system: &EvacSystem, crowd: &DiscreteMeasure) -> HypothesisEstimates {
    let aux = system.initial_aux();
    let state = ParticleState {
        dim: crowd.dim(),
        weights: crowd.weights(),
        points: crowd.flat_points(),
        aux: &aux,
    };
    let field = |x: &[f64]| {
        let mut out = vec![0.0; x.len()];
        system.field_at(0.0, &state, &[], x, &mut out);
        out
    };
    let radius = 2.0 * support_radius(crowd).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let samples = ball_samples(&mut rng, crowd.dim(), radius, PROBE_SAMPLES);
    let pairs = ball_pairs(&mut rng, crowd.dim(), radius, PROBE_SAMPLES);
    probe_sublinearity(field, crowd, &samples).merge(probe_lipschitz(field, &pairs))
}

/// Sublinearity constant of the crowd field at a given state, probed at the
/// atoms themselves and at `extra` points.
pub fn sublinearity_at(system: &EvacSystem, state: &ParticleState<'_>, t: f64, extra: &[Vec<f64>]) -> f64 {
    let mu = state.measure();
    let m1 = momentum(&mu);
    let mut out = vec![0.0; state.dim];
    let mut m: f64 = 0.0;
    for x in state.points.chunks_exact(state.dim).map(<[f64]>::to_vec).chain(extra.iter().cloned()) {
        system.field_at(t, state, &[], &x, &mut out);
        m = m.max(norm(&out) / (1.0 + norm(&x) + m1));
    }
    m
}

/// Assembles the Mayer problem: indicator cost on `S`, running constraint
/// `Λ(·, H) ≤ 0` on positions, congestion-bounded leader controls.
pub fn build_problem(scenario: &EvacScenario) -> Result<MayerProblem, EvacError> {
    let system = scenario.system()?;
    let d = scenario.crowd.space_dim();
    let mu0 = scenario.crowd.measure().clone();
    scenario.target.validate(d)?;
    scenario.safe.validate(d)?;
    let lam = lambda_constraint(&scenario.crowd.positions(), &scenario.safe);
    if lam > 0.0 {
        return Err(EvacError::OutsideSafeRegion(lam));
    }
    let estimates = probe_system(&system, &mu0);
    let control_box = vec![scenario.congestion.c; system.control_dim()];
    let problem = MayerProblem {
        system: Arc::new(system),
        grid: scenario.grid,
        mu0,
        position_dims: d,
        target: scenario.target.clone(),
        cost: CostSpec::IndicatorFraction,
        running: Some(RunningConstraint {
            region: scenario.safe.clone(),
            tolerance: 0.0,
        }),
        terminal: scenario.terminal.clone(),
        control_box,
        estimates: Some(estimates),
    };
    problem.validate()?;
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inclusion::{solve, verify_round_trip, ControlSchedule};
    use crate::dynamics::{CuckerSmaleParams, MorseParams};

    fn kernels() -> KernelParams {
        KernelParams::default()
    }

    fn phase(points: Vec<Vec<f64>>) -> PhaseMeasure {
        PhaseMeasure::new(DiscreteMeasure::uniform(points).unwrap()).unwrap()
    }

    fn one_leader(y: &[f64], w: &[f64]) -> LeaderState {
        LeaderState { positions: vec![y.to_vec()], velocities: vec![w.to_vec()] }
    }

    const SMALL: &str = r#"
        [crowd]
        atoms = 6
        lower = [-0.5, -0.5]
        upper = [0.5, 0.5]

        [leaders]
        positions = [[0.5, 0.2], [0.5, -0.2]]
        velocities = [[0.0, 0.0], [0.0, 0.0]]

        [congestion]
        c = 5.0
        eta = 0.5

        [regions]
        target = { kind = "ball", center = [1.5, 0.0], radius = 0.5 }
        safe = { kind = "box", lower = [-3.0, -3.0], upper = [3.0, 3.0] }

        [grid]
        t0 = 0.0
        t_end = 1.0
        steps = 20
    "#;

    #[test]
    fn congestion_examples() {
        let rho = Mollifier::new(2, 0.5).unwrap();
        let crowd = phase(vec![vec![0.0, 0.0, 0.0, 0.0]]);
        let free = CongestionParams { c: 5.0, eta: 0.0 };
        assert_eq!(congestion_bound(&crowd, &[0.0, 0.0], &free, &rho), 5.0);
        let p = CongestionParams { c: 5.0, eta: 0.5 };
        assert_eq!(congestion_bound(&crowd, &[3.0, 0.0], &p, &rho), 5.0);
        let at = congestion_bound(&crowd, &[0.0, 0.0], &p, &rho);
        assert_eq!(at, (5.0 * (1.0 - 0.5 * rho.peak())).max(0.0));
        let wide = Mollifier::new(2, 2.0).unwrap();
        assert!(wide.peak() < 1.0);
        let at = congestion_bound(&crowd, &[0.0, 0.0], &p, &wide);
        assert!((at - 5.0 * (1.0 - 0.5 * wide.peak())).abs() < 1e-12 && at > 0.0);
        let tiny = Mollifier::new(2, 0.1).unwrap();
        let full = CongestionParams { c: 5.0, eta: 1.0 };
        assert!(tiny.peak() > 1.0);
        assert_eq!(congestion_bound(&crowd, &[0.0, 0.0], &full, &tiny), 0.0);
    }

    #[test]
    fn congestion_monotone_in_density() {
        let rho = Mollifier::new(2, 0.5).unwrap();
        let p = CongestionParams { c: 2.0, eta: 0.8 };
        let sys = EvacSystem::new(2, one_leader(&[0.0, 0.0], &[0.0, 0.0]), kernels(), p).unwrap();
        let mut pts = vec![vec![0.9, 0.9, 0.0, 0.0]];
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            // move 1/6 of the mass from the far atom next to the leader
            pts.push(vec![0.05 * k as f64, 0.0, 0.0, 0.0]);
            let n = pts.len();
            let weights: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 - (n - 1) as f64 / 6.0 } else { 1.0 / 6.0 }).collect();
            let mu = DiscreteMeasure::new(pts.clone(), weights).unwrap();
            let aux = sys.initial_aux();
            let state = ParticleState { dim: 4, weights: mu.weights(), points: mu.flat_points(), aux: &aux };
            let b = sys.bounds(&state)[0];
            assert!(b <= prev + 1e-15);
            assert!((b - congestion_bound(&PhaseMeasure::new(mu.clone()).unwrap(), &[0.0, 0.0], &p, &rho)).abs() < 1e-12);
            prev = b;
        }
    }

    #[test]
    fn free_transport_without_kernels() {
        let k = kernels().without_interactions();
        let crowd = phase(vec![vec![0.0, 0.0, 1.0, 2.0]]);
        let f = crowd_field(&crowd, &one_leader(&[5.0, 5.0], &[0.0, 0.0]), &k, &[0.3, 0.1], &[1.0, -1.0]);
        assert_eq!(f, vec![1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn matching_leader_contributes_nothing() {
        let mut k = kernels();
        k.morse = MorseParams { r1: 0.0, a1: 0.0, ..k.morse };
        let crowd = phase(vec![vec![0.0, 0.0, 0.0, 0.0]]);
        let f = crowd_field(&crowd, &one_leader(&[0.3, 0.1], &[1.0, -1.0]), &k, &[0.3, 0.1], &[1.0, -1.0]);
        assert_eq!(&f[2..], &[0.0, 0.0]);
    }

    #[test]
    fn small_field_matches_summation_oracle() {
        let k = KernelParams {
            cs: CuckerSmaleParams { k: 0.7, sigma: 1.0, beta: 0.5 },
            ..kernels()
        };
        let crowd = phase(vec![vec![0.0, 0.1, 0.5, 0.0], vec![0.4, -0.3, -0.2, 0.3]]);
        let leaders = one_leader(&[1.0, 0.5], &[0.2, 0.2]);
        let (x, v) = ([0.2, 0.2], [0.1, -0.4]);
        let mut oracle = [0.0; 2];
        for (w, z) in crowd.measure().atoms() {
            let r = ((x[0] - z[0]).powi(2) + (x[1] - z[1]).powi(2)).sqrt();
            let g = 0.5 * (-r / 0.5).exp() - 1.0 * (-r / 1.0).exp();
            oracle[0] += w * g * (v[0] - z[2]);
            oracle[1] += w * g * (v[1] - z[3]);
        }
        let r = ((x[0] - 1.0f64).powi(2) + (x[1] - 0.5f64).powi(2)).sqrt();
        let g = -0.7 / (1.0 + r);
        oracle[0] += g * (v[0] - 0.2);
        oracle[1] += g * (v[1] - 0.2);
        let f = crowd_field(&crowd, &leaders, &k, &x, &v);
        assert!((f[2] - oracle[0]).abs() < 1e-12 && (f[3] - oracle[1]).abs() < 1e-12);

        let sys = EvacSystem::new(2, leaders.clone(), k, CongestionParams { c: 1.0, eta: 0.5 }).unwrap();
        let aux = sys.initial_aux();
        let m = crowd.measure();
        let state = ParticleState { dim: 4, weights: m.weights(), points: m.flat_points(), aux: &aux };
        let mut out = [0.0; 4];
        sys.field_at(0.0, &state, &[0.0, 0.0], &[0.2, 0.2, 0.1, -0.4], &mut out);
        for i in 0..4 {
            assert!((out[i] - f[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_velocities_match_pointwise() {
        for variant in [MorseVariant::AsWritten, MorseVariant::Positional] {
            let mut k = kernels();
            k.morse.variant = variant;
            let cfg = EvacConfig::from_toml(SMALL).unwrap();
            let crowd = cfg.sample_crowd().unwrap();
            let mut m = crowd.measure().clone();
            let pts: Vec<f64> = m.flat_points().iter().enumerate().map(|(i, x)| x + 0.1 * (i as f64).sin()).collect();
            m = m.with_points(pts).unwrap();
            let sys = EvacSystem::new(2, cfg.leaders.clone(), k, cfg.congestion).unwrap();
            let aux = sys.initial_aux();
            let state = ParticleState { dim: 4, weights: m.weights(), points: m.flat_points(), aux: &aux };
            let mut fast = vec![0.0; m.flat_points().len()];
            sys.velocities(0.0, &state, &[0.0; 4], &mut fast);
            for (i, x) in m.points().enumerate() {
                let mut o = [0.0; 4];
                sys.field_at(0.0, &state, &[0.0; 4], x, &mut o);
                for c in 0..4 {
                    assert!((fast[4 * i + c] - o[c]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn leader_field_examples() {
        let l = LeaderState { positions: vec![vec![0.0, 1.0], vec![2.0, 3.0]], velocities: vec![vec![1.0, 0.0], vec![0.0, -1.0]] };
        let d = leader_field(&[0.5, 0.5, -1.0, 2.0], &l).unwrap();
        assert_eq!(d.positions, l.velocities);
        assert_eq!(d.velocities, vec![vec![0.5, 0.5], vec![-1.0, 2.0]]);
        assert!(leader_field(&[0.0; 3], &l).is_err());
    }

    #[test]
    fn constant_control_leader_is_quadratic() {
        let k = kernels().without_interactions();
        let y0 = [0.1, -0.2];
        let w0 = [0.5, 0.25];
        let u = vec![1.5, -0.75];
        let sys = EvacSystem::new(2, one_leader(&y0, &w0), k, CongestionParams { c: 5.0, eta: 0.0 }).unwrap();
        let crowd = DiscreteMeasure::uniform(vec![vec![-2.0, 0.0, 0.0, 0.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = solve(&sys, &crowd, &ControlSchedule::constant(u.clone(), 10), &grid).unwrap();
        for (j, t) in grid.times().into_iter().enumerate() {
            for c in 0..2 {
                let y = y0[c] + w0[c] * t + 0.5 * u[c] * t * t;
                assert!((b.aux[j][c] - y).abs() < 1e-13);
                assert!((b.aux[j][2 + c] - (w0[c] + u[c] * t)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn leaders_evolve_independently() {
        let k = kernels().without_interactions();
        let two = LeaderState { positions: vec![vec![0.0, 0.0], vec![1.0, 1.0]], velocities: vec![vec![0.0, 0.0]; 2] };
        let sys = EvacSystem::new(2, two, k, CongestionParams { c: 5.0, eta: 0.0 }).unwrap();
        let crowd = DiscreteMeasure::uniform(vec![vec![-2.0, 0.0, 0.0, 0.0]]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let a = solve(&sys, &crowd, &ControlSchedule::constant(vec![1.0, 0.0, 0.0, 0.0], 4), &grid).unwrap();
        let b = solve(&sys, &crowd, &ControlSchedule::constant(vec![1.0, 0.0, -2.0, 1.0], 4), &grid).unwrap();
        for j in 0..=4 {
            // leader 0 block: y0 (0..2) and w0 (4..6)
            assert_eq!(a.aux[j][0..2], b.aux[j][0..2]);
            assert_eq!(a.aux[j][4..6], b.aux[j][4..6]);
        }
    }

    #[test]
    fn alignment_contracts_velocities() {
        let mut k = kernels();
        k.morse = MorseParams { r1: 0.0, a1: 0.0, ..k.morse };
        let wbar = [0.8, -0.3];
        let sys = EvacSystem::new(2, one_leader(&[0.0, 0.0], &wbar), k, CongestionParams { c: 5.0, eta: 0.5 }).unwrap();
        let cfg = EvacConfig::from_toml(SMALL).unwrap();
        let crowd = cfg.sample_crowd().unwrap();
        let pts: Vec<f64> = crowd
            .measure()
            .flat_points()
            .chunks(4)
            .enumerate()
            .flat_map(|(i, p)| vec![p[0], p[1], (i as f64).cos(), (i as f64).sin()])
            .collect();
        let mu = crowd.measure().with_points(pts).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let b = solve(&sys, &mu, &ControlSchedule::constant(vec![0.0, 0.0], 50), &grid).unwrap();
        let spread = |k: usize| {
            b.positions[k]
                .chunks(4)
                .map(|p| ((p[2] - wbar[0]).powi(2) + (p[3] - wbar[1]).powi(2)).sqrt())
                .fold(0.0, f64::max)
        };
        for k in 0..50 {
            assert!(spread(k + 1) <= spread(k) + 1e-15);
        }
        assert!(spread(50) < spread(0));
    }

    #[test]
    fn mirror_symmetry() {
        let k = kernels();
        let leaders = LeaderState { positions: vec![vec![0.5, 0.3], vec![0.5, -0.3]], velocities: vec![vec![0.0, 0.1], vec![0.0, -0.1]] };
        let sys = EvacSystem::new(2, leaders, k, CongestionParams { c: 5.0, eta: 0.5 }).unwrap();
        let half = [[0.1, 0.2, 0.0, 0.1], [-0.3, 0.4, 0.2, 0.0], [0.0, 0.05, -0.1, 0.3]];
        let mut pts = Vec::new();
        for p in half {
            pts.push(p.to_vec());
            pts.push(vec![p[0], -p[1], p[2], -p[3]]);
        }
        let mu = DiscreteMeasure::uniform(pts).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let sched = ControlSchedule::new((0..40).map(|j| {
            let a = 1.0 + (j as f64 * 0.2).sin();
            let b = 0.5 * (j as f64 * 0.1).cos();
            vec![a, b, a, -b]
        }).collect());
        let bundle = solve(&sys, &mu, &sched, &grid).unwrap();
        for pos in &bundle.positions {
            for pair in pos.chunks(8) {
                assert!((pair[0] - pair[4]).abs() < 1e-9);
                assert!((pair[1] + pair[5]).abs() < 1e-9);
                assert!((pair[2] - pair[6]).abs() < 1e-9);
                assert!((pair[3] + pair[7]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_round_trip_and_rejection() {
        let cfg = EvacConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.crowd.atoms, 6);
        assert_eq!(cfg.optimizer, OptimizerOptions::default());
        let again = EvacConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        let bad = SMALL.replace("eta = 0.5", "eta = 0.5\nbogus = 1");
        assert!(matches!(EvacConfig::from_toml(&bad), Err(EvacError::Parse(_))));
    }

    #[test]
    fn build_problem_examples() {
        let cfg = EvacConfig::from_toml(SMALL).unwrap();
        let scenario = cfg.scenario().unwrap();
        let p = build_problem(&scenario).unwrap();
        let est = p.estimates.unwrap();
        assert!(est.is_clean() && est.m_hat.is_finite() && est.lk_hat.is_finite());

        let mut outside = scenario.clone();
        outside.safe = RegionSpec::Box { lower: vec![0.0, 0.0], upper: vec![1.0, 1.0] };
        assert!(matches!(build_problem(&outside), Err(EvacError::OutsideSafeRegion(_))));

        let minimal = EvacScenario {
            crowd: phase(vec![vec![0.0, 0.0, 0.0, 0.0]]),
            leaders: one_leader(&[0.2, 0.0], &[0.0, 0.0]),
            ..scenario
        };
        let p = build_problem(&minimal).unwrap();
        let b = solve(p.system.as_ref(), &p.mu0, &ControlSchedule::constant(vec![1.0, 0.0], 20), &p.grid).unwrap();
        assert!(verify_round_trip(p.system.as_ref(), &b).unwrap().ok);
        assert_eq!(b.weights, vec![1.0]);
    }
}
