//! Interaction kernels, convolution against discrete measures, and sampling
//! probes for the growth and Lipschitz constants of non-local fields.
//!
//! Kernels:
//!
//! * Cucker–Smale alignment `φ(x, v) = -K / (σ + |x|)^{2β} · v`
//! * Morse-type interaction `Φ(x, v) = (R1 e^{-|x|/R2} - A1 e^{-|x|/A2}) · v`,
//!   with an optional positional variant that acts along `x/|x|` instead of `v`
//! * the standard bump mollifier `ρ(z) = c · exp(-1/(1 - |z/r|²))` on `|z| < r`
//!
//! The probes are sampling-based estimators: they return the smallest
//! constants consistent with the samples they were given. A probe can exhibit
//! a violation but never certify a bound globally.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{dist, momentum, norm, DiscreteMeasure, PhaseMeasure};
use crate::transport::{w1_distance, TransportError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel constant `{0}` must be nonnegative")]
    Negative(&'static str),
    #[error("`{0}` must be positive when its amplitude is positive")]
    ZeroRange(&'static str),
    #[error("sigma must be positive")]
    ZeroSigma,
    #[error("mollifier radius must be positive")]
    ZeroRadius,
}

/// Which vector the Morse multiplier scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MorseVariant {
    /// Multiplier times the velocity difference.
    #[default]
    AsWritten,
    /// Multiplier times the unit vector `x/|x|` (zero at `x = 0`).
    Positional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorseParams {
    pub r1: f64,
    pub r2: f64,
    pub a1: f64,
    pub a2: f64,
    #[serde(default)]
    pub variant: MorseVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuckerSmaleParams {
    pub k: f64,
    pub sigma: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub morse: MorseParams,
    pub cs: CuckerSmaleParams,
    pub mollifier_radius: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            morse: MorseParams {
                r1: 0.5,
                r2: 0.5,
                a1: 1.0,
                a2: 1.0,
                variant: MorseVariant::AsWritten,
            },
            cs: CuckerSmaleParams {
                k: 1.0,
                sigma: 1.0,
                beta: 0.5,
            },
            mollifier_radius: 0.5,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<(), KernelError> {
        let m = &self.morse;
        let c = &self.cs;
        for (name, v) in [
            ("r1", m.r1),
            ("r2", m.r2),
            ("a1", m.a1),
            ("a2", m.a2),
            ("k", c.k),
            ("sigma", c.sigma),
            ("beta", c.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(KernelError::Negative(name));
            }
        }
        if m.r1 > 0.0 && m.r2 <= 0.0 {
            return Err(KernelError::ZeroRange("r2"));
        }
        if m.a1 > 0.0 && m.a2 <= 0.0 {
            return Err(KernelError::ZeroRange("a2"));
        }
        if c.sigma <= 0.0 {
            return Err(KernelError::ZeroSigma);
        }
        if !(self.mollifier_radius > 0.0 && self.mollifier_radius.is_finite()) {
            return Err(KernelError::ZeroRadius);
        }
        Ok(())
    }

    /// Same constants with both interaction kernels switched off.
    pub fn without_interactions(mut self) -> Self {
        self.morse.r1 = 0.0;
        self.morse.a1 = 0.0;
        self.cs.k = 0.0;
        self
    }
}

/// Scalar gain `-K / (σ + r)^{2β}` of the Cucker–Smale kernel at distance `r`.
#[inline]
pub fn cs_gain(r: f64, p: &CuckerSmaleParams) -> f64 {
    if p.k == 0.0 {
        return 0.0;
    }
    -p.k / (p.sigma + r).powf(2.0 * p.beta)
}

/// Cucker–Smale alignment kernel.
pub fn cs_kernel(x: &[f64], v: &[f64], p: &KernelParams) -> Vec<f64> {
    let g = cs_gain(norm(x), &p.cs);
    v.iter().map(|c| g * c).collect()
}

/// Scalar multiplier `R1 e^{-r/R2} - A1 e^{-r/A2}` of the Morse kernel.
#[inline]
pub fn morse_gain(r: f64, p: &MorseParams) -> f64 {
    let rep = if p.r1 > 0.0 { p.r1 * (-r / p.r2).exp() } else { 0.0 };
    let att = if p.a1 > 0.0 { p.a1 * (-r / p.a2).exp() } else { 0.0 };
    rep - att
}

/// Morse-type interaction kernel.
pub fn morse_kernel(x: &[f64], v: &[f64], p: &KernelParams, variant: MorseVariant) -> Vec<f64> {
    let r = norm(x);
    let g = morse_gain(r, &p.morse);
    match variant {
        MorseVariant::AsWritten => v.iter().map(|c| g * c).collect(),
        MorseVariant::Positional => {
            if r == 0.0 {
                vec![0.0; x.len()]
            } else {
                x.iter().map(|c| g * c / r).collect()
            }
        }
    }
}

/// Surface area of the unit sphere in `R^dim`.
fn unit_sphere_area(dim: usize) -> f64 {
    match dim {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        d => 2.0 * std::f64::consts::PI / (d as f64 - 2.0) * unit_sphere_area(d - 2),
    }
}

fn bump_profile(s2: f64) -> f64 {
    if s2 < 1.0 {
        (-1.0 / (1.0 - s2)).exp()
    } else {
        0.0
    }
}

/// Standard bump mollifier on `R^dim` with unit mass and support radius `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mollifier {
    pub dim: usize,
    pub radius: f64,
    /// Normalization constant `c`, so that `ρ(0) = c / e`.
    pub scale: f64,
}

/// Simpson panels for the radial normalization integral.
const RADIAL_PANELS: usize = 1 << 14;

impl Mollifier {
    pub fn new(dim: usize, radius: f64) -> Result<Self, KernelError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(KernelError::ZeroRadius);
        }
        // ∫ρ = c r^d |S^{d-1}| ∫_0^1 exp(-1/(1-s²)) s^{d-1} ds
        let h = 1.0 / RADIAL_PANELS as f64;
        let f = |s: f64| bump_profile(s * s) * s.powi(dim as i32 - 1);
        let mut acc = f(0.0) + f(1.0);
        for k in 1..RADIAL_PANELS {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(k as f64 * h);
        }
        let radial = acc * h / 3.0;
        let mass = unit_sphere_area(dim) * radius.powi(dim as i32) * radial;
        Ok(Mollifier {
            dim,
            radius,
            scale: 1.0 / mass,
        })
    }

    pub fn from_params(p: &KernelParams, dim: usize) -> Result<Self, KernelError> {
        Self::new(dim, p.mollifier_radius)
    }

    /// `ρ(z)`.
    pub fn eval(&self, z: &[f64]) -> f64 {
        let s2 = z.iter().map(|c| c * c).sum::<f64>() / (self.radius * self.radius);
        self.scale * bump_profile(s2)
    }

    /// `ρ(0)`.
    pub fn peak(&self) -> f64 {
        self.scale * (-1.0f64).exp()
    }
}

/// `(ρ ⋆ μ)(y) = Σ_j w_j ρ(y - x_j)` for a measure on positions.
pub fn mollifier_density(mu: &DiscreteMeasure, y: &[f64], rho: &Mollifier) -> f64 {
    let mut z = vec![0.0; y.len()];
    mu.atoms()
        .map(|(w, x)| {
            for k in 0..y.len() {
                z[k] = y[k] - x[k];
            }
            w * rho.eval(&z)
        })
        .sum()
}

/// `(K ⋆ μ)(x, v) = Σ_j w_j K(x - x_j, v - v_j)` on phase space.
pub fn convolve_field<K>(kernel: K, mu: &PhaseMeasure, x: &[f64], v: &[f64]) -> Result<Vec<f64>, FieldError>
where
    K: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let d = mu.space_dim();
    if x.len() != d || v.len() != d {
        return Err(FieldError::Dimension {
            expected: d,
            found: x.len().max(v.len()),
        });
    }
    let mut out = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut dv = vec![0.0; d];
    for (j, &w) in mu.measure().weights().iter().enumerate() {
        let (xj, vj) = (mu.position(j), mu.velocity(j));
        for k in 0..d {
            dx[k] = x[k] - xj[k];
            dv[k] = v[k] - vj[k];
        }
        let kv = kernel(&dx, &dv);
        if kv.len() != d {
            return Err(FieldError::Dimension {
                expected: d,
                found: kv.len(),
            });
        }
        for k in 0..d {
            out[k] += w * kv[k];
        }
    }
    Ok(out)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Estimated constants of the growth/Lipschitz hypotheses on a sample set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct HypothesisEstimates {
    /// Sublinear growth constant `m`.
    pub m_hat: f64,
    /// Spatial Lipschitz constant `l_K` on the probed ball.
    pub lk_hat: f64,
    /// Lipschitz constant `L_K` of the field with respect to the measure (sup norm over W1).
    pub big_lk_hat: f64,
    /// Samples where the field was not finite.
    pub non_finite: usize,
    /// Pairs skipped because their distance vanished.
    pub skipped_pairs: usize,
}

impl HypothesisEstimates {
    pub fn is_clean(&self) -> bool {
        self.non_finite == 0
    }

    /// Componentwise maximum; counters add.
    pub fn merge(self, other: Self) -> Self {
        HypothesisEstimates {
            m_hat: self.m_hat.max(other.m_hat),
            lk_hat: self.lk_hat.max(other.lk_hat),
            big_lk_hat: self.big_lk_hat.max(other.big_lk_hat),
            non_finite: self.non_finite + other.non_finite,
            skipped_pairs: self.skipped_pairs + other.skipped_pairs,
        }
    }
}

/// Smallest `m` with `|v(x)| ≤ m (1 + |x| + M1(μ))` over the samples.
pub fn probe_sublinearity<F>(field: F, mu: &DiscreteMeasure, samples: &[Vec<f64>]) -> HypothesisEstimates
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m1 = momentum(mu);
    let mut est = HypothesisEstimates::default();
    for x in samples {
        let v = field(x);
        if v.iter().any(|c| !c.is_finite()) {
            est.non_finite += 1;
            continue;
        }
        est.m_hat = est.m_hat.max(norm(&v) / (1.0 + norm(x) + m1));
    }
    est
}

/// Largest difference quotient `|v(x) - v(y)| / |x - y|` over the pairs.
pub fn probe_lipschitz<F>(field: F, pairs: &[(Vec<f64>, Vec<f64>)]) -> HypothesisEstimates
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut est = HypothesisEstimates::default();
    for (x, y) in pairs {
        let h = dist(x, y);
        if h == 0.0 {
            est.skipped_pairs += 1;
            continue;
        }
        let (vx, vy) = (field(x), field(y));
        if vx.iter().chain(&vy).any(|c| !c.is_finite()) {
            est.non_finite += 1;
            continue;
        }
        est.lk_hat = est.lk_hat.max(dist(&vx, &vy) / h);
    }
    est
}

/// Largest ratio `sup_x |v_μ(x) - v_ν(x)| / W1(μ, ν)` over measure pairs, with
/// the supremum taken over `points`.
pub fn probe_measure_lipschitz<F>(
    field: F,
    pairs: &[(DiscreteMeasure, DiscreteMeasure)],
    points: &[Vec<f64>],
) -> Result<HypothesisEstimates, FieldError>
where
    F: Fn(&DiscreteMeasure, &[f64]) -> Vec<f64>,
{
    let mut est = HypothesisEstimates::default();
    for (mu, nu) in pairs {
        let w = w1_distance(mu, nu)?;
        if w == 0.0 {
            est.skipped_pairs += 1;
            continue;
        }
        let mut sup: f64 = 0.0;
        for x in points {
            let (a, b) = (field(mu, x), field(nu, x));
            if a.iter().chain(&b).any(|c| !c.is_finite()) {
                est.non_finite += 1;
                continue;
            }
            sup = sup.max(dist(&a, &b));
        }
        est.big_lk_hat = est.big_lk_hat.max(sup / w);
    }
    Ok(est)
}

/// Uniform samples in the closed ball `B(0, radius)` of `R^dim`.
pub fn ball_samples<R: Rng>(rng: &mut R, dim: usize, radius: f64, count: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if norm(&p) <= 1.0 {
            out.push(p.into_iter().map(|c| c * radius).collect());
        }
    }
    out
}

/// Random pairs of points in `B(0, radius)`.
pub fn ball_pairs<R: Rng>(rng: &mut R, dim: usize, radius: f64, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let a = ball_samples(rng, dim, radius, count);
    let b = ball_samples(rng, dim, radius, count);
    a.into_iter().zip(b).collect()
}
