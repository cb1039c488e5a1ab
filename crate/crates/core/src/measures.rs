//! Discrete probability measures with finite (hence compact) support.
//!
//! A [`DiscreteMeasure`] is a weighted point cloud `Σ w_i δ_{x_i}` in `R^d`.
//! Points are stored in one flat buffer of length `n * dim`. Coincident atoms
//! are allowed and are never merged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|Σ w_i - 1|` accepted at construction.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measure has no atoms")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("atom {index} has dimension {found}, expected {expected}")]
    PointDimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{points} points but {weights} weights")]
    LengthMismatch { points: usize, weights: usize },
    #[error("weight {index} is {value}, weights must be positive and finite")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to {0}, expected 1 within 1e-12")]
    WeightSum(f64),
    #[error("coordinate of atom {0} is not finite")]
    NonFinite(usize),
    #[error("phase measure needs an even dimension, got {0}")]
    OddPhaseDimension(usize),
    #[error("map returned a point of dimension {found}, expected {expected}")]
    MapDimension { expected: usize, found: usize },
}

/// Weighted point cloud representing a probability measure on `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRecord", into = "MeasureRecord")]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

/// Object form used by the structured-text serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureRecord {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl TryFrom<MeasureRecord> for DiscreteMeasure {
    type Error = MeasureError;

    fn try_from(r: MeasureRecord) -> Result<Self, Self::Error> {
        let m = DiscreteMeasure::new(r.points, r.weights)?;
        if m.dim != r.dim {
            return Err(MeasureError::PointDimension {
                index: 0,
                expected: r.dim,
                found: m.dim,
            });
        }
        Ok(m)
    }
}

impl From<DiscreteMeasure> for MeasureRecord {
    fn from(m: DiscreteMeasure) -> Self {
        MeasureRecord {
            dim: m.dim,
            points: m.points().map(<[f64]>::to_vec).collect(),
            weights: m.weights,
        }
    }
}

fn check_weights(weights: &[f64], normalize: bool) -> Result<Vec<f64>, MeasureError> {
    for (index, &value) in weights.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(MeasureError::BadWeight { index, value });
        }
    }
    let sum: f64 = weights.iter().sum();
    if normalize {
        return Ok(weights.iter().map(|w| w / sum).collect());
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(MeasureError::WeightSum(sum));
    }
    Ok(weights.to_vec())
}

impl DiscreteMeasure {
    /// Builds a measure from explicit atoms. Weights must already sum to one.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        Self::build(points, weights, false)
    }

    /// Like [`DiscreteMeasure::new`] but rescales positive weights to unit mass.
    pub fn new_normalized(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        Self::build(points, weights, true)
    }

    fn build(points: Vec<Vec<f64>>, weights: Vec<f64>, normalize: bool) -> Result<Self, MeasureError> {
        let first = points.first().ok_or(MeasureError::Empty)?;
        let dim = first.len();
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(MeasureError::PointDimension {
                    index,
                    expected: dim,
                    found: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat_impl(dim, flat, weights, normalize)
    }

    /// Builds a measure from a flat coordinate buffer of length `n * dim`.
    pub fn from_flat(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        Self::from_flat_impl(dim, points, weights, false)
    }

    fn from_flat_impl(
        dim: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        normalize: bool,
    ) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::ZeroDimension);
        }
        if weights.is_empty() {
            return Err(MeasureError::Empty);
        }
        if points.len() != weights.len() * dim {
            return Err(MeasureError::LengthMismatch {
                points: points.len() / dim,
                weights: weights.len(),
            });
        }
        if let Some(bad) = points.iter().position(|c| !c.is_finite()) {
            return Err(MeasureError::NonFinite(bad / dim));
        }
        let weights = check_weights(&weights, normalize)?;
        Ok(DiscreteMeasure { dim, points, weights })
    }

    /// Uniform measure `(1/n) Σ δ_{x_i}`.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self, MeasureError> {
        let n = points.len();
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        Self::new_normalized(points, vec![1.0; n])
    }

    pub fn dirac(x: Vec<f64>) -> Result<Self, MeasureError> {
        Self::new(vec![x], vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Flat coordinate buffer, atom-major.
    pub fn flat_points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    /// Iterates `(weight, point)` pairs.
    pub fn atoms(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        self.weights.iter().copied().zip(self.points())
    }

    /// True when every atom carries the same weight bit-for-bit.
    pub fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|&w| w == w0)
    }

    /// Same weights, new flat coordinates.
    pub fn with_points(&self, points: Vec<f64>) -> Result<Self, MeasureError> {
        Self::from_flat(self.dim, points, self.weights.clone())
    }

    /// Image measure under the translation `x ↦ x + shift`.
    pub fn translate(&self, shift: &[f64]) -> Result<Self, MeasureError> {
        pushforward(self, |x| x.iter().zip(shift).map(|(a, b)| a + b).collect())
    }

    /// Marginal on the coordinate block `range` (atoms kept one-to-one).
    pub fn project(&self, range: std::ops::Range<usize>) -> Result<Self, MeasureError> {
        let k = range.len();
        let mut flat = Vec::with_capacity(self.len() * k);
        for p in self.points() {
            flat.extend_from_slice(&p[range.clone()]);
        }
        Self::from_flat(k, flat, self.weights.clone())
    }
}

/// Euclidean norm.
pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Euclidean distance.
pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// First absolute moment `Σ w_i |x_i|`.
pub fn momentum(mu: &DiscreteMeasure) -> f64 {
    mu.atoms().map(|(w, x)| w * norm(x)).sum()
}

/// Image of `mu` under `f`. Weights are carried over untouched and coincident
/// images stay separate atoms.
pub fn pushforward<F>(mu: &DiscreteMeasure, f: F) -> Result<DiscreteMeasure, MeasureError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut flat = Vec::with_capacity(mu.points.len());
    for x in mu.points() {
        let y = f(x);
        if y.len() != mu.dim {
            return Err(MeasureError::MapDimension {
                expected: mu.dim,
                found: y.len(),
            });
        }
        flat.extend_from_slice(&y);
    }
    if let Some(bad) = flat.iter().position(|c| !c.is_finite()) {
        return Err(MeasureError::NonFinite(bad / mu.dim));
    }
    Ok(DiscreteMeasure {
        dim: mu.dim,
        points: flat,
        weights: mu.weights.clone(),
    })
}

/// Smallest `R` with `supp(mu) ⊂ B(0, R)`.
pub fn support_radius(mu: &DiscreteMeasure) -> f64 {
    mu.points().map(norm).fold(0.0, f64::max)
}

/// Measure on `R^{2d}` whose first `d` coordinates are positions and last `d`
/// are velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiscreteMeasure", into = "DiscreteMeasure")]
pub struct PhaseMeasure {
    inner: DiscreteMeasure,
}

impl TryFrom<DiscreteMeasure> for PhaseMeasure {
    type Error = MeasureError;

    fn try_from(inner: DiscreteMeasure) -> Result<Self, Self::Error> {
        PhaseMeasure::new(inner)
    }
}

impl From<PhaseMeasure> for DiscreteMeasure {
    fn from(p: PhaseMeasure) -> Self {
        p.inner
    }
}

impl PhaseMeasure {
    pub fn new(inner: DiscreteMeasure) -> Result<Self, MeasureError> {
        if inner.dim % 2 != 0 {
            return Err(MeasureError::OddPhaseDimension(inner.dim));
        }
        Ok(PhaseMeasure { inner })
    }

    /// Dimension `d` of the position (and velocity) block.
    pub fn space_dim(&self) -> usize {
        self.inner.dim / 2
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.inner
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let d = self.space_dim();
        &self.inner.point(i)[..d]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        let d = self.space_dim();
        &self.inner.point(i)[d..]
    }

    pub fn positions(&self) -> DiscreteMeasure {
        self.inner
            .project(0..self.space_dim())
            .expect("projection of a valid measure")
    }

    pub fn velocities(&self) -> DiscreteMeasure {
        let d = self.space_dim();
        self.inner.project(d..2 * d).expect("projection of a valid measure")
    }
}
