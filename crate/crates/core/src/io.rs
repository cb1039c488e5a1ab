//! Plain-text formats.
//!
//! Measures are CSV with a `w,x0,x1,...` header and one atom per row.
//! Trajectories use a long format with one row per (time, atom):
//! `t,atom,w,x0..,v0..` where `v` is the velocity snapshot at that time.
//! Every float is written with 17 significant digits so files round-trip
//! exactly and reruns are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::inclusion::TrajectoryBundle;
use crate::measures::{DiscreteMeasure, MeasureError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn join(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

pub fn measure_to_csv(mu: &DiscreteMeasure) -> String {
    let mut out = String::from("w");
    for k in 0..mu.dim() {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for (w, x) in mu.atoms() {
        let _ = writeln!(out, "{},{}", fmt_f64(w), join(x));
    }
    out
}

/// Parses a measure; a header row starting with a non-number is skipped.
pub fn measure_from_csv(text: &str) -> Result<DiscreteMeasure, IoError> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        let values = fields
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| IoError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.len() < 2 {
            return Err(IoError::Parse {
                line: i + 1,
                message: "expected a weight followed by coordinates".into(),
            });
        }
        weights.push(values[0]);
        points.push(values[1..].to_vec());
    }
    Ok(DiscreteMeasure::new(points, weights)?)
}

pub fn read_measure(path: &Path) -> Result<DiscreteMeasure, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    measure_from_csv(&text)
}

/// Long-format trajectory table. Velocities at `t_k` are the left snapshot of
/// interval `k`; the final time uses the right snapshot of the last interval.
/// Without snapshots the velocity columns are omitted.
pub fn bundle_to_csv(bundle: &TrajectoryBundle) -> String {
    let d = bundle.dim;
    let with_v = bundle.has_fields();
    let mut out = String::from("t,atom,w");
    for k in 0..d {
        let _ = write!(out, ",x{k}");
    }
    if with_v {
        for k in 0..d {
            let _ = write!(out, ",v{k}");
        }
    }
    out.push('\n');
    let n = bundle.steps();
    for step in 0..=n {
        let t = fmt_f64(bundle.grid.time(step));
        let vel = if !with_v {
            None
        } else if step < n {
            Some(&bundle.field_left[step])
        } else {
            Some(&bundle.field_right[n - 1])
        };
        for (i, w) in bundle.weights.iter().enumerate() {
            let _ = write!(out, "{t},{i},{},{}", fmt_f64(*w), join(&bundle.positions[step][i * d..(i + 1) * d]));
            if let Some(v) = vel {
                let _ = write!(out, ",{}", join(&v[i * d..(i + 1) * d]));
            }
            out.push('\n');
        }
    }
    out
}

/// Auxiliary state per grid time: `t,a0,a1,...`.
pub fn aux_to_csv(bundle: &TrajectoryBundle) -> String {
    let m = bundle.aux.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for k in 0..m {
        let _ = write!(out, ",a{k}");
    }
    out.push('\n');
    for (step, a) in bundle.aux.iter().enumerate() {
        let _ = write!(out, "{}", fmt_f64(bundle.grid.time(step)));
        if !a.is_empty() {
            let _ = write!(out, ",{}", join(a));
        }
        out.push('\n');
    }
    out
}

/// Control schedule: `k,t,u0,u1,...` per interval.
pub fn schedule_to_csv(grid_times: &[f64], values: &[Vec<f64>]) -> String {
    let m = values.first().map_or(0, Vec::len);
    let mut out = String::from("k,t");
    for k in 0..m {
        let _ = write!(out, ",u{k}");
    }
    out.push('\n');
    for (k, u) in values.iter().enumerate() {
        let _ = writeln!(out, "{k},{},{}", fmt_f64(grid_times[k]), join(u));
    }
    out
}

/// Replaces every float in a JSON value by its 17-digit string form, so
/// serialized reports do not depend on the shortest-representation printer.
pub fn stable_json(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Number(n) if n.is_f64() => Value::String(fmt_f64(n.as_f64().unwrap_or(f64::NAN))),
        Value::Array(a) => Value::Array(a.into_iter().map(stable_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, stable_json(v))).collect()),
        other => other,
    }
}
