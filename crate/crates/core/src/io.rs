//! Plain-text sample files and the surrogate snapshot.
//!
//! Chains are whitespace-separated rows `weight log_target x_1 … x_d` with
//! normalized weights; dead-point dumps use `log_weight log_target x_1 … x_d`.
//! Lines starting with `#` are comments.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{FittedSurrogate, GpError, KernelHyperparams, TrainingSet};
use crate::metrics::WeightedSample;
use crate::nested::DeadPointSample;
use crate::transforms::{PriorBox, TransformError};
use crate::util::fmt_f64;

pub const SURROGATE_SCHEMA: &str = "nora-surrogate/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no samples")]
    Empty,
    #[error("surrogate file: {0}")]
    Surrogate(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "-inf" => Some(f64::NEG_INFINITY),
        "inf" => Some(f64::INFINITY),
        _ => s.parse().ok(),
    }
}

fn write_rows(
    mut w: impl Write,
    header: &str,
    rows: impl Iterator<Item = (f64, f64, Vec<f64>)>,
) -> std::io::Result<()> {
    writeln!(w, "# {header}")?;
    for (a, b, x) in rows {
        let mut line = format!("{} {}", fmt_f64(a), fmt_f64(b));
        for v in x {
            line.push(' ');
            line.push_str(&fmt_f64(v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

/// Rows `(first, second, x)` of a sample file; every row has the same width.
fn read_rows(r: impl BufRead) -> Result<Vec<(f64, f64, Vec<f64>)>, IoError> {
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let bad = |reason: String| IoError::Parse {
            line: i + 1,
            reason,
        };
        let vals = t
            .split_whitespace()
            .map(|f| parse_f64(f).ok_or_else(|| bad(format!("not a number: '{f}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() < 3 {
            return Err(bad(format!("{} columns, need at least 3", vals.len())));
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(bad(format!("{} columns, expected {w}", vals.len())))
            }
            _ => {}
        }
        if vals[2..].iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite coordinate".into()));
        }
        rows.push((vals[0], vals[1], vals[2..].to_vec()));
    }
    if rows.is_empty() {
        return Err(IoError::Empty);
    }
    Ok(rows)
}

pub fn write_chain(w: impl Write, sample: &WeightedSample) -> std::io::Result<()> {
    let weights = sample.normalized_weights();
    let header = format!(
        "weight log_target {}",
        (1..=sample.dim())
            .map(|i| format!("x{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    write_rows(
        w,
        &header,
        weights
            .into_iter()
            .zip(&sample.log_p)
            .zip(&sample.locations)
            .map(|((w, lp), x)| (w, *lp, x.clone())),
    )
}

pub fn read_chain(r: impl BufRead) -> Result<WeightedSample, IoError> {
    let rows = read_rows(r)?;
    let mut locations = Vec::with_capacity(rows.len());
    let mut log_weights = Vec::with_capacity(rows.len());
    let mut log_p = Vec::with_capacity(rows.len());
    for (i, (w, lp, x)) in rows.into_iter().enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(IoError::Parse {
                line: i + 1,
                reason: format!("invalid weight {w}"),
            });
        }
        log_weights.push(w.ln());
        log_p.push(lp);
        locations.push(x);
    }
    WeightedSample::new(locations, log_weights, log_p).map_err(|_| IoError::Empty)
}

/// Dead points mapped to user units.
pub fn write_dead_points(
    w: impl Write,
    dp: &DeadPointSample,
    prior: &PriorBox,
) -> Result<(), IoError> {
    let mut rows = Vec::with_capacity(dp.len());
    for ((u, lw), lt) in dp.locations.iter().zip(&dp.log_weights).zip(&dp.log_target) {
        rows.push((*lw, *lt, prior.from_unit(u)?));
    }
    let header = format!(
        "log_weight log_target {}",
        (1..=prior.dim())
            .map(|i| format!("x{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    write_rows(w, &header, rows.into_iter())?;
    Ok(())
}

/// Log-weights, log-target values and user-unit locations.
pub fn read_dead_points(r: impl BufRead) -> Result<WeightedSample, IoError> {
    let rows = read_rows(r)?;
    let (mut x, mut lw, mut lt) = (Vec::new(), Vec::new(), Vec::new());
    for (a, b, loc) in rows {
        lw.push(a);
        lt.push(b);
        x.push(loc);
    }
    WeightedSample::new(x, lw, lt).map_err(|_| IoError::Empty)
}

/// Everything needed to rebuild a fitted surrogate exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateFile {
    pub schema: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub hyperparams: KernelHyperparams,
    /// Unit-cube training locations.
    pub locations: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl SurrogateFile {
    pub fn new(s: &FittedSurrogate, prior: &PriorBox) -> Self {
        Self {
            schema: SURROGATE_SCHEMA.to_string(),
            lower: prior.lower().to_vec(),
            upper: prior.upper().to_vec(),
            hyperparams: s.hyperparams().clone(),
            locations: s.training().locations().to_vec(),
            values: s.training().raw_values().to_vec(),
        }
    }

    pub fn build(&self) -> Result<LoadedSurrogate, IoError> {
        if self.schema != SURROGATE_SCHEMA {
            return Err(IoError::Surrogate(format!(
                "schema '{}', expected '{SURROGATE_SCHEMA}'",
                self.schema
            )));
        }
        let prior = PriorBox::new(self.lower.clone(), self.upper.clone())?;
        let ts = TrainingSet::new(self.locations.clone(), self.values.clone())?;
        let surrogate = FittedSurrogate::new(ts, self.hyperparams.clone())?;
        Ok(LoadedSurrogate { surrogate, prior })
    }
}

pub struct LoadedSurrogate {
    pub surrogate: FittedSurrogate,
    pub prior: PriorBox,
}

impl LoadedSurrogate {
    /// Surrogate log-density at a user-unit point; `-inf` outside the box.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self.prior.to_unit(x) {
            Ok(u) => self.surrogate.raw_mean_at(&u),
            Err(_) => f64::NEG_INFINITY,
        }
    }
}
