//! Acquisition function `a(x) = 2ζ(μ(x) − p_max) + log σ(x)`.
//!
//! Surrogates predict standardized values. By default the acquisition is
//! evaluated in raw log-posterior units, which weights the mean term by the
//! output scale; [`AcquisitionUnits::Standardized`] skips that rescaling.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::gp::{BaseSolve, ConditionedSurrogate, FittedSurrogate, Surrogate};
use crate::util::Workers;

/// Standard deviations below this give the `-inf` sentinel.
pub const SIGMA_FLOOR: f64 = 1e-15;

pub fn default_zeta(dim: usize) -> f64 {
    (dim as f64).powf(-0.85)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionUnits {
    #[default]
    Raw,
    Standardized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub zeta: f64,
    /// Largest standardized training value (ghost points excluded).
    pub p_max: f64,
    /// Output scale applied to the standardized mean and std (1 for standardized units).
    pub y_scale: f64,
}

impl AcquisitionParams {
    /// Raw-unit parameters with the default ζ.
    pub fn for_surrogate(s: &FittedSurrogate) -> Self {
        Self::in_units(s, AcquisitionUnits::Raw)
    }

    pub fn in_units(s: &FittedSurrogate, units: AcquisitionUnits) -> Self {
        Self {
            zeta: default_zeta(s.dim()),
            p_max: s.p_max(),
            y_scale: match units {
                AcquisitionUnits::Raw => s.scaler().scale,
                AcquisitionUnits::Standardized => 1.0,
            },
        }
    }

    /// Acquisition from the standardized mean and std.
    pub fn value(&self, mean: f64, std: f64) -> f64 {
        if std < SIGMA_FLOOR || std.is_nan() {
            return f64::NEG_INFINITY;
        }
        2.0 * self.zeta * self.y_scale * (mean - self.p_max) + (self.y_scale * std).ln()
    }

    /// Gradient of the acquisition from mean/std gradients; `None` at the sentinel.
    pub fn gradient(&self, mean_grad: &[f64], std: f64, std_grad: &[f64]) -> Option<Vec<f64>> {
        if std < SIGMA_FLOOR || std.is_nan() {
            return None;
        }
        Some(
            mean_grad
                .iter()
                .zip(std_grad)
                .map(|(m, s)| 2.0 * self.zeta * self.y_scale * m + s / std)
                .collect(),
        )
    }
}

pub fn acquisition_at<S: Surrogate + ?Sized>(s: &S, x: &[f64], p: &AcquisitionParams) -> f64 {
    p.value(s.mean_at(x), s.std_at(x))
}

pub fn acquisition_values<S: Surrogate + ?Sized>(
    s: &S,
    xs: &[Vec<f64>],
    p: &AcquisitionParams,
) -> Vec<f64> {
    let mean = s.predict_mean(xs);
    let std = s.predict_std(xs);
    mean.iter()
        .zip(&std)
        .map(|(m, sd)| p.value(*m, *sd))
        .collect()
}

/// A candidate location with its cached base solve, so conditioned
/// acquisitions only need the ghost part.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub location: Vec<f64>,
    pub mean: f64,
    pub unconditioned: f64,
    solve: Arc<BaseSolve>,
}

impl Candidate {
    pub fn new(base: &FittedSurrogate, location: Vec<f64>, p: &AcquisitionParams) -> Self {
        let solve = base.base_solve(&location);
        let mean = base.mean_at(&location);
        let std = if solve.known {
            0.0
        } else {
            (base.hyperparams().output_scale - solve.sq_norm)
                .max(0.0)
                .sqrt()
        };
        Self {
            unconditioned: p.value(mean, std),
            location,
            mean,
            solve: Arc::new(solve),
        }
    }

    pub fn base_solve(&self) -> &BaseSolve {
        &self.solve
    }

    /// Acquisition under a surrogate sharing this candidate's base.
    pub fn conditioned(&self, s: &ConditionedSurrogate, p: &AcquisitionParams) -> f64 {
        if s.ghost_count() == 0 {
            return self.unconditioned;
        }
        let var = s.variance_with(&self.location, &self.solve);
        p.value(self.mean, var.sqrt())
    }
}

/// Builds candidates for many locations on the worker pool.
pub fn candidates(
    base: &FittedSurrogate,
    locations: Vec<Vec<f64>>,
    p: &AcquisitionParams,
    workers: &Workers,
) -> Vec<Candidate> {
    let chunk = locations.len().div_ceil(workers.count() * 4).max(1);
    let groups: Vec<&[Vec<f64>]> = locations.chunks(chunk).collect();
    workers
        .map(&groups, |g| {
            g.iter()
                .map(|x| Candidate::new(base, x.clone(), p))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
}
