//! Gaussian-process surrogate of the standardized log-posterior on the unit
//! hypercube.
//!
//! The kernel is a product of squared-exponential kernels with one length
//! scale per dimension,
//!
//! ```text
//! k(a, b) = C * exp(-sum_i (a_i - b_i)^2 / (2 l_i^2))
//! ```
//!
//! plus a small fixed diagonal noise term. The zero prior mean combined with
//! output standardization makes the surrogate revert to the sample mean of the
//! training values far from data.
//!
//! [`FittedSurrogate`] is immutable once built. Kriging-believer conditioning
//! produces a [`ConditionedSurrogate`], which layers "ghost" points (assumed
//! to take the base mean value) over a shared base: only the ghost rows of the
//! extended Cholesky factor are stored, so conditioning costs `O(N k)` per
//! ghost and never refits hyperparameters.

mod fit;
mod surrogate;

pub use fit::{fit, log_marginal_likelihood, FitOptions, LogMarginal};
pub use surrogate::{
    BaseSolve, ConditionedSurrogate, Conditioning, FittedSurrogate, MeanStdGradient, Surrogate,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transforms::{OutputScaler, TransformError};

pub const OUTPUT_SCALE_BOUNDS: (f64, f64) = (1e-3, 1e4);
pub const LENGTH_SCALE_BOUNDS: (f64, f64) = (0.01, 1.0);
/// Diagonal noise variance added to the kernel matrix, in standardized units.
pub const DEFAULT_NOISE: f64 = 1e-8;
/// Largest diagonal noise reached by ×10 escalation on factorization failure.
pub const MAX_NOISE: f64 = 1e-4;
/// Euclidean distance (unit coordinates) below which two locations coincide.
pub const DUPLICATE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("training set is empty")]
    Empty,
    #[error("need at least {needed} training points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("training location {index} has dimension {got}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("training location {index} lies outside the unit hypercube")]
    OutsideCube { index: usize },
    #[error("training value {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("training locations {first} and {second} are duplicates")]
    Duplicate { first: usize, second: usize },
    #[error("kernel matrix factorization failed even with noise {noise:e}")]
    Factorization { noise: f64 },
    #[error("all {restarts} hyperparameter restarts failed")]
    AllRestartsFailed { restarts: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub output_scale: f64,
    pub length_scales: Vec<f64>,
    /// Diagonal noise variance.
    pub noise: f64,
}

impl KernelHyperparams {
    pub fn new(output_scale: f64, length_scales: Vec<f64>, noise: f64) -> Result<Self, GpError> {
        let hp = Self {
            output_scale,
            length_scales,
            noise,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let (clo, chi) = OUTPUT_SCALE_BOUNDS;
        let (llo, lhi) = LENGTH_SCALE_BOUNDS;
        // small slack for values that went through exp(log(.))
        let slack = 1e-9;
        if !(self.output_scale >= clo * (1.0 - slack) && self.output_scale <= chi * (1.0 + slack)) {
            return Err(GpError::Hyperparams(format!(
                "output scale {} outside [{clo}, {chi}]",
                self.output_scale
            )));
        }
        if self.length_scales.is_empty() {
            return Err(GpError::Hyperparams("no length scales".into()));
        }
        for (i, &l) in self.length_scales.iter().enumerate() {
            if !(l >= llo * (1.0 - slack) && l <= lhi * (1.0 + slack)) {
                return Err(GpError::Hyperparams(format!(
                    "length scale {i} = {l} outside [{llo}, {lhi}]"
                )));
            }
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(GpError::Hyperparams(format!(
                "noise {} not positive",
                self.noise
            )));
        }
        Ok(())
    }

    /// `(log C, log l_1, ..., log l_d)`
    pub fn to_log_params(&self) -> Vec<f64> {
        std::iter::once(self.output_scale.ln())
            .chain(self.length_scales.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn from_log_params(theta: &[f64], noise: f64) -> Self {
        Self {
            output_scale: theta[0].exp(),
            length_scales: theta[1..].iter().map(|t| t.exp()).collect(),
            noise,
        }
    }

    pub fn log_bounds(dim: usize) -> (Vec<f64>, Vec<f64>) {
        let lower = std::iter::once(OUTPUT_SCALE_BOUNDS.0.ln())
            .chain(std::iter::repeat_n(LENGTH_SCALE_BOUNDS.0.ln(), dim))
            .collect();
        let upper = std::iter::once(OUTPUT_SCALE_BOUNDS.1.ln())
            .chain(std::iter::repeat_n(LENGTH_SCALE_BOUNDS.1.ln(), dim))
            .collect();
        (lower, upper)
    }
}

/// Product-RBF kernel value between two locations.
pub fn kernel_eval(a: &[f64], b: &[f64], hp: &KernelHyperparams) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&hp.length_scales)
        .map(|((x, y), l)| {
            let t = (x - y) / l;
            t * t
        })
        .sum();
    hp.output_scale * (-0.5 * r2).exp()
}

/// Evaluated locations (unit coordinates) with raw and standardized values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    locations: Vec<Vec<f64>>,
    raw_values: Vec<f64>,
    std_values: Vec<f64>,
    scaler: OutputScaler,
}

impl TrainingSet {
    /// Validates the points and fits the output scaler. A single point gets the
    /// identity scaler.
    pub fn new(locations: Vec<Vec<f64>>, raw_values: Vec<f64>) -> Result<Self, GpError> {
        let scaler = if raw_values.len() >= 2 {
            OutputScaler::fit(&raw_values)?
        } else {
            OutputScaler::identity()
        };
        Self::with_scaler(locations, raw_values, scaler)
    }

    pub fn with_scaler(
        locations: Vec<Vec<f64>>,
        raw_values: Vec<f64>,
        scaler: OutputScaler,
    ) -> Result<Self, GpError> {
        if locations.is_empty() {
            return Err(GpError::Empty);
        }
        if locations.len() != raw_values.len() {
            return Err(GpError::Hyperparams(format!(
                "{} locations but {} values",
                locations.len(),
                raw_values.len()
            )));
        }
        let dim = locations[0].len();
        for (index, x) in locations.iter().enumerate() {
            if x.len() != dim || dim == 0 {
                return Err(GpError::Dimension {
                    index,
                    expected: dim,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(GpError::OutsideCube { index });
            }
        }
        for (index, &value) in raw_values.iter().enumerate() {
            if !value.is_finite() {
                return Err(GpError::NonFinite { index, value });
            }
        }
        let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
        for i in 0..locations.len() {
            for j in 0..i {
                if crate::util::sq_dist(&locations[i], &locations[j]) < tol2 {
                    return Err(GpError::Duplicate {
                        first: j,
                        second: i,
                    });
                }
            }
        }
        let std_values = scaler.standardize_all(&raw_values);
        Ok(Self {
            locations,
            raw_values,
            std_values,
            scaler,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations[0].len()
    }

    pub fn locations(&self) -> &[Vec<f64>] {
        &self.locations
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.raw_values
    }

    pub fn std_values(&self) -> &[f64] {
        &self.std_values
    }

    pub fn scaler(&self) -> OutputScaler {
        self.scaler
    }

    /// Largest standardized value.
    pub fn max_std_value(&self) -> f64 {
        self.std_values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        self.std_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                },
            )
            .0
    }

    /// Same data in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, GpError> {
        Self::with_scaler(
            order.iter().map(|&i| self.locations[i].clone()).collect(),
            order.iter().map(|&i| self.raw_values[i]).collect(),
            self.scaler,
        )
    }
}
