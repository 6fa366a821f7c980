//! Log-posterior targets: the synthetic benchmark suite and external
//! processes speaking a line-delimited JSON protocol.

mod builtin;
mod external;

pub use builtin::{
    curved_degeneracy, himmelblau2d, himmelblau4d, himmelblau_modes, ring, BuiltinKind,
    BuiltinTarget, GaussianTarget,
};
pub use external::{ExternalTarget, PROTOCOL};

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::WeightedSample;
use crate::nested::{self, NsError, NsSettings};
use crate::transforms::{PriorBox, TransformError};
use crate::util::Workers;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("unknown target '{0}'")]
    Unknown(String),
    #[error("invalid target specification: {0}")]
    InvalidSpec(String),
    #[error("failed to start '{command}': {reason}")]
    Spawn { command: String, reason: String },
    #[error("protocol error ({reason}): {line}")]
    Protocol { reason: String, line: String },
    #[error("target process exited")]
    ChildExited,
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("target returned nan at {0:?}")]
    NotANumber(Vec<f64>),
    #[error("point has dimension {got}, target expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Sampling(#[from] NsError),
}

/// Analytic facts about a target, used for validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Global maxima in user units.
    pub modes: Vec<Vec<f64>>,
    /// Exact mean and covariance for Gaussian targets (untruncated).
    pub gaussian: Option<(Vec<f64>, Vec<Vec<f64>>)>,
    /// Dimensions along which the density is constant.
    pub flat_dims: Vec<usize>,
}

/// A log-posterior over a box prior, evaluated in user units.
pub trait Target: Send + Sync {
    fn name(&self) -> String;

    fn prior(&self) -> &PriorBox;

    /// `-inf` marks a zero-likelihood region; NaN is reported as an error.
    fn log_density(&self, x: &[f64]) -> Result<f64, TargetError>;

    fn reference(&self) -> Option<&Reference> {
        None
    }

    /// Cheap, pure and safe to evaluate many times (used to build truth samples).
    fn is_analytic(&self) -> bool {
        false
    }

    /// An exact sample of the target restricted to its box, if available.
    fn exact_sample(&self, _n: usize, _seed: u64) -> Option<Vec<Vec<f64>>> {
        None
    }

    fn dim(&self) -> usize {
        self.prior().dim()
    }
}

/// How a run names its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    /// `curved_degeneracy`, `ring[:MU:SIGMA]`, `himmelblau2d`, `himmelblau4d`,
    /// `gaussian_random:D[:SEED]`.
    Builtin(String),
    External {
        external: ExternalSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub command: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub timeout_s: Option<f64>,
}

impl TargetSpec {
    pub fn build(&self) -> Result<Arc<dyn Target>, TargetError> {
        match self {
            TargetSpec::Builtin(name) => Ok(Arc::new(BuiltinTarget::parse(name)?)),
            TargetSpec::External { external } => {
                let prior = PriorBox::new(external.lower.clone(), external.upper.clone())?;
                let timeout = match external.timeout_s {
                    Some(t) if t > 0.0 && t.is_finite() => Duration::from_secs_f64(t),
                    Some(t) => {
                        return Err(TargetError::InvalidSpec(format!(
                            "timeout {t} must be positive"
                        )))
                    }
                    None => external::DEFAULT_TIMEOUT,
                };
                Ok(Arc::new(ExternalTarget::new(
                    &external.command,
                    prior,
                    timeout,
                )))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            TargetSpec::Builtin(name) => name.clone(),
            TargetSpec::External { external } => format!("external:{}", external.command),
        }
    }
}

/// `(name, description)` of every builtin target.
pub fn builtin_catalog() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "curved_degeneracy",
            "2d ridge along x2 = 4 x1^4, box [-1,1]x[-1,2]",
        ),
        (
            "ring",
            "2d ring of radius 1 and width 0.05, box [-2,2]^2 (ring:MU:SIGMA to override)",
        ),
        ("himmelblau2d", "2d function with four maxima, box [-5,5]^2"),
        (
            "himmelblau4d",
            "himmelblau2d in (x1,x2), flat in (x3,x4), box [-5,5]^4",
        ),
        (
            "gaussian_random:D[:SEED]",
            "random correlated Gaussian in D dimensions, box [-1,1]^D",
        ),
    ]
}

/// Settings for reference nested-sampling runs on analytic targets.
pub fn reference_settings(dim: usize, seed: u64) -> NsSettings {
    let n_live = (250 * dim).max(500);
    NsSettings {
        n_live,
        precision_criterion: 1e-4,
        num_repeats: 5 * dim,
        n_prior: 2 * n_live,
        seed,
    }
}

/// A sample of the target in user units with its log-density values.
///
/// Gaussian targets are sampled exactly (`n` equally weighted draws); other
/// analytic targets get a weighted sample from a long nested-sampling run,
/// cached per target name and seed.
pub fn truth_sample(
    target: &dyn Target,
    n: usize,
    seed: u64,
    workers: &Workers,
) -> Result<Arc<WeightedSample>, TargetError> {
    type Cache = Mutex<HashMap<(String, usize, u64), Arc<WeightedSample>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let key = (target.name(), n, seed);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(s) = cache.lock().expect("truth cache").get(&key) {
        return Ok(Arc::clone(s));
    }
    let sample = if let Some(xs) = target.exact_sample(n, seed) {
        let lp = xs
            .iter()
            .map(|x| target.log_density(x))
            .collect::<Result<Vec<_>, _>>()?;
        WeightedSample::equally_weighted(xs, lp)
            .map_err(|e| TargetError::InvalidSpec(e.to_string()))?
    } else {
        if !target.is_analytic() {
            return Err(TargetError::InvalidSpec(format!(
                "no reference sample available for {}",
                target.name()
            )));
        }
        let prior = target.prior().clone();
        let f = |u: &[f64]| {
            prior
                .from_unit(u)
                .ok()
                .and_then(|x| target.log_density(&x).ok())
                .unwrap_or(f64::NAN)
        };
        let dp = nested::run(
            f,
            prior.dim(),
            &reference_settings(prior.dim(), seed),
            workers,
        )?;
        WeightedSample::new(
            dp.locations
                .iter()
                .map(|u| prior.from_unit(u))
                .collect::<Result<Vec<_>, _>>()?,
            dp.log_weights,
            dp.log_target,
        )
        .map_err(|e| TargetError::InvalidSpec(e.to_string()))?
    };
    let sample = Arc::new(sample);
    cache
        .lock()
        .expect("truth cache")
        .insert(key, Arc::clone(&sample));
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{kl_gaussian, moments};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn gaussian_moments_match_dense_sample() {
        for d in [2, 4, 8] {
            let t = BuiltinTarget::gaussian_random(d, 11);
            let s = truth_sample(&t, 20_000, 5, &Workers::serial()).unwrap();
            let (m, c) = moments(&s).unwrap();
            let (m0, c0) = t.reference().unwrap().gaussian.clone().unwrap();
            let m0 = DVector::from_vec(m0);
            let c0 = DMatrix::from_fn(d, d, |i, j| c0[i][j]);
            let kl = kl_gaussian(&m0, &c0, &m, &c).unwrap();
            assert!(kl < 0.01, "d={d} kl={kl}");
        }
    }

    #[test]
    fn spec_deserialization() {
        let s: TargetSpec = serde_json::from_str("\"ring\"").unwrap();
        assert_eq!(s.build().unwrap().dim(), 2);
        let s: TargetSpec = serde_json::from_str(
            r#"{"external": {"command": "true", "lower": [0, 0], "upper": [1, 1]}}"#,
        )
        .unwrap();
        assert_eq!(s.label(), "external:true");
        assert_eq!(s.build().unwrap().dim(), 2);
        assert!(serde_json::from_str::<TargetSpec>(
            r#"{"external": {"command": "true", "lower": [0], "upper": [1], "extra": 1}}"#
        )
        .is_err());
        let bad: TargetSpec = serde_json::from_str(
            r#"{"external": {"command": "true", "lower": [1], "upper": [0]}}"#,
        )
        .unwrap();
        assert!(bad.build().is_err());
        assert!(TargetSpec::Builtin("nope".into()).build().is_err());
    }

    #[test]
    fn analytic_truth_via_nested_sampling() {
        let t = BuiltinTarget::parse("curved_degeneracy").unwrap();
        let s = truth_sample(&t, 0, 1, &Workers::serial()).unwrap();
        assert!(s.effective_size() > 500.0);
        assert!(s.locations.iter().all(|x| t.prior().contains(x)));
        let w = s.normalized_weights();
        let mean_x1: f64 = s.locations.iter().zip(&w).map(|(x, w)| x[0] * w).sum();
        assert!((mean_x1 - 0.45).abs() < 0.05, "{mean_x1}");
    }
}
