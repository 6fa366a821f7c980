//! The active-learning loop: initial prior design, then fit → acquire →
//! evaluate until the evaluation budget is spent.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{candidates, AcquisitionParams, AcquisitionUnits};
use crate::gp::{
    fit, ConditionedSurrogate, FitOptions, FittedSurrogate, GpError, KernelHyperparams, Surrogate,
    TrainingSet,
};
use crate::metrics::{kl_gaussian_samples, kl_mc, KlEstimate, MetricsError, WeightedSample};
use crate::nested::{self, DeadPointSample, NsError, NsSettings};
use crate::optim::{minimize_box, MinimizeOptions};
use crate::pool::split_rank_merge;
use crate::targets::{Target, TargetError, TargetSpec};
use crate::transforms::{PriorBox, TransformError};
use crate::util::{derive_seed, rng_from, sq_dist, Workers};

const INIT_TAG: u64 = 0x696e;
const FIT_TAG: u64 = 0x6669;
const NS_TAG: u64 = 0x6e73;
const OPT_TAG: u64 = 0x6f70;
const EXPLORE_TAG: u64 = 0x6578;

/// Squared Euclidean distance (unit cube) below which two points coincide.
const DUPLICATE_SQ: f64 = 1e-16;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("target evaluation failed at {location:?}: {source}")]
    Evaluation {
        location: Vec<f64>,
        #[source]
        source: TargetError,
    },
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("all {0} initial points have zero likelihood")]
    AllInitialInfinite(usize),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Sampling(#[from] NsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("output failed: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Nora,
    Seqopt,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Nora => "nora",
            Strategy::Seqopt => "seqopt",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nora" => Ok(Strategy::Nora),
            "seqopt" => Ok(Strategy::Seqopt),
            _ => Err(format!("unknown strategy '{s}' (expected nora or seqopt)")),
        }
    }
}

fn default_workers() -> usize {
    1
}

fn default_truth_size() -> usize {
    10_000
}

/// A run as configured by the user. Unset options take dimension-dependent
/// defaults, see [`Plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub budget: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub acquisition_units: AcquisitionUnits,
    /// Default: the dimension.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Default: 3 d.
    #[serde(default)]
    pub initial_count: Option<usize>,
    /// Base NS precision before the 5× relaxation. Default 1e-3.
    #[serde(default)]
    pub ns_precision: Option<f64>,
    /// Default: 5 d.
    #[serde(default)]
    pub seqopt_restarts: Option<usize>,
    /// Random hyperparameter restarts without a warm start. Default 2 (d + 1).
    #[serde(default)]
    pub gp_restarts: Option<usize>,
    /// Random restarts added to the warm start on refits. Default d + 1.
    #[serde(default)]
    pub gp_warm_restarts: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    /// Compute the KL to the truth after every fit, not just the final one.
    #[serde(default)]
    pub kl_every_iteration: bool,
    /// Size of the exact truth sample when one can be drawn.
    #[serde(default = "default_truth_size")]
    pub truth_size: usize,
}

impl RunConfig {
    pub fn new(target: TargetSpec, budget: usize) -> Self {
        Self {
            target,
            budget,
            strategy: Strategy::Nora,
            acquisition_units: AcquisitionUnits::Raw,
            batch_size: None,
            initial_count: None,
            ns_precision: None,
            seqopt_restarts: None,
            gp_restarts: None,
            gp_warm_restarts: None,
            workers: 1,
            seed: 0,
            kl_every_iteration: false,
            truth_size: default_truth_size(),
        }
    }

    /// Resolves defaults for a `dim`-dimensional target and validates.
    pub fn plan(&self, dim: usize) -> Result<Plan, DriverError> {
        let bad = |m: String| Err(DriverError::Config(m));
        let batch_size = self.batch_size.unwrap_or(dim);
        let initial_count = self.initial_count.unwrap_or(3 * dim);
        let precision = self.ns_precision.unwrap_or(NsSettings::DEFAULT_PRECISION);
        if dim == 0 {
            return bad("target has no dimensions".into());
        }
        if batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if initial_count < 2 {
            return bad(format!("initial_count {initial_count} below 2"));
        }
        if self.budget < initial_count {
            return bad(format!(
                "budget {} smaller than the initial design ({initial_count})",
                self.budget
            ));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(precision > 0.0 && precision < 0.2) {
            return bad(format!("ns_precision {precision} outside (0, 0.2)"));
        }
        if self.seqopt_restarts == Some(0) {
            return bad("seqopt_restarts must be at least 1".into());
        }
        if self.truth_size < 2 {
            return bad("truth_size must be at least 2".into());
        }
        if batch_size > 4 * dim {
            log::warn!("batch_size {batch_size} is large for dimension {dim}");
        }
        let mut ns_base = NsSettings::defaults(dim, derive_seed(self.seed, &[NS_TAG]));
        ns_base.precision_criterion = precision;
        Ok(Plan {
            dim,
            budget: self.budget,
            strategy: self.strategy,
            acquisition_units: self.acquisition_units,
            batch_size,
            initial_count,
            ns_base,
            seqopt_restarts: self.seqopt_restarts.unwrap_or(5 * dim),
            gp_restarts: self.gp_restarts.unwrap_or(2 * (dim + 1)),
            gp_warm_restarts: self.gp_warm_restarts.unwrap_or(dim + 1),
            workers: self.workers,
            seed: self.seed,
            kl_every_iteration: self.kl_every_iteration,
        })
    }
}

/// Fully resolved run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub dim: usize,
    pub budget: usize,
    pub strategy: Strategy,
    pub acquisition_units: AcquisitionUnits,
    pub batch_size: usize,
    pub initial_count: usize,
    pub ns_base: NsSettings,
    pub seqopt_restarts: usize,
    pub gp_restarts: usize,
    pub gp_warm_restarts: usize,
    pub workers: usize,
    pub seed: u64,
    pub kl_every_iteration: bool,
}

/// Serde adapters writing non-finite floats as the strings `"-inf"`, `"inf"`, `"nan"`.
pub mod real {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "-inf" => Ok(f64::NEG_INFINITY),
                "inf" => Ok(f64::INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::custom(format!("not a number: {s}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&crate::util::fmt_f64(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            struct W(f64);
            impl serde::Serialize for W {
                fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                    super::serialize(&self.0, s)
                }
            }
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&W(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?
                .into_iter()
                .map(from_repr)
                .collect()
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

/// How an iteration chose its batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    /// Uniform prior draws (initial design, or too few finite values to fit).
    Prior,
    Pool,
    /// The pool was empty; the highest-σ dead point was used.
    PoolFallback,
    Optimizer,
    /// The optimizer only found known locations; a prior draw replaced them.
    OptimizerFallback,
}

/// One line of the run record. Contains nothing that depends on timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Finite training values the surrogate was fitted on.
    pub n_train: usize,
    /// Cumulative true-target evaluations after this batch.
    pub n_evals: usize,
    pub acquisition: Acquisition,
    pub hyperparams: Option<KernelHyperparams>,
    #[serde(with = "real::option")]
    pub log_evidence: Option<f64>,
    pub ns_evaluations: Option<usize>,
    pub n_dead: Option<usize>,
    /// Dead points offered to the pool.
    pub n_candidates: Option<usize>,
    /// Acquisition values of the batch, each conditioned on the earlier picks.
    #[serde(with = "real::vec")]
    pub batch_acquisition: Vec<f64>,
    /// User units.
    pub batch: Vec<Vec<f64>>,
    #[serde(with = "real::vec")]
    pub values: Vec<f64>,
    /// Symmetric KL between this iteration's surrogate and the truth.
    #[serde(with = "real::option")]
    pub kl: Option<f64>,
    #[serde(with = "real::option")]
    pub kl_gaussian: Option<f64>,
}

/// Wall-clock seconds per phase of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fit: f64,
    pub acquisition: f64,
    pub evaluation: f64,
    pub metrics: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub n_evals: usize,
    pub n_train: usize,
    pub n_rejected: usize,
    pub hyperparams: KernelHyperparams,
    #[serde(with = "real")]
    pub log_evidence: f64,
    #[serde(with = "real")]
    pub log_evidence_error: f64,
    pub n_dead: usize,
    #[serde(with = "real::option")]
    pub kl: Option<f64>,
    #[serde(with = "real::option")]
    pub kl_forward: Option<f64>,
    #[serde(with = "real::option")]
    pub kl_backward: Option<f64>,
    #[serde(with = "real::option")]
    pub kl_gaussian: Option<f64>,
}

/// Progress notifications, in order.
pub enum Event<'a> {
    Started(&'a Plan),
    Iteration {
        record: &'a IterationRecord,
        timing: &'a Timing,
        /// The NS sample of the surrogate mean this iteration drew from (unit cube).
        dead_points: Option<&'a DeadPointSample>,
    },
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub plan: Plan,
    pub target: String,
    pub prior: PriorBox,
    pub iterations: Vec<IterationRecord>,
    pub timings: Vec<Timing>,
    /// Every evaluated location (user units) in evaluation order.
    pub locations: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub final_surrogate: Arc<FittedSurrogate>,
    /// Unit-cube NS sample of the final surrogate mean.
    pub final_dead_points: DeadPointSample,
    /// The same sample in user units; `log_p` is the surrogate mean.
    pub chain: WeightedSample,
    pub final_record: FinalRecord,
    pub final_timing: Timing,
    pub kl: Option<KlEstimate>,
}

impl RunRecord {
    pub fn n_evals(&self) -> usize {
        self.values.len()
    }

    /// Total acquisition wall-clock over all iterations.
    pub fn acquisition_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.acquisition).sum()
    }

    /// Total NS evaluations of the surrogate during acquisition.
    pub fn ns_evaluations(&self) -> usize {
        self.iterations
            .iter()
            .filter_map(|r| r.ns_evaluations)
            .sum()
    }
}

/// Sample of the target used to score surrogates.
pub struct Truth<'a> {
    pub target: &'a dyn Target,
    pub sample: &'a WeightedSample,
}

/// Symmetric KL between a surrogate chain (user units) and a truth sample.
pub fn kl_to_truth(
    chain: &WeightedSample,
    surrogate: &FittedSurrogate,
    prior: &PriorBox,
    truth: &Truth<'_>,
    workers: &Workers,
) -> Result<(KlEstimate, Option<f64>), DriverError> {
    let lq_at_p = workers
        .map(&chain.locations, |x| truth.target.log_density(x))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let lp_at_q = workers
        .map(&truth.sample.locations, |x| {
            prior.to_unit(x).map(|u| surrogate.raw_mean_at(&u))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mc = kl_mc(chain, &lq_at_p, truth.sample, &lp_at_q)?;
    let gauss = kl_gaussian_samples(chain, truth.sample).ok();
    Ok((mc, gauss))
}

struct State<'a> {
    plan: &'a Plan,
    target: &'a dyn Target,
    prior: PriorBox,
    workers: Workers,
    /// Unit-cube locations and values of finite evaluations.
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    /// Unit-cube locations with zero likelihood.
    rejected: Vec<Vec<f64>>,
    all_x: Vec<Vec<f64>>,
    all_y: Vec<f64>,
    warm: Option<KernelHyperparams>,
}

impl State<'_> {
    fn is_rejected(&self, u: &[f64]) -> bool {
        self.rejected.iter().any(|r| sq_dist(r, u) <= DUPLICATE_SQ)
    }

    fn is_evaluated(&self, u: &[f64]) -> bool {
        self.is_rejected(u) || self.train_x.iter().any(|r| sq_dist(r, u) <= DUPLICATE_SQ)
    }

    /// Evaluates unit-cube points on the target, retrying each failure once.
    fn evaluate(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>, DriverError> {
        let user = batch
            .iter()
            .map(|u| self.prior.from_unit(u))
            .collect::<Result<Vec<_>, _>>()?;
        let target = self.target;
        let once = |x: &Vec<f64>| match target.log_density(x) {
            Ok(v) if v.is_nan() || v == f64::INFINITY => Err(TargetError::NotANumber(x.clone())),
            other => other,
        };
        let results = self.workers.map(&user, |x| {
            once(x).or_else(|e| {
                log::warn!("evaluation at {x:?} failed ({e}), retrying");
                once(x)
            })
        });
        let mut values = Vec::with_capacity(batch.len());
        for ((u, x), r) in batch.iter().zip(&user).zip(results) {
            let v = r.map_err(|source| DriverError::Evaluation {
                location: x.clone(),
                source,
            })?;
            if v == f64::NEG_INFINITY {
                self.rejected.push(u.clone());
            } else {
                self.train_x.push(u.clone());
                self.train_y.push(v);
            }
            self.all_x.push(x.clone());
            self.all_y.push(v);
            values.push(v);
        }
        Ok(values)
    }

    fn fit(&mut self, iteration: usize) -> Result<Arc<FittedSurrogate>, DriverError> {
        let ts = TrainingSet::new(self.train_x.clone(), self.train_y.clone())?;
        let mut opts = FitOptions::for_dim(
            self.plan.dim,
            derive_seed(self.plan.seed, &[FIT_TAG, iteration as u64]),
        );
        opts.warm_start = self.warm.clone();
        opts.restarts = if self.warm.is_some() {
            self.plan.gp_warm_restarts
        } else {
            self.plan.gp_restarts
        };
        let s = fit(ts, &opts, &self.workers)?;
        self.warm = Some(s.hyperparams().clone());
        Ok(s.into_shared())
    }

    fn ns_settings(&self, iteration: usize) -> NsSettings {
        let mut s = NsSettings::scaled(self.train_x.len(), self.plan.dim, &self.plan.ns_base);
        s.seed = derive_seed(self.plan.ns_base.seed, &[iteration as u64]);
        s
    }

    fn sample_mean(
        &self,
        s: &FittedSurrogate,
        iteration: usize,
    ) -> Result<DeadPointSample, DriverError> {
        let settings = self.ns_settings(iteration);
        Ok(nested::run(
            |u: &[f64]| s.raw_mean_at(u),
            self.plan.dim,
            &settings,
            &self.workers,
        )?)
    }

    fn prior_draws(&self, n: usize, tag: &[u64]) -> Vec<Vec<f64>> {
        let mut rng = rng_from(self.plan.seed, tag);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
        while out.len() < n {
            let u: Vec<f64> = (0..self.plan.dim).map(|_| rng.random::<f64>()).collect();
            if !self.is_evaluated(&u) && !out.iter().any(|o| sq_dist(o, &u) <= DUPLICATE_SQ) {
                out.push(u);
            }
        }
        out
    }

    fn chain(&self, dp: &DeadPointSample) -> Result<WeightedSample, DriverError> {
        let prior = &self.prior;
        let locations = dp
            .locations
            .iter()
            .map(|u| prior.from_unit(u))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(WeightedSample::new(
            locations,
            dp.log_weights.clone(),
            dp.log_target.clone(),
        )?)
    }
}

/// Chosen batch in the unit cube with the conditioned acquisition of each pick.
struct Batch {
    points: Vec<Vec<f64>>,
    acquisition: Vec<f64>,
    kind: Acquisition,
    candidates: Option<usize>,
}

fn nora_batch(
    state: &State<'_>,
    base: &Arc<FittedSurrogate>,
    dp: &DeadPointSample,
    size: usize,
) -> Batch {
    let params = AcquisitionParams::in_units(base, state.plan.acquisition_units);
    let locations: Vec<Vec<f64>> = dp
        .locations
        .iter()
        .filter(|u| !state.is_rejected(u))
        .cloned()
        .collect();
    let cands = candidates(base, locations, &params, &state.workers);
    let n_cands = cands.len();
    let pool = split_rank_merge(Arc::clone(base), params, cands, size, &state.workers);
    if !pool.is_empty() {
        return Batch {
            points: pool.locations(),
            acquisition: pool.entries().iter().map(|e| e.conditioned).collect(),
            kind: Acquisition::Pool,
            candidates: Some(n_cands),
        };
    }
    log::warn!("acquisition pool is empty; using the highest-variance dead point");
    let best = dp
        .locations
        .iter()
        .filter(|u| !state.is_rejected(u))
        .map(|u| (u, base.std_at(u)))
        .filter(|(_, s)| *s > 0.0)
        .fold(None::<(&Vec<f64>, f64)>, |b, c| match b {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        });
    let point = match best {
        Some((u, _)) => u.clone(),
        None => state
            .prior_draws(1, &[EXPLORE_TAG, state.all_x.len() as u64])
            .remove(0),
    };
    let a = params.value(base.mean_at(&point), base.std_at(&point));
    Batch {
        points: vec![point],
        acquisition: vec![a],
        kind: Acquisition::PoolFallback,
        candidates: Some(n_cands),
    }
}

/// Multi-start maximization of the acquisition of `s` over the unit cube.
/// Returns the best finite optimum, ties going to the earliest start.
pub fn maximize_acquisition<S: Surrogate>(
    s: &S,
    params: &AcquisitionParams,
    starts: &[Vec<f64>],
    workers: &Workers,
) -> Option<(Vec<f64>, f64)> {
    let d = s.fitted().dim();
    let (lower, upper) = (vec![0.0; d], vec![1.0; d]);
    let opts = MinimizeOptions::default();
    let results = workers.map(starts, |x0| {
        let objective = |x: &[f64]| {
            let g = s.mean_std_gradient(x);
            match params.gradient(&g.mean_grad, g.std, &g.std_grad) {
                Some(grad) => (
                    -params.value(g.mean, g.std),
                    grad.into_iter().map(|v| -v).collect(),
                ),
                None => (f64::INFINITY, vec![0.0; x.len()]),
            }
        };
        let m = minimize_box(objective, x0, &lower, &upper, &opts);
        let a = params.value(s.mean_at(&m.x), s.std_at(&m.x));
        (m.x, a)
    });
    results.into_iter().filter(|(_, a)| a.is_finite()).fold(
        None,
        |best: Option<(Vec<f64>, f64)>, c| match best {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        },
    )
}

fn seqopt_starts(
    state: &State<'_>,
    base: &FittedSurrogate,
    iteration: usize,
    pick: usize,
    attempt: u64,
) -> Vec<Vec<f64>> {
    let d = state.plan.dim;
    let mut rng = rng_from(
        state.plan.seed,
        &[OPT_TAG, iteration as u64, pick as u64, attempt],
    );
    let mut starts: Vec<Vec<f64>> = (0..state.plan.seqopt_restarts)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect();
    // The best training point itself has zero variance, so start just beside it.
    let best = &base.training().locations()[base.training().argmax()];
    starts.push(
        best.iter()
            .map(|v| (v + rng.random_range(-1e-3..1e-3)).clamp(0.0, 1.0))
            .collect(),
    );
    starts
}

fn seqopt_batch(
    state: &State<'_>,
    base: &Arc<FittedSurrogate>,
    iteration: usize,
    size: usize,
) -> Batch {
    let params = AcquisitionParams::in_units(base, state.plan.acquisition_units);
    let mut cs = ConditionedSurrogate::from_base(Arc::clone(base));
    let mut points = Vec::with_capacity(size);
    let mut acquisition = Vec::with_capacity(size);
    let mut kind = Acquisition::Optimizer;
    for pick in 0..size {
        let usable = |r: &Option<(Vec<f64>, f64)>| {
            r.as_ref()
                .is_some_and(|(x, _)| !cs.is_known(x) && !state.is_rejected(x))
        };
        let mut found = maximize_acquisition(
            &cs,
            &params,
            &seqopt_starts(state, base, iteration, pick, 0),
            &state.workers,
        );
        if !usable(&found) {
            found = maximize_acquisition(
                &cs,
                &params,
                &seqopt_starts(state, base, iteration, pick, 1),
                &state.workers,
            );
        }
        let (x, a) = if usable(&found) {
            found.expect("usable optimum")
        } else {
            log::warn!("acquisition optimizer returned a known location; drawing from the prior");
            kind = Acquisition::OptimizerFallback;
            let mut draws = state.prior_draws(size, &[EXPLORE_TAG, iteration as u64, pick as u64]);
            let x = draws
                .drain(..)
                .find(|u| {
                    !points
                        .iter()
                        .any(|p: &Vec<f64>| sq_dist(p, u) <= DUPLICATE_SQ)
                })
                .expect("prior draws are distinct");
            let a = params.value(cs.mean_at(&x), cs.std_at(&x));
            (x, a)
        };
        cs = cs.condition_on(&x).surrogate;
        points.push(x);
        acquisition.push(a);
    }
    Batch {
        points,
        acquisition,
        kind,
        candidates: None,
    }
}

/// Runs the loop on `target` until `config.budget` evaluations are spent.
///
/// `truth`, when given, is used to score surrogates. `observer` sees each
/// record as soon as it is complete, so partial progress survives a failure.
pub fn run(
    config: &RunConfig,
    target: &dyn Target,
    truth: Option<&WeightedSample>,
    observer: &mut dyn FnMut(Event<'_>) -> Result<(), DriverError>,
) -> Result<RunRecord, DriverError> {
    let plan = config.plan(target.dim())?;
    observer(Event::Started(&plan))?;
    let truth = truth.map(|sample| Truth { target, sample });
    let mut state = State {
        plan: &plan,
        target,
        prior: target.prior().clone(),
        workers: Workers::new(plan.workers),
        train_x: Vec::new(),
        train_y: Vec::new(),
        rejected: Vec::new(),
        all_x: Vec::new(),
        all_y: Vec::new(),
        warm: None,
    };
    let mut iterations = Vec::new();
    let mut timings = Vec::new();

    let t0 = Instant::now();
    let initial = state.prior_draws(plan.initial_count, &[INIT_TAG]);
    let values = state.evaluate(&initial)?;
    if state.train_x.is_empty() {
        return Err(DriverError::AllInitialInfinite(plan.initial_count));
    }
    let record = IterationRecord {
        iteration: 0,
        n_train: 0,
        n_evals: state.all_y.len(),
        acquisition: Acquisition::Prior,
        hyperparams: None,
        log_evidence: None,
        ns_evaluations: None,
        n_dead: None,
        n_candidates: None,
        batch_acquisition: Vec::new(),
        batch: state.all_x.clone(),
        values,
        kl: None,
        kl_gaussian: None,
    };
    let timing = Timing {
        evaluation: t0.elapsed().as_secs_f64(),
        ..Default::default()
    };
    observer(Event::Iteration {
        record: &record,
        timing: &timing,
        dead_points: None,
    })?;
    iterations.push(record);
    timings.push(timing);

    let mut iteration = 1;
    while state.all_y.len() < plan.budget {
        let size = plan.batch_size.min(plan.budget - state.all_y.len());
        let mut timing = Timing::default();
        let n_train = state.train_x.len();

        if n_train < 2 {
            log::warn!("only {n_train} finite value(s); drawing the next batch from the prior");
            let t = Instant::now();
            let points = state.prior_draws(size, &[EXPLORE_TAG, iteration as u64]);
            timing.acquisition = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let values = state.evaluate(&points)?;
            timing.evaluation = t.elapsed().as_secs_f64();
            let record = IterationRecord {
                iteration,
                n_train,
                n_evals: state.all_y.len(),
                acquisition: Acquisition::Prior,
                hyperparams: None,
                log_evidence: None,
                ns_evaluations: None,
                n_dead: None,
                n_candidates: None,
                batch_acquisition: vec![f64::NAN; points.len()],
                batch: state.all_x[state.all_x.len() - points.len()..].to_vec(),
                values,
                kl: None,
                kl_gaussian: None,
            };
            observer(Event::Iteration {
                record: &record,
                timing: &timing,
                dead_points: None,
            })?;
            iterations.push(record);
            timings.push(timing);
            iteration += 1;
            continue;
        }

        let t = Instant::now();
        let base = state.fit(iteration)?;
        timing.fit = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (batch, dp) = match plan.strategy {
            Strategy::Nora => {
                let dp = state.sample_mean(&base, iteration)?;
                (nora_batch(&state, &base, &dp, size), Some(dp))
            }
            Strategy::Seqopt => (seqopt_batch(&state, &base, iteration, size), None),
        };
        timing.acquisition = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (mut kl, mut kl_gaussian) = (None, None);
        let mut metric_dp = None;
        if plan.kl_every_iteration {
            if let Some(truth) = &truth {
                let sample = match &dp {
                    Some(dp) => dp.clone(),
                    None => state.sample_mean(&base, iteration)?,
                };
                let chain = state.chain(&sample)?;
                let (mc, g) = kl_to_truth(&chain, &base, &state.prior, truth, &state.workers)?;
                kl = Some(mc.symmetric);
                kl_gaussian = g;
                metric_dp = Some(sample);
            }
        }
        timing.metrics = t.elapsed().as_secs_f64();

        let points: Vec<Vec<f64>> = batch.points.into_iter().take(size).collect();
        let t = Instant::now();
        let values = state.evaluate(&points)?;
        timing.evaluation = t.elapsed().as_secs_f64();

        let shown = dp.as_ref().or(metric_dp.as_ref());
        let record = IterationRecord {
            iteration,
            n_train,
            n_evals: state.all_y.len(),
            acquisition: batch.kind,
            hyperparams: Some(base.hyperparams().clone()),
            log_evidence: shown.map(|d| d.log_evidence),
            ns_evaluations: dp.as_ref().map(|d| d.diagnostics.evaluations),
            n_dead: shown.map(|d| d.len()),
            n_candidates: batch.candidates,
            batch_acquisition: batch.acquisition.into_iter().take(points.len()).collect(),
            batch: state.all_x[state.all_x.len() - points.len()..].to_vec(),
            values,
            kl,
            kl_gaussian,
        };
        observer(Event::Iteration {
            record: &record,
            timing: &timing,
            dead_points: shown,
        })?;
        iterations.push(record);
        timings.push(timing);
        iteration += 1;
    }

    let mut final_timing = Timing::default();
    let t = Instant::now();
    let surrogate = state.fit(iteration)?;
    final_timing.fit = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let dp = state.sample_mean(&surrogate, iteration)?;
    let chain = state.chain(&dp)?;
    final_timing.acquisition = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let scored = match &truth {
        Some(truth) => Some(kl_to_truth(
            &chain,
            &surrogate,
            &state.prior,
            truth,
            &state.workers,
        )?),
        None => None,
    };
    final_timing.metrics = t.elapsed().as_secs_f64();
    let final_record = FinalRecord {
        n_evals: state.all_y.len(),
        n_train: state.train_x.len(),
        n_rejected: state.rejected.len(),
        hyperparams: surrogate.hyperparams().clone(),
        log_evidence: dp.log_evidence,
        log_evidence_error: dp.log_evidence_error,
        n_dead: dp.len(),
        kl: scored.as_ref().map(|(k, _)| k.symmetric),
        kl_forward: scored.as_ref().map(|(k, _)| k.forward),
        kl_backward: scored.as_ref().map(|(k, _)| k.backward),
        kl_gaussian: scored.as_ref().and_then(|(_, g)| *g),
    };

    Ok(RunRecord {
        plan: plan.clone(),
        target: target.name(),
        prior: state.prior.clone(),
        iterations,
        timings,
        locations: state.all_x,
        values: state.all_y,
        final_surrogate: surrogate,
        final_dead_points: dp,
        chain,
        final_record,
        final_timing,
        kl: scored.map(|(k, _)| k),
    })
}
