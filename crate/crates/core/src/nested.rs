//! Nested sampling on the unit hypercube.
//!
//! Live points are kept sorted by `(log_target, tie)`, where `tie` is a
//! uniform draw attached to every point so that plateaus still have a strict
//! order. Each round removes the lowest `max(1, n_live / 10)` live points,
//! assigning prior-volume shells from the deterministic shrinkage
//! `log X -= 1 / n` (with `n` the live count at each removal), and replaces
//! them by independent whitened slice-sampling chains started from surviving
//! live points. Chains are seeded from `(seed, round, slot)` only, so the
//! output does not depend on the number of workers.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{derive_seed, logaddexp, logsubexp, logsumexp, rng_from, Workers};

const NS_TAG: u64 = 0x6e73;
/// Step-out expansions (in whitened unit widths) before a chain is re-seeded.
pub const MAX_EXPANSIONS: usize = 100;
const MAX_SHRINKS: usize = 200;
/// Safety stop on the number of dead points.
const MAX_DEAD_FACTOR: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NsError {
    #[error("no finite target value among {draws} prior draws")]
    NoFinitePrior { draws: usize },
    #[error("target returned {value} at {location:?}")]
    InvalidTarget { location: Vec<f64>, value: f64 },
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error("sample has no positive weight")]
    NoWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsSettings {
    pub n_live: usize,
    /// Stop when the live points hold less than this fraction of the evidence.
    pub precision_criterion: f64,
    /// Slice-sampling steps per replacement.
    pub num_repeats: usize,
    pub n_prior: usize,
    pub seed: u64,
}

impl NsSettings {
    pub const DEFAULT_PRECISION: f64 = 1e-3;

    pub fn defaults(dim: usize, seed: u64) -> Self {
        Self {
            n_live: 25 * dim,
            precision_criterion: Self::DEFAULT_PRECISION,
            num_repeats: 2 * dim,
            n_prior: 50 * dim,
            seed,
        }
    }

    /// Settings for sampling a surrogate trained on `n_train` points:
    /// `n_live = min(3 n_train, 25 d)` (never below `2 d`), `num_repeats = 5 d`,
    /// precision relaxed 5× from `base`, `n_prior = 2 n_live`.
    pub fn scaled(n_train: usize, dim: usize, base: &NsSettings) -> Self {
        let n_live = (3 * n_train).min(25 * dim).max(2 * dim);
        Self {
            n_live,
            precision_criterion: 5.0 * base.precision_criterion,
            num_repeats: 5 * dim,
            n_prior: 2 * n_live,
            seed: base.seed,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), NsError> {
        if dim == 0 {
            return Err(NsError::Settings("dimension must be at least 1".into()));
        }
        if self.n_live < 2 * dim {
            return Err(NsError::Settings(format!(
                "n_live {} below 2·d = {}",
                self.n_live,
                2 * dim
            )));
        }
        if self.num_repeats == 0 {
            return Err(NsError::Settings("num_repeats must be positive".into()));
        }
        if !(self.precision_criterion > 0.0 && self.precision_criterion < 1.0) {
            return Err(NsError::Settings(format!(
                "precision criterion {} outside (0, 1)",
                self.precision_criterion
            )));
        }
        if self.n_prior < self.n_live {
            return Err(NsError::Settings(format!(
                "n_prior {} below n_live {}",
                self.n_prior, self.n_live
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NsDiagnostics {
    pub evaluations: usize,
    /// Chains restarted from a random live point after a runaway step-out.
    pub reseeds: usize,
    pub rounds: usize,
    pub n_live: usize,
    /// The safety stop on the dead-point count was hit.
    pub truncated: bool,
}

/// Weighted dead points in order of increasing target value. Points with a
/// `-inf` target are dropped (zero weight); their prior volume still counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadPointSample {
    pub locations: Vec<Vec<f64>>,
    pub log_target: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub log_evidence: f64,
    pub log_evidence_error: f64,
    pub diagnostics: NsDiagnostics,
}

impl DeadPointSample {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations.first().map_or(0, |x| x.len())
    }

    /// Posterior weights summing to one.
    pub fn posterior_weights(&self) -> Vec<f64> {
        let z = logsumexp(&self.log_weights);
        self.log_weights.iter().map(|w| (w - z).exp()).collect()
    }

    /// Kish effective sample size.
    pub fn effective_size(&self) -> f64 {
        let w = self.posterior_weights();
        1.0 / w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Draws `n` locations with probability proportional to the weights.
    pub fn posterior_resample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, NsError> {
        let max = self
            .log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(NsError::NoWeight);
        }
        let w: Vec<f64> = self.log_weights.iter().map(|v| (v - max).exp()).collect();
        let dist = WeightedIndex::new(&w).map_err(|_| NsError::NoWeight)?;
        let mut rng = rng_from(seed, &[NS_TAG, 0x7273]);
        Ok((0..n)
            .map(|_| self.locations[dist.sample(&mut rng)].clone())
            .collect())
    }
}

#[derive(Debug, Clone)]
struct Point {
    x: Vec<f64>,
    logl: f64,
    tie: f64,
}

impl Point {
    fn key(&self) -> (f64, f64) {
        (self.logl, self.tie)
    }
}

fn above(logl: f64, tie: f64, threshold: (f64, f64)) -> bool {
    logl > threshold.0 || (logl == threshold.0 && tie > threshold.1)
}

fn cmp_key(a: (f64, f64), b: (f64, f64)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

fn in_cube(x: &[f64]) -> bool {
    x.iter().all(|v| (0.0..=1.0).contains(v))
}

fn checked<F: Fn(&[f64]) -> f64>(target: &F, x: &[f64]) -> Result<f64, NsError> {
    let v = target(x);
    if v.is_nan() || v == f64::INFINITY {
        return Err(NsError::InvalidTarget {
            location: x.to_vec(),
            value: v,
        });
    }
    Ok(v)
}

/// Lower Cholesky factor of the live-point covariance plus `1e-10 I`.
fn whitening(live: &[Point], dim: usize) -> DMatrix<f64> {
    let n = live.len() as f64;
    let mut mean = DVector::zeros(dim);
    for p in live {
        mean += DVector::from_column_slice(&p.x);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in live {
        let d = DVector::from_column_slice(&p.x) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n.max(1.0);
    for i in 0..dim {
        cov[(i, i)] += 1e-10;
    }
    match cov.clone().cholesky() {
        Some(c) => c.l(),
        None => DMatrix::from_diagonal(&cov.diagonal().map(|v| v.max(1e-10).sqrt())),
    }
}

struct ChainResult {
    point: Point,
    evaluations: usize,
    reseeds: usize,
}

fn slice_chain<F: Fn(&[f64]) -> f64>(
    target: &F,
    live: &[Point],
    threshold: (f64, f64),
    chol: &DMatrix<f64>,
    repeats: usize,
    seed: u64,
) -> Result<ChainResult, NsError> {
    let dim = chol.nrows();
    let mut rng = <crate::util::Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut cur = live[rng.random_range(0..live.len())].clone();
    let mut evaluations = 0;
    let mut reseeds = 0;

    let inside = |x: &[f64], evaluations: &mut usize| -> Result<bool, NsError> {
        if !in_cube(x) {
            return Ok(false);
        }
        *evaluations += 1;
        Ok(checked(target, x)? >= threshold.0)
    };

    'repeat: for _ in 0..repeats {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let white = DVector::from_iterator(dim, z.iter().map(|v| v / norm));
        let dir = chol * white;
        let origin = cur.x.clone();
        let at = |t: f64| -> Vec<f64> {
            origin
                .iter()
                .zip(dir.iter())
                .map(|(a, d)| a + t * d)
                .collect()
        };

        let r: f64 = rng.random();
        let mut left = -r;
        let mut right = 1.0 - r;
        let mut expansions = 0;
        while inside(&at(left), &mut evaluations)? {
            left -= 1.0;
            expansions += 1;
            if expansions > MAX_EXPANSIONS {
                reseeds += 1;
                cur = live[rng.random_range(0..live.len())].clone();
                continue 'repeat;
            }
        }
        while inside(&at(right), &mut evaluations)? {
            right += 1.0;
            expansions += 1;
            if expansions > MAX_EXPANSIONS {
                reseeds += 1;
                cur = live[rng.random_range(0..live.len())].clone();
                continue 'repeat;
            }
        }
        for _ in 0..MAX_SHRINKS {
            let t = rng.random_range(left..right);
            let x = at(t);
            if in_cube(&x) {
                evaluations += 1;
                let logl = checked(target, &x)?;
                let tie: f64 = rng.random();
                if above(logl, tie, threshold) {
                    cur = Point { x, logl, tie };
                    continue 'repeat;
                }
            }
            if t < 0.0 {
                left = t;
            } else {
                right = t;
            }
        }
    }
    Ok(ChainResult {
        point: cur,
        evaluations,
        reseeds,
    })
}

/// Runs nested sampling of `target` over `[0, 1]^dim`.
///
/// `target` may return `-inf`; NaN or `+inf` is an error.
pub fn run<F>(
    target: F,
    dim: usize,
    settings: &NsSettings,
    workers: &Workers,
) -> Result<DeadPointSample, NsError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    settings.validate(dim)?;
    let n_live = settings.n_live;
    let mut rng = rng_from(settings.seed, &[NS_TAG]);
    let mut diagnostics = NsDiagnostics {
        n_live,
        ..Default::default()
    };

    let draws: Vec<(Vec<f64>, f64)> = (0..settings.n_prior)
        .map(|_| ((0..dim).map(|_| rng.random()).collect(), rng.random()))
        .collect();
    let values = workers.map(&draws, |(x, _)| checked(&target, x));
    diagnostics.evaluations += draws.len();
    let mut live: Vec<Point> = Vec::with_capacity(draws.len());
    for ((x, tie), v) in draws.into_iter().zip(values) {
        live.push(Point { x, logl: v?, tie });
    }
    if live.iter().all(|p| p.logl == f64::NEG_INFINITY) {
        return Err(NsError::NoFinitePrior {
            draws: settings.n_prior,
        });
    }
    live.sort_by(|a, b| cmp_key(a.key(), b.key()));

    let mut dead: Vec<(Point, f64)> = Vec::new();
    let mut log_x = 0.0f64;
    let mut log_z = f64::NEG_INFINITY;
    // Removes `p` with `n` live points, shrinking the volume by exp(-1/n).
    let kill =
        |p: Point, n: usize, log_x: &mut f64, log_z: &mut f64, dead: &mut Vec<(Point, f64)>| {
            let next = *log_x - 1.0 / n as f64;
            let lw = p.logl + logsubexp(*log_x, next);
            *log_x = next;
            *log_z = logaddexp(*log_z, lw);
            dead.push((p, lw));
        };

    let surplus = live.len() - n_live;
    for (i, p) in live
        .drain(..surplus)
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
    {
        kill(p, settings.n_prior - i, &mut log_x, &mut log_z, &mut dead);
    }

    let batch = (n_live / 10).max(1);
    let log_precision = settings.precision_criterion.ln();
    let max_dead = MAX_DEAD_FACTOR * n_live;
    loop {
        let live_l: Vec<f64> = live.iter().map(|p| p.logl).collect();
        let log_z_live = logsumexp(&live_l) + log_x - (n_live as f64).ln();
        if log_z_live.is_finite() && log_z_live - logaddexp(log_z, log_z_live) < log_precision {
            break;
        }
        if dead.len() >= max_dead {
            log::warn!("nested sampling stopped after {} dead points", dead.len());
            diagnostics.truncated = true;
            break;
        }
        let mut threshold = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for j in 0..batch {
            let p = live.remove(0);
            threshold = p.key();
            kill(p, n_live - j, &mut log_x, &mut log_z, &mut dead);
        }
        let chol = whitening(&live, dim);
        let round = diagnostics.rounds as u64;
        let slots: Vec<u64> = (0..batch as u64).collect();
        let results = workers.map(&slots, |&j| {
            slice_chain(
                &target,
                &live,
                threshold,
                &chol,
                settings.num_repeats,
                derive_seed(settings.seed, &[NS_TAG, round, j]),
            )
        });
        for r in results {
            let r = r?;
            diagnostics.evaluations += r.evaluations;
            diagnostics.reseeds += r.reseeds;
            let pos = live
                .binary_search_by(|q| cmp_key(q.key(), r.point.key()))
                .unwrap_or_else(|e| e);
            live.insert(pos, r.point);
        }
        diagnostics.rounds += 1;
    }

    let log_share = log_x - (n_live as f64).ln();
    for p in live {
        let lw = p.logl + log_share;
        log_z = logaddexp(log_z, lw);
        dead.push((p, lw));
    }

    let mut locations = Vec::with_capacity(dead.len());
    let mut log_target = Vec::with_capacity(dead.len());
    let mut log_weights = Vec::with_capacity(dead.len());
    for (p, lw) in dead {
        if lw == f64::NEG_INFINITY {
            continue;
        }
        locations.push(p.x);
        log_target.push(p.logl);
        log_weights.push(lw);
    }
    let info: f64 = log_weights
        .iter()
        .zip(&log_target)
        .map(|(w, l)| (w - log_z).exp() * (l - log_z))
        .sum();
    Ok(DeadPointSample {
        locations,
        log_target,
        log_weights,
        log_evidence: log_z,
        log_evidence_error: (info.max(0.0) / n_live as f64).sqrt(),
        diagnostics,
    })
}
