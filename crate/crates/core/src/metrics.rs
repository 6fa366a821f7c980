//! Symmetric KL divergence from weighted Monte Carlo samples and from the
//! Gaussian approximation, plus weighted moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nested::DeadPointSample;
use crate::util::logsumexp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("sample has no finite weight")]
    NoWeight,
    #[error("effective sample size {ess:.3} below 2")]
    TooFewEffective { ess: f64 },
    #[error("{0} covariance is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}

/// Locations with log-weights and the owning density's log value (up to a
/// constant) at each location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub locations: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub log_p: Vec<f64>,
}

impl WeightedSample {
    pub fn new(
        locations: Vec<Vec<f64>>,
        log_weights: Vec<f64>,
        log_p: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        if locations.len() != log_weights.len() || locations.len() != log_p.len() {
            return Err(MetricsError::Length(format!(
                "{} locations, {} weights, {} densities",
                locations.len(),
                log_weights.len(),
                log_p.len()
            )));
        }
        if !log_weights.iter().any(|w| w.is_finite()) {
            return Err(MetricsError::NoWeight);
        }
        Ok(Self {
            locations,
            log_weights,
            log_p,
        })
    }

    pub fn equally_weighted(
        locations: Vec<Vec<f64>>,
        log_p: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        let n = locations.len();
        Self::new(locations, vec![0.0; n], log_p)
    }

    /// Dead points with locations passed through `map` (e.g. to user units).
    pub fn from_dead_points(
        dp: &DeadPointSample,
        map: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self, MetricsError> {
        Self::new(
            dp.locations.iter().map(|x| map(x)).collect(),
            dp.log_weights.clone(),
            dp.log_target.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations.first().map_or(0, |x| x.len())
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let z = logsumexp(&self.log_weights);
        self.log_weights.iter().map(|w| (w - z).exp()).collect()
    }

    /// Kish effective sample size.
    pub fn effective_size(&self) -> f64 {
        1.0 / self.normalized_weights().iter().map(|w| w * w).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub symmetric: f64,
    /// D(P‖Q)
    pub forward: f64,
    /// D(Q‖P)
    pub backward: f64,
    /// Weighted P points where `log q = -inf`.
    pub q_zero_at_p: Vec<usize>,
    /// Weighted Q points where `log p = -inf`.
    pub p_zero_at_q: Vec<usize>,
}

/// `D(P‖Q)` from a weighted sample of `P` with unnormalized log-densities.
///
/// `D = Σ w (lp − lq) + log Σ w exp(lq − lp)`: the second term estimates
/// `log(Z_q / Z_p)`, so constant offsets in either density cancel. Returns
/// `+inf` and the offending indices if `q` vanishes at a weighted point.
pub fn kl_directed(log_weights: &[f64], lp: &[f64], lq: &[f64]) -> (f64, Vec<usize>) {
    let z = logsumexp(log_weights);
    let mut offending = Vec::new();
    let mut mean = 0.0;
    let mut ratio_terms = Vec::with_capacity(lp.len());
    for i in 0..lp.len() {
        let lw = log_weights[i] - z;
        if lw == f64::NEG_INFINITY || lp[i] == f64::NEG_INFINITY {
            continue;
        }
        if lq[i] == f64::NEG_INFINITY {
            offending.push(i);
            continue;
        }
        mean += lw.exp() * (lp[i] - lq[i]);
        ratio_terms.push(lw + lq[i] - lp[i]);
    }
    if !offending.is_empty() {
        return (f64::INFINITY, offending);
    }
    (mean + logsumexp(&ratio_terms), offending)
}

/// Symmetric KL `½(D(P‖Q) + D(Q‖P))` from samples of both distributions.
pub fn kl_mc(
    p: &WeightedSample,
    log_q_at_p: &[f64],
    q: &WeightedSample,
    log_p_at_q: &[f64],
) -> Result<KlEstimate, MetricsError> {
    if log_q_at_p.len() != p.len() || log_p_at_q.len() != q.len() {
        return Err(MetricsError::Length("cross densities".into()));
    }
    let (forward, q_zero_at_p) = kl_directed(&p.log_weights, &p.log_p, log_q_at_p);
    let (backward, p_zero_at_q) = kl_directed(&q.log_weights, &q.log_p, log_p_at_q);
    if !q_zero_at_p.is_empty() || !p_zero_at_q.is_empty() {
        log::warn!(
            "KL is infinite: q vanishes at {} P points, p vanishes at {} Q points",
            q_zero_at_p.len(),
            p_zero_at_q.len()
        );
    }
    Ok(KlEstimate {
        symmetric: 0.5 * (forward + backward),
        forward,
        backward,
        q_zero_at_p,
        p_zero_at_q,
    })
}

/// `D(P‖Q)` between Gaussians:
/// `½(tr(C_Q⁻¹ C_P) − d + Δᵀ C_Q⁻¹ Δ + log(det C_Q / det C_P))`.
pub fn kl_gaussian_directed(
    mean_p: &DVector<f64>,
    cov_p: &DMatrix<f64>,
    mean_q: &DVector<f64>,
    cov_q: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let d = mean_p.len();
    for n in [mean_q.len(), cov_p.nrows(), cov_q.nrows()] {
        if n != d {
            return Err(MetricsError::Dimension(d, n));
        }
    }
    if mean_p == mean_q && cov_p == cov_q {
        return Ok(0.0);
    }
    let chol_p = cov_p
        .clone()
        .cholesky()
        .ok_or(MetricsError::NotPositiveDefinite("P"))?;
    let chol_q = cov_q
        .clone()
        .cholesky()
        .ok_or(MetricsError::NotPositiveDefinite("Q"))?;
    let trace = chol_q.solve(cov_p).trace();
    let delta = mean_q - mean_p;
    let maha = delta.dot(&chol_q.solve(&delta));
    let log_det = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let value = 0.5 * (trace - d as f64 + maha + log_det(&chol_q) - log_det(&chol_p));
    Ok(value.max(0.0))
}

pub fn kl_gaussian(
    mean_p: &DVector<f64>,
    cov_p: &DMatrix<f64>,
    mean_q: &DVector<f64>,
    cov_q: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let f = kl_gaussian_directed(mean_p, cov_p, mean_q, cov_q)?;
    let b = kl_gaussian_directed(mean_q, cov_q, mean_p, cov_p)?;
    Ok(0.5 * (f + b))
}

/// Weighted mean and (biased, weight-normalized) covariance.
pub fn moments(sample: &WeightedSample) -> Result<(DVector<f64>, DMatrix<f64>), MetricsError> {
    if sample.is_empty() {
        return Err(MetricsError::NoWeight);
    }
    let ess = sample.effective_size();
    if ess.is_nan() || ess < 2.0 - 1e-9 {
        return Err(MetricsError::TooFewEffective { ess });
    }
    let d = sample.dim();
    let w = sample.normalized_weights();
    let mut mean = DVector::zeros(d);
    for (x, wi) in sample.locations.iter().zip(&w) {
        mean += DVector::from_column_slice(x) * *wi;
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, wi) in sample.locations.iter().zip(&w) {
        let r = DVector::from_column_slice(x) - &mean;
        cov += (&r * r.transpose()) * *wi;
    }
    Ok((mean, cov))
}

/// Symmetric KL between the Gaussian approximations of two samples.
pub fn kl_gaussian_samples(p: &WeightedSample, q: &WeightedSample) -> Result<f64, MetricsError> {
    let (mp, cp) = moments(p)?;
    let (mq, cq) = moments(q)?;
    kl_gaussian(&mp, &cp, &mq, &cq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid_gaussian(mu: f64, sd: f64, other_mu: f64) -> (WeightedSample, Vec<f64>) {
        let xs: Vec<f64> = (0..20001)
            .map(|i| -12.0 + 25.0 * i as f64 / 20000.0)
            .collect();
        let lp: Vec<f64> = xs.iter().map(|x| -0.5 * ((x - mu) / sd).powi(2)).collect();
        let lq: Vec<f64> = xs
            .iter()
            .map(|x| -0.5 * ((x - other_mu) / sd).powi(2))
            .collect();
        let s = WeightedSample::new(xs.iter().map(|x| vec![*x]).collect(), lp.clone(), lp).unwrap();
        (s, lq)
    }

    #[test]
    fn identical_samples_give_zero() {
        let (p, _) = grid_gaussian(0.0, 1.0, 0.0);
        let lp = p.log_p.clone();
        let kl = kl_mc(&p, &lp, &p, &lp).unwrap();
        assert!(kl.symmetric.abs() < 1e-12);
    }

    #[test]
    fn one_sigma_shift_gives_half() {
        let (p, lq_at_p) = grid_gaussian(0.0, 1.0, 1.0);
        let (q, lp_at_q) = grid_gaussian(1.0, 1.0, 0.0);
        let kl = kl_mc(&p, &lq_at_p, &q, &lp_at_q).unwrap();
        assert!((kl.symmetric - 0.5).abs() < 0.01, "{}", kl.symmetric);
        let swapped = kl_mc(&q, &lp_at_q, &p, &lq_at_p).unwrap();
        assert_eq!(kl.symmetric, swapped.symmetric);
    }

    #[test]
    fn normalization_invariance() {
        let (p, lq_at_p) = grid_gaussian(0.0, 1.0, 1.0);
        let (q, lp_at_q) = grid_gaussian(1.0, 1.0, 0.0);
        let base = kl_mc(&p, &lq_at_p, &q, &lp_at_q).unwrap().symmetric;
        let shift = |v: &[f64], c: f64| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let p2 = WeightedSample {
            log_p: shift(&p.log_p, 17.0),
            ..p.clone()
        };
        let q2 = WeightedSample {
            log_p: shift(&q.log_p, -4.0),
            ..q.clone()
        };
        let moved = kl_mc(&p2, &shift(&lq_at_p, -4.0), &q2, &shift(&lp_at_q, 17.0))
            .unwrap()
            .symmetric;
        assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn vanishing_density_is_infinite_with_diagnostic() {
        let p =
            WeightedSample::equally_weighted(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        let kl = kl_mc(&p, &[0.0, f64::NEG_INFINITY], &p, &[0.0, 0.0]).unwrap();
        assert_eq!(kl.symmetric, f64::INFINITY);
        assert_eq!(kl.q_zero_at_p, vec![1]);
    }

    #[test]
    fn gaussian_closed_forms() {
        let m0 = DVector::from_vec(vec![0.0]);
        let m1 = DVector::from_vec(vec![1.0]);
        let c1 = DMatrix::from_element(1, 1, 1.0);
        assert!((kl_gaussian(&m0, &c1, &m1, &c1).unwrap() - 0.5).abs() < 1e-12);
        let c2 = DMatrix::from_element(1, 1, 2.0);
        let d = kl_gaussian_directed(&m0, &c2, &m0, &c1).unwrap();
        assert!((d - 0.5 * (2.0 - 1.0 + 0.5f64.ln())).abs() < 1e-12);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let m = DVector::from_vec(vec![0.2, -0.1]);
        assert_eq!(kl_gaussian(&m, &cov, &m, &cov).unwrap(), 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(kl_gaussian(&m, &cov, &m, &bad).is_err());
    }

    #[test]
    fn moments_of_corners_and_degenerate() {
        let s = WeightedSample::equally_weighted(
            vec![
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
            vec![0.0; 4],
        )
        .unwrap();
        let (m, c) = moments(&s).unwrap();
        assert_eq!(m.as_slice(), &[0.5, 0.5]);
        assert!((c[(0, 0)] - 0.25).abs() < 1e-15 && c[(0, 1)].abs() < 1e-15);
        let one = WeightedSample::equally_weighted(vec![vec![0.3, 0.3]], vec![0.0]).unwrap();
        assert!(matches!(
            moments(&one),
            Err(MetricsError::TooFewEffective { .. })
        ));
    }

    #[test]
    fn sampled_covariance_is_recovered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
        let cov = &l * l.transpose();
        let xs: Vec<Vec<f64>> = (0..10000)
            .map(|_| {
                let z = DVector::from_iterator(2, (0..2).map(|_| StandardNormal.sample(&mut rng)));
                (&l * z).as_slice().to_vec()
            })
            .collect();
        let s = WeightedSample::equally_weighted(xs, vec![0.0; 10000]).unwrap();
        let (_, c) = moments(&s).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((c[(i, j)] - cov[(i, j)]).abs() < 0.05 * cov[(i, j)].abs());
            }
        }
    }
}
