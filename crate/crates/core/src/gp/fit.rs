use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{FittedSurrogate, GpError, KernelHyperparams, TrainingSet, DEFAULT_NOISE, MAX_NOISE};
use crate::optim::{minimize_box, MinimizeOptions};
use crate::util::{rng_from, Workers};

/// Log marginal likelihood and its gradient with respect to
/// `(log C, log l_1, ..., log l_d)`.
#[derive(Debug, Clone)]
pub struct LogMarginal {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Diagonal noise that made the factorization succeed.
    pub noise: f64,
}

/// Kernel matrix without the noise term.
pub(crate) fn kernel_matrix(ts: &TrainingSet, hp: &KernelHyperparams) -> DMatrix<f64> {
    let n = ts.len();
    let x = ts.locations();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.output_scale;
        for j in 0..i {
            let v = super::kernel_eval(&x[i], &x[j], hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + noise I`, escalating the noise ×10 up to [`MAX_NOISE`].
pub(crate) fn factorize(
    kf: &DMatrix<f64>,
    noise: f64,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64), GpError> {
    let mut level = noise;
    loop {
        let mut k = kf.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += level;
        }
        if let Some(chol) = k.cholesky() {
            return Ok((chol, level));
        }
        if level >= MAX_NOISE {
            return Err(GpError::Factorization { noise: level });
        }
        level = (level * 10.0).min(MAX_NOISE);
    }
}

/// `log p(y | X, θ) = -½ yᵀ(K+σ²I)⁻¹y - ½ log|K+σ²I| - (N/2) log 2π`
pub fn log_marginal_likelihood(
    hp: &KernelHyperparams,
    ts: &TrainingSet,
) -> Result<LogMarginal, GpError> {
    let n = ts.len();
    if n == 0 {
        return Err(GpError::Empty);
    }
    let kf = kernel_matrix(ts, hp);
    let (chol, noise) = factorize(&kf, hp.noise)?;
    let y = DVector::from_column_slice(ts.std_values());
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();

    // d/dθ_j = ½ tr((ααᵀ - K⁻¹) ∂K/∂θ_j)
    let kinv = chol.inverse();
    let d = ts.dim();
    let x = ts.locations();
    let inv_l2: Vec<f64> = hp.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut gradient = vec![0.0; d + 1];
    for i in 0..n {
        let w_ii = alpha[i] * alpha[i] - kinv[(i, i)];
        gradient[0] += 0.5 * w_ii * kf[(i, i)];
        for j in 0..i {
            // symmetric off-diagonal pair counted twice
            let w = (alpha[i] * alpha[j] - kinv[(i, j)]) * kf[(i, j)];
            gradient[0] += w;
            for (k, g) in gradient[1..].iter_mut().enumerate() {
                let diff = x[i][k] - x[j][k];
                *g += w * diff * diff * inv_l2[k];
            }
        }
    }
    Ok(LogMarginal {
        value,
        gradient,
        noise,
    })
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Random restarts drawn uniformly in the log of the hyperparameter box.
    pub restarts: usize,
    pub seed: u64,
    pub noise: f64,
    /// Extra start (typically the previous iteration's optimum).
    pub warm_start: Option<KernelHyperparams>,
    pub optimizer: MinimizeOptions,
}

impl FitOptions {
    /// `2 (d + 1)` restarts.
    pub fn for_dim(dim: usize, seed: u64) -> Self {
        Self {
            restarts: 2 * (dim + 1),
            seed,
            noise: DEFAULT_NOISE,
            warm_start: None,
            optimizer: MinimizeOptions {
                max_iterations: 100,
                gradient_tolerance: 1e-5,
                value_tolerance: 1e-9,
                memory: 8,
            },
        }
    }
}

/// Maximizes the log marginal likelihood over the hyperparameter box with
/// multi-start projected L-BFGS; the best restart wins.
pub fn fit(
    ts: TrainingSet,
    opts: &FitOptions,
    workers: &Workers,
) -> Result<FittedSurrogate, GpError> {
    if ts.len() < 2 {
        return Err(GpError::TooFewPoints {
            needed: 2,
            got: ts.len(),
        });
    }
    let dim = ts.dim();
    let (lower, upper) = KernelHyperparams::log_bounds(dim);
    let mut rng = rng_from(opts.seed, &[0x6670]);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = &opts.warm_start {
        if w.dim() == dim {
            let mut t = w.to_log_params();
            for ((v, lo), hi) in t.iter_mut().zip(&lower).zip(&upper) {
                *v = v.clamp(*lo, *hi);
            }
            starts.push(t);
        }
    }
    for _ in 0..opts.restarts.max(1) {
        starts.push(
            lower
                .iter()
                .zip(&upper)
                .map(|(lo, hi)| rng.random_range(*lo..=*hi))
                .collect(),
        );
    }

    let noise = opts.noise;
    let results = workers.map(&starts, |start| {
        let objective = |theta: &[f64]| {
            let hp = KernelHyperparams::from_log_params(theta, noise);
            match log_marginal_likelihood(&hp, &ts) {
                Ok(lm) => (-lm.value, lm.gradient.iter().map(|g| -g).collect()),
                Err(_) => (f64::INFINITY, vec![0.0; theta.len()]),
            }
        };
        let m = minimize_box(objective, start, &lower, &upper, &opts.optimizer);
        m.value.is_finite().then_some(m)
    });

    let best = results
        .into_iter()
        .flatten()
        .fold(None::<crate::optim::Minimum>, |best, m| match best {
            Some(b) if b.value <= m.value => Some(b),
            _ => Some(m),
        })
        .ok_or(GpError::AllRestartsFailed {
            restarts: starts.len(),
        })?;
    let mut theta = best.x;
    for ((v, lo), hi) in theta.iter_mut().zip(&lower).zip(&upper) {
        *v = v.clamp(*lo, *hi);
    }
    let hp = KernelHyperparams::from_log_params(&theta, noise);
    FittedSurrogate::new(ts, hp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Surrogate;
    use rand::SeedableRng;

    fn random_set(n: usize, d: usize, seed: u64) -> TrainingSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let locs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect();
        let vals = locs
            .iter()
            .map(|x| {
                -x.iter().map(|v| (v - 0.4) * (v - 0.4) * 10.0).sum::<f64>()
                    + rng.random::<f64>() * 0.1
            })
            .collect();
        TrainingSet::new(locs, vals).unwrap()
    }

    #[test]
    fn single_point_closed_form() {
        let ts = TrainingSet::new(vec![vec![0.3, 0.8]], vec![0.0]).unwrap();
        for (c, l) in [(1.0, 0.5), (37.0, 0.02), (1e-3, 1.0)] {
            let hp = KernelHyperparams::new(c, vec![l, l], 1e-8).unwrap();
            let lm = log_marginal_likelihood(&hp, &ts).unwrap();
            let expected = -0.5 * (c + 1e-8f64).ln() - 0.5 * (2.0 * PI).ln();
            assert!(
                (lm.value - expected).abs() < 1e-12,
                "{} vs {}",
                lm.value,
                expected
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..10 {
            let ts = random_set(5, 2, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let theta = vec![
                rng.random_range(-2.0..3.0),
                rng.random_range(-3.0..-0.2),
                rng.random_range(-3.0..-0.2),
            ];
            let hp = KernelHyperparams::from_log_params(&theta, 1e-6);
            let g = log_marginal_likelihood(&hp, &ts).unwrap().gradient;
            let h = 1e-6;
            for j in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[j] += h;
                tm[j] -= h;
                let fp =
                    log_marginal_likelihood(&KernelHyperparams::from_log_params(&tp, 1e-6), &ts)
                        .unwrap()
                        .value;
                let fm =
                    log_marginal_likelihood(&KernelHyperparams::from_log_params(&tm, 1e-6), &ts)
                        .unwrap()
                        .value;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-3);
                assert!(
                    rel < 1e-4,
                    "seed {seed} param {j}: fd {fd} analytic {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn value_is_permutation_invariant() {
        let ts = random_set(7, 3, 4);
        let hp = KernelHyperparams::new(2.0, vec![0.3, 0.5, 0.2], 1e-8).unwrap();
        let a = log_marginal_likelihood(&hp, &ts).unwrap().value;
        let b = log_marginal_likelihood(&hp, &ts.permuted(&[6, 2, 4, 0, 1, 5, 3]).unwrap())
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn fit_stays_in_prior_box() {
        let ts = random_set(12, 2, 9);
        let s = fit(ts, &FitOptions::for_dim(2, 1), &Workers::serial()).unwrap();
        let hp = s.hyperparams();
        assert!(hp.validate().is_ok(), "{hp:?}");
    }

    #[test]
    fn constant_target_gives_zero_mean() {
        let locs: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64 / 5.0, (i * i) as f64 / 25.0])
            .collect();
        let ts = TrainingSet::new(locs, vec![0.0; 6]).unwrap();
        let s = fit(ts, &FitOptions::for_dim(2, 3), &Workers::serial()).unwrap();
        let probes: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.37) % 1.0, (i as f64 * 0.61) % 1.0])
            .collect();
        for m in s.predict_mean(&probes) {
            assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_in_one_dimension_is_reproduced() {
        let f = |x: f64| -20.0 * (x - 0.6) * (x - 0.6);
        let locs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 9.0]).collect();
        let vals: Vec<f64> = locs.iter().map(|x| f(x[0])).collect();
        let ts = TrainingSet::new(locs, vals).unwrap();
        let scaler = ts.scaler();
        let s = fit(ts, &FitOptions::for_dim(1, 5), &Workers::serial()).unwrap();
        let probes: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64 + 0.5) / 100.0]).collect();
        let pred = s.predict_mean(&probes);
        let rmse = (probes
            .iter()
            .zip(&pred)
            .map(|(x, m)| (m - scaler.standardize(f(x[0]))).powi(2))
            .sum::<f64>()
            / 100.0)
            .sqrt();
        assert!(rmse < 1e-2, "rmse {rmse}");
    }
}
