use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Reference, Target, TargetError};
use crate::transforms::PriorBox;
use crate::util::rng_from;

const GAUSSIAN_TAG: u64 = 0x6761;

pub fn curved_degeneracy(x: &[f64]) -> f64 {
    let a = 10.0 * (0.45 - x[0]);
    let b = 20.0 * (x[1] / 4.0 - x[0].powi(4));
    -a * a / 4.0 - b * b
}

/// Ring of radius `mu`. The quadratic term is divided by `sigma`, not
/// `sigma^2`, while the normalization uses `sigma^2`.
pub fn ring(x: &[f64], mu: f64, sigma: f64) -> f64 {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    -0.5 * ((r - mu).powi(2) / sigma + (2.0 * PI * sigma * sigma).ln())
}

/// `-½[100 (x1² − x2 − 11)² + (x1 + x2² − 7)²]`
pub fn himmelblau2d(x: &[f64]) -> f64 {
    let a = x[0] * x[0] - x[1] - 11.0;
    let b = x[0] + x[1] * x[1] - 7.0;
    -0.5 * (100.0 * a * a + b * b)
}

pub fn himmelblau4d(x: &[f64]) -> f64 {
    himmelblau2d(&x[..2])
}

/// Real solutions of `x1² − x2 = 11, x1 + x2² = 7`: substituting
/// `x2 = x1² − 11` leaves the quartic `x1⁴ − 22 x1² + x1 + 114 = 0`.
pub fn himmelblau_modes() -> Vec<Vec<f64>> {
    let p = |t: f64| t.powi(4) - 22.0 * t * t + t + 114.0;
    let dp = |t: f64| 4.0 * t.powi(3) - 44.0 * t + 1.0;
    let mut roots: Vec<f64> = Vec::new();
    let steps = 20000;
    let (lo, hi) = (-6.0, 6.0);
    for i in 0..steps {
        let a = lo + (hi - lo) * i as f64 / steps as f64;
        let b = lo + (hi - lo) * (i + 1) as f64 / steps as f64;
        if p(a) == 0.0 || p(a).signum() != p(b).signum() {
            let mut t = 0.5 * (a + b);
            for _ in 0..50 {
                let step = p(t) / dp(t);
                t -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            if !roots.iter().any(|r| (r - t).abs() < 1e-9) {
                roots.push(t);
            }
        }
    }
    roots.iter().map(|&t| vec![t, t * t - 11.0]).collect()
}

/// Multivariate normal with a seeded random mean and correlation structure.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianTarget {
    /// Mean uniform in `[-0.5, 0.5]^d`; covariance `Q diag(λ) Qᵀ` with a random
    /// orthogonal `Q` and `λ` log-uniform over a condition-number-20 range,
    /// scaled so the widest 3σ extent is 0.5.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[GAUSSIAN_TAG, dim as u64]);
        let mean = DVector::from_iterator(dim, (0..dim).map(|_| rng.random_range(-0.5..0.5)));
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..dim {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let half_log_range = 0.5 * 20f64.ln();
        let mut eig: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-half_log_range..half_log_range).exp())
            .collect();
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let scale = (0.5f64 / 3.0).powi(2) / max;
        eig.iter_mut().for_each(|l| *l *= scale);
        let cov = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
        let cov = 0.5 * (&cov + cov.transpose());
        Self::new(mean, cov).expect("generated covariance is positive definite")
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Option<Self> {
        let chol = cov.clone().cholesky()?.l();
        let d = mean.len() as f64;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Some(Self {
            mean,
            cov,
            chol,
            log_norm: -0.5 * (d * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let r = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&r)
            .expect("triangular factor is non-singular");
        self.log_norm - 0.5 * z.norm_squared()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        (&self.mean + &self.chol * z).as_slice().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinKind {
    CurvedDegeneracy,
    Ring {
        mu: f64,
        sigma: f64,
    },
    Himmelblau2d,
    Himmelblau4d,
    GaussianRandom {
        dim: usize,
        seed: u64,
        gaussian: Box<GaussianTarget>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinTarget {
    kind: BuiltinKind,
    name: String,
    prior: PriorBox,
    reference: Reference,
}

impl BuiltinTarget {
    pub fn new(kind: BuiltinKind) -> Self {
        let (name, prior, reference) = match &kind {
            BuiltinKind::CurvedDegeneracy => (
                "curved_degeneracy".to_string(),
                PriorBox::new(vec![-1.0, -1.0], vec![1.0, 2.0]),
                Reference {
                    modes: vec![vec![0.45, 4.0 * 0.45f64.powi(4)]],
                    ..Default::default()
                },
            ),
            BuiltinKind::Ring { mu, sigma } => (
                if *mu == 1.0 && *sigma == 0.05 {
                    "ring".to_string()
                } else {
                    format!("ring:{mu}:{sigma}")
                },
                PriorBox::cube(2, -2.0, 2.0),
                Reference::default(),
            ),
            BuiltinKind::Himmelblau2d => (
                "himmelblau2d".to_string(),
                PriorBox::cube(2, -5.0, 5.0),
                Reference {
                    modes: himmelblau_modes(),
                    ..Default::default()
                },
            ),
            BuiltinKind::Himmelblau4d => (
                "himmelblau4d".to_string(),
                PriorBox::cube(4, -5.0, 5.0),
                Reference {
                    modes: himmelblau_modes(),
                    flat_dims: vec![2, 3],
                    ..Default::default()
                },
            ),
            BuiltinKind::GaussianRandom {
                dim,
                seed,
                gaussian,
            } => (
                format!("gaussian_random:{dim}:{seed}"),
                PriorBox::cube(*dim, -1.0, 1.0),
                Reference {
                    modes: vec![gaussian.mean.as_slice().to_vec()],
                    gaussian: Some((
                        gaussian.mean.as_slice().to_vec(),
                        gaussian
                            .cov
                            .row_iter()
                            .map(|r| r.iter().cloned().collect())
                            .collect(),
                    )),
                    ..Default::default()
                },
            ),
        };
        Self {
            kind,
            name,
            prior: prior.expect("builtin boxes are valid"),
            reference,
        }
    }

    pub fn gaussian_random(dim: usize, seed: u64) -> Self {
        Self::new(BuiltinKind::GaussianRandom {
            dim,
            seed,
            gaussian: Box::new(GaussianTarget::random(dim, seed)),
        })
    }

    /// Parses `curved_degeneracy`, `ring[:MU:SIGMA]`, `himmelblau2d`,
    /// `himmelblau4d` or `gaussian_random:D[:SEED]` (seed defaults to 0).
    pub fn parse(spec: &str) -> Result<Self, TargetError> {
        let parts: Vec<&str> = spec.trim().split(':').collect();
        let num = |s: &str| -> Result<f64, TargetError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| TargetError::InvalidSpec(format!("bad number '{s}' in '{spec}'")))
        };
        let int = |s: &str| -> Result<u64, TargetError> {
            s.parse::<u64>()
                .map_err(|_| TargetError::InvalidSpec(format!("bad integer '{s}' in '{spec}'")))
        };
        match parts.as_slice() {
            ["curved_degeneracy"] => Ok(Self::new(BuiltinKind::CurvedDegeneracy)),
            ["ring"] => Ok(Self::new(BuiltinKind::Ring {
                mu: 1.0,
                sigma: 0.05,
            })),
            ["ring", mu, sigma] => {
                let (mu, sigma) = (num(mu)?, num(sigma)?);
                if sigma <= 0.0 {
                    return Err(TargetError::InvalidSpec(
                        "ring sigma must be positive".into(),
                    ));
                }
                Ok(Self::new(BuiltinKind::Ring { mu, sigma }))
            }
            ["himmelblau2d"] => Ok(Self::new(BuiltinKind::Himmelblau2d)),
            ["himmelblau4d"] => Ok(Self::new(BuiltinKind::Himmelblau4d)),
            ["gaussian_random", d] | ["gaussian_random", d, _] => {
                let dim = int(d)? as usize;
                if dim == 0 {
                    return Err(TargetError::InvalidSpec(
                        "dimension must be at least 1".into(),
                    ));
                }
                let seed = if parts.len() == 3 { int(parts[2])? } else { 0 };
                Ok(Self::gaussian_random(dim, seed))
            }
            _ => Err(TargetError::Unknown(spec.to_string())),
        }
    }

    pub fn kind(&self) -> &BuiltinKind {
        &self.kind
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            BuiltinKind::CurvedDegeneracy => curved_degeneracy(x),
            BuiltinKind::Ring { mu, sigma } => ring(x, *mu, *sigma),
            BuiltinKind::Himmelblau2d => himmelblau2d(x),
            BuiltinKind::Himmelblau4d => himmelblau4d(x),
            BuiltinKind::GaussianRandom { gaussian, .. } => gaussian.log_density(x),
        }
    }
}

impl Target for BuiltinTarget {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn prior(&self) -> &PriorBox {
        &self.prior
    }

    fn log_density(&self, x: &[f64]) -> Result<f64, TargetError> {
        if x.len() != self.prior.dim() {
            return Err(TargetError::Dimension {
                expected: self.prior.dim(),
                got: x.len(),
            });
        }
        Ok(self.eval(x))
    }

    fn reference(&self) -> Option<&Reference> {
        Some(&self.reference)
    }

    fn is_analytic(&self) -> bool {
        true
    }

    /// Exact draws rejected to the box (Gaussian targets only).
    fn exact_sample(&self, n: usize, seed: u64) -> Option<Vec<Vec<f64>>> {
        let BuiltinKind::GaussianRandom { gaussian, .. } = &self.kind else {
            return None;
        };
        let mut rng = rng_from(seed, &[GAUSSIAN_TAG, 0x7472]);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let x = gaussian.draw(&mut rng);
            if self.prior.contains(&x) {
                out.push(x);
            }
        }
        Some(out)
    }
}
