use std::sync::Arc;

use nalgebra::DVector;

use super::fit::{factorize, kernel_matrix};
use super::{GpError, KernelHyperparams, TrainingSet, DUPLICATE_TOLERANCE};
use crate::transforms::OutputScaler;

/// Forward substitution against the training factor: `v = L⁻¹ k(X, x)`.
#[derive(Debug, Clone)]
pub struct BaseSolve {
    pub v: Vec<f64>,
    pub sq_norm: f64,
    /// `x` coincides with a training location.
    pub known: bool,
}

#[derive(Debug, Clone)]
pub struct MeanStdGradient {
    pub mean: f64,
    pub mean_grad: Vec<f64>,
    pub std: f64,
    pub std_grad: Vec<f64>,
}

/// Fitted GP state: hyperparameters, training data, Cholesky factor of
/// `K + noise I` and dual weights `α = (K + noise I)⁻¹ y`.
#[derive(Debug, Clone)]
pub struct FittedSurrogate {
    hyperparams: KernelHyperparams,
    training: TrainingSet,
    /// Lower factor, rows packed: row `i` holds `i + 1` entries.
    chol_rows: Vec<f64>,
    alpha: Vec<f64>,
    /// Training locations divided by the length scales, row-major.
    scaled: Vec<f64>,
    inv_len: Vec<f64>,
    min_len: f64,
}

fn row_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

impl FittedSurrogate {
    /// Factorizes the kernel matrix for fixed hyperparameters (no fitting).
    /// The noise is escalated if the factorization fails; the level that
    /// succeeded is stored in the hyperparameters.
    pub fn new(training: TrainingSet, hyperparams: KernelHyperparams) -> Result<Self, GpError> {
        hyperparams.validate()?;
        if hyperparams.dim() != training.dim() {
            return Err(GpError::Hyperparams(format!(
                "{} length scales for {}-dimensional data",
                hyperparams.dim(),
                training.dim()
            )));
        }
        let kf = kernel_matrix(&training, &hyperparams);
        let (chol, noise) = factorize(&kf, hyperparams.noise)?;
        let alpha = chol.solve(&DVector::from_column_slice(training.std_values()));
        let n = training.len();
        let l = chol.l_dirty();
        let mut chol_rows = Vec::with_capacity(row_offset(n));
        for i in 0..n {
            for j in 0..=i {
                chol_rows.push(l[(i, j)]);
            }
        }
        let inv_len: Vec<f64> = hyperparams.length_scales.iter().map(|l| 1.0 / l).collect();
        let scaled = training
            .locations()
            .iter()
            .flat_map(|x| {
                x.iter()
                    .zip(&inv_len)
                    .map(|(v, s)| v * s)
                    .collect::<Vec<_>>()
            })
            .collect();
        let min_len = hyperparams
            .length_scales
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            hyperparams: KernelHyperparams {
                noise,
                ..hyperparams
            },
            training,
            chol_rows,
            alpha: alpha.as_slice().to_vec(),
            scaled,
            inv_len,
            min_len,
        })
    }

    pub fn into_shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyperparams
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn scaler(&self) -> OutputScaler {
        self.training.scaler()
    }

    pub fn dim(&self) -> usize {
        self.training.dim()
    }

    pub fn len(&self) -> usize {
        self.training.len()
    }

    pub fn is_empty(&self) -> bool {
        self.training.is_empty()
    }

    pub fn dual_weights(&self) -> &[f64] {
        &self.alpha
    }

    /// Predictive standard deviation at (or below which) a point counts as known.
    pub fn noise_floor(&self) -> f64 {
        self.hyperparams.noise.sqrt()
    }

    fn chol_row(&self, i: usize) -> &[f64] {
        &self.chol_rows[row_offset(i)..row_offset(i) + i + 1]
    }

    fn output_scale(&self) -> f64 {
        self.hyperparams.output_scale
    }

    /// Kernel values against all training points, and whether `x` coincides
    /// with one of them.
    fn kernel_vector(&self, x: &[f64]) -> (Vec<f64>, bool) {
        let d = self.dim();
        let xs: Vec<f64> = x.iter().zip(&self.inv_len).map(|(v, s)| v * s).collect();
        let c = self.output_scale();
        let near = (DUPLICATE_TOLERANCE / self.min_len).powi(2);
        let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
        let mut known = false;
        let k = self
            .scaled
            .chunks_exact(d)
            .enumerate()
            .map(|(j, row)| {
                let r2: f64 = row.iter().zip(&xs).map(|(a, b)| (a - b) * (a - b)).sum();
                if r2 < near && crate::util::sq_dist(x, &self.training.locations()[j]) < tol2 {
                    known = true;
                }
                c * (-0.5 * r2).exp()
            })
            .collect();
        (k, known)
    }

    /// In-place `L z = rhs`.
    fn forward(&self, z: &mut [f64]) {
        for i in 0..z.len() {
            let row = self.chol_row(i);
            let s: f64 = row[..i].iter().zip(&z[..i]).map(|(a, b)| a * b).sum();
            z[i] = (z[i] - s) / row[i];
        }
    }

    /// In-place `Lᵀ z = rhs`.
    fn backward(&self, z: &mut [f64]) {
        for j in (0..z.len()).rev() {
            let row = self.chol_row(j);
            z[j] /= row[j];
            let zj = z[j];
            for (zi, lji) in z[..j].iter_mut().zip(&row[..j]) {
                *zi -= lji * zj;
            }
        }
    }

    pub fn base_solve(&self, x: &[f64]) -> BaseSolve {
        let (mut v, known) = self.kernel_vector(x);
        self.forward(&mut v);
        let sq_norm = v.iter().map(|a| a * a).sum();
        BaseSolve { v, sq_norm, known }
    }

    /// Mean in standardized units.
    pub fn mean_at(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let xs: Vec<f64> = x.iter().zip(&self.inv_len).map(|(v, s)| v * s).collect();
        let c = self.output_scale();
        self.scaled
            .chunks_exact(d)
            .zip(&self.alpha)
            .map(|(row, a)| {
                let r2: f64 = row.iter().zip(&xs).map(|(p, q)| (p - q) * (p - q)).sum();
                a * (-0.5 * r2).exp()
            })
            .sum::<f64>()
            * c
    }

    /// Mean in the original log-posterior units.
    pub fn raw_mean_at(&self, x: &[f64]) -> f64 {
        self.scaler().unstandardize(self.mean_at(x))
    }

    /// Largest standardized training value.
    pub fn p_max(&self) -> f64 {
        self.training.max_std_value()
    }

    fn variance_from(&self, solve: &BaseSolve) -> f64 {
        if solve.known {
            return 0.0;
        }
        (self.output_scale() - solve.sq_norm).max(0.0)
    }
}

/// One Kriging-believer ghost point: its location, the cross block
/// `L⁻¹ k(X, g)` and its row of the ghost Cholesky factor.
#[derive(Debug)]
struct Ghost {
    location: Vec<f64>,
    cross: Vec<f64>,
    /// Row of the lower ghost factor (length = ghost index + 1).
    factor_row: Vec<f64>,
}

/// A fitted surrogate conditioned on ghost points whose values equal the
/// base mean. Cheap to clone: ghost rows are shared.
#[derive(Debug, Clone)]
pub struct ConditionedSurrogate {
    base: Arc<FittedSurrogate>,
    ghosts: Vec<Arc<Ghost>>,
}

/// Result of [`ConditionedSurrogate::condition_on`].
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub surrogate: ConditionedSurrogate,
    /// The point coincided with a known location; the surrogate is unchanged.
    pub duplicate: bool,
}

impl ConditionedSurrogate {
    pub fn from_base(base: Arc<FittedSurrogate>) -> Self {
        Self {
            base,
            ghosts: Vec::new(),
        }
    }

    pub fn base(&self) -> &Arc<FittedSurrogate> {
        &self.base
    }

    pub fn ghost_count(&self) -> usize {
        self.ghosts.len()
    }

    pub fn ghost_locations(&self) -> impl Iterator<Item = &[f64]> {
        self.ghosts.iter().map(|g| g.location.as_slice())
    }

    fn ghost_kernel(&self, x: &[f64]) -> (Vec<f64>, bool) {
        ghost_kernel(self.base.hyperparams(), &self.ghosts, x)
    }

    fn ghost_solve(&self, x: &[f64], base: &BaseSolve) -> (Vec<f64>, bool) {
        ghost_solve(self.base.hyperparams(), &self.ghosts, x, base)
    }

    /// Predictive variance from a precomputed base solve. Zero at known
    /// locations. The ghost contribution is subtracted after the base term, so
    /// the result can never exceed the base variance in floating point.
    pub fn variance_with(&self, x: &[f64], base: &BaseSolve) -> f64 {
        if base.known {
            return 0.0;
        }
        if self.ghosts.is_empty() {
            return self.base.variance_from(base);
        }
        let (w, known) = self.ghost_solve(x, base);
        if known {
            return 0.0;
        }
        let sw: f64 = w.iter().map(|a| a * a).sum();
        (self.base.output_scale() - (base.sq_norm + sw)).max(0.0)
    }

    pub fn condition_on(&self, x: &[f64]) -> Conditioning {
        let solve = self.base.base_solve(x);
        self.condition_on_solved(x, &solve)
    }

    /// Conditions on `x` reusing its base solve.
    pub fn condition_on_solved(&self, x: &[f64], base: &BaseSolve) -> Conditioning {
        let (w, known) = self.ghost_solve(x, base);
        if base.known || known {
            return Conditioning {
                surrogate: self.clone(),
                duplicate: true,
            };
        }
        let hp = self.base.hyperparams();
        let sw: f64 = w.iter().map(|a| a * a).sum();
        // The Schur complement of K + noise I is at least the noise.
        let schur = (hp.output_scale + hp.noise - (base.sq_norm + sw)).max(hp.noise);
        let mut factor_row = w;
        factor_row.push(schur.sqrt());
        let mut ghosts = self.ghosts.clone();
        ghosts.push(Arc::new(Ghost {
            location: x.to_vec(),
            cross: base.v.clone(),
            factor_row,
        }));
        Conditioning {
            surrogate: Self {
                base: Arc::clone(&self.base),
                ghosts,
            },
            duplicate: false,
        }
    }
}

fn ghost_kernel(hp: &KernelHyperparams, ghosts: &[Arc<Ghost>], x: &[f64]) -> (Vec<f64>, bool) {
    let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
    let mut known = false;
    let k = ghosts
        .iter()
        .map(|g| {
            if crate::util::sq_dist(x, &g.location) < tol2 {
                known = true;
            }
            super::kernel_eval(x, &g.location, hp)
        })
        .collect();
    (k, known)
}

/// `w = Lg⁻¹ (k(G, x) - B v)` for a point with base solve `v`.
fn ghost_solve(
    hp: &KernelHyperparams,
    ghosts: &[Arc<Ghost>],
    x: &[f64],
    base: &BaseSolve,
) -> (Vec<f64>, bool) {
    let (mut w, known) = ghost_kernel(hp, ghosts, x);
    for (i, g) in ghosts.iter().enumerate() {
        let bv: f64 = g.cross.iter().zip(&base.v).map(|(a, b)| a * b).sum();
        let s: f64 = g.factor_row[..i]
            .iter()
            .zip(&w[..i])
            .map(|(a, b)| a * b)
            .sum();
        w[i] = (w[i] - bv - s) / g.factor_row[i];
    }
    (w, known)
}

fn gradient_impl(base: &FittedSurrogate, ghosts: &[Arc<Ghost>], x: &[f64]) -> MeanStdGradient {
    {
        let d = base.dim();
        let hp = base.hyperparams();
        let inv_l2: Vec<f64> = hp.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
        let (kvec, known_base) = base.kernel_vector(x);
        let locs = base.training.locations();

        let mut mean = 0.0;
        let mut mean_grad = vec![0.0; d];
        for ((k, a), xj) in kvec.iter().zip(&base.alpha).zip(locs) {
            mean += a * k;
            for i in 0..d {
                mean_grad[i] -= a * k * (x[i] - xj[i]) * inv_l2[i];
            }
        }

        let mut v = kvec.clone();
        base.forward(&mut v);
        let sq_norm: f64 = v.iter().map(|a| a * a).sum();
        let solve = BaseSolve {
            v,
            sq_norm,
            known: known_base,
        };
        let (w, known_ghost) = ghost_solve(hp, ghosts, x, &solve);
        let sw: f64 = w.iter().map(|a| a * a).sum();
        let var = if known_base || known_ghost {
            0.0
        } else {
            (hp.output_scale - (solve.sq_norm + sw)).max(0.0)
        };
        let std = var.sqrt();
        if std <= 0.0 {
            return MeanStdGradient {
                mean,
                mean_grad,
                std: 0.0,
                std_grad: vec![0.0; d],
            };
        }

        // u = Lg⁻ᵀ w, t = L⁻ᵀ (v - Bᵀ u)
        let mut u = w;
        for j in (0..u.len()).rev() {
            let row = &ghosts[j].factor_row;
            u[j] /= row[j];
            let uj = u[j];
            for (ui, lji) in u[..j].iter_mut().zip(&row[..j]) {
                *ui -= lji * uj;
            }
        }
        let mut t = solve.v;
        for (g, ug) in ghosts.iter().zip(&u) {
            for (ti, bi) in t.iter_mut().zip(&g.cross) {
                *ti -= ug * bi;
            }
        }
        base.backward(&mut t);

        let mut var_grad = vec![0.0; d];
        for ((k, tj), xj) in kvec.iter().zip(&t).zip(locs) {
            for i in 0..d {
                var_grad[i] += 2.0 * tj * k * (x[i] - xj[i]) * inv_l2[i];
            }
        }
        for (g, ug) in ghosts.iter().zip(&u) {
            let k = super::kernel_eval(x, &g.location, hp);
            for i in 0..d {
                var_grad[i] += 2.0 * ug * k * (x[i] - g.location[i]) * inv_l2[i];
            }
        }
        let std_grad = var_grad.iter().map(|g| g / (2.0 * std)).collect();
        MeanStdGradient {
            mean,
            mean_grad,
            std,
            std_grad,
        }
    }
}

/// Prediction interface shared by fitted and conditioned surrogates. Means and
/// standard deviations are in standardized output units.
pub trait Surrogate: Send + Sync {
    fn fitted(&self) -> &FittedSurrogate;

    fn std_at(&self, x: &[f64]) -> f64;

    fn mean_std_gradient(&self, x: &[f64]) -> MeanStdGradient;

    /// `x` coincides with a training or ghost location.
    fn is_known(&self, x: &[f64]) -> bool;

    fn mean_at(&self, x: &[f64]) -> f64 {
        self.fitted().mean_at(x)
    }

    fn predict_mean(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.mean_at(x)).collect()
    }

    fn predict_std(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.std_at(x)).collect()
    }
}

impl Surrogate for FittedSurrogate {
    fn fitted(&self) -> &FittedSurrogate {
        self
    }

    fn std_at(&self, x: &[f64]) -> f64 {
        self.variance_from(&self.base_solve(x)).sqrt()
    }

    fn mean_std_gradient(&self, x: &[f64]) -> MeanStdGradient {
        gradient_impl(self, &[], x)
    }

    fn is_known(&self, x: &[f64]) -> bool {
        self.kernel_vector(x).1
    }
}

impl Surrogate for ConditionedSurrogate {
    fn fitted(&self) -> &FittedSurrogate {
        &self.base
    }

    fn std_at(&self, x: &[f64]) -> f64 {
        let solve = self.base.base_solve(x);
        self.variance_with(x, &solve).sqrt()
    }

    fn mean_std_gradient(&self, x: &[f64]) -> MeanStdGradient {
        gradient_impl(&self.base, &self.ghosts, x)
    }

    fn is_known(&self, x: &[f64]) -> bool {
        self.base.kernel_vector(x).1 || self.ghost_kernel(x).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit, FitOptions, DEFAULT_NOISE};
    use crate::util::Workers;
    use rand::{Rng, SeedableRng};

    fn fitted_2d(n: usize, seed: u64) -> Arc<FittedSurrogate> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let locs: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let vals = locs
            .iter()
            .map(|x| -8.0 * ((x[0] - 0.5).powi(2) + 2.0 * (x[1] - 0.4).powi(2)))
            .collect();
        let ts = TrainingSet::new(locs, vals).unwrap();
        fit(ts, &FitOptions::for_dim(2, seed), &Workers::serial())
            .unwrap()
            .into_shared()
    }

    fn probes(m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    }

    #[test]
    fn interpolates_training_data() {
        let s = fitted_2d(15, 1);
        let locs = s.training().locations().to_vec();
        let mean = s.predict_mean(&locs);
        let std = s.predict_std(&locs);
        let tol = 10.0 * s.noise_floor();
        for ((m, y), sd) in mean.iter().zip(s.training().std_values()).zip(&std) {
            assert!((m - y).abs() < tol, "{m} vs {y}");
            assert!(*sd <= s.noise_floor());
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let locs = vec![vec![0.0, 0.0], vec![0.02, 0.01], vec![0.01, 0.03]];
        let ts = TrainingSet::new(locs, vec![1.0, 2.0, 0.5]).unwrap();
        let hp = KernelHyperparams::new(4.0, vec![0.05, 0.05], DEFAULT_NOISE).unwrap();
        let s = FittedSurrogate::new(ts, hp).unwrap();
        let far = [1.0, 1.0];
        assert!(s.mean_at(&far).abs() < 1e-12);
        let sd = s.std_at(&far);
        assert!((sd - 2.0).abs() / 2.0 < 1e-6, "{sd}");
    }

    #[test]
    fn batched_prediction_matches_pointwise() {
        let s = fitted_2d(20, 2);
        let xs = probes(1000, 3);
        let mb = s.predict_mean(&xs);
        let sb = s.predict_std(&xs);
        for (i, x) in xs.iter().enumerate() {
            assert_eq!(mb[i], s.mean_at(x));
            assert_eq!(sb[i], s.std_at(x));
        }
    }

    #[test]
    fn conditioning_keeps_mean_and_shrinks_std() {
        let s = fitted_2d(12, 4);
        let base = ConditionedSurrogate::from_base(s.clone());
        let ghost = [0.31, 0.77];
        let c = base.condition_on(&ghost);
        assert!(!c.duplicate);
        let cs = c.surrogate;
        assert!(cs.std_at(&ghost) <= s.noise_floor());
        let xs = probes(1000, 5);
        let before_m = base.predict_mean(&xs);
        let after_m = cs.predict_mean(&xs);
        let before = base.predict_std(&xs);
        let after = cs.predict_std(&xs);
        for i in 0..xs.len() {
            assert!((before_m[i] - after_m[i]).abs() < 1e-10);
            assert!(after[i] <= before[i] + 1e-10);
        }
        // original untouched
        assert_eq!(base.ghost_count(), 0);
    }

    #[test]
    fn conditioning_twice_on_same_point_is_idempotent() {
        let s = fitted_2d(10, 6);
        let base = ConditionedSurrogate::from_base(s);
        let once = base.condition_on(&[0.2, 0.2]).surrogate;
        let twice = once.condition_on(&[0.2, 0.2]);
        assert!(twice.duplicate);
        assert_eq!(twice.surrogate.ghost_count(), 1);
        let training_dup = base.condition_on(&base.base().training().locations()[0].clone());
        assert!(training_dup.duplicate);
    }

    #[test]
    fn layered_conditioning_matches_direct_refactorization() {
        // Conditioning on ghosts must equal a GP whose training set includes the
        // ghosts with their predicted mean values, at the same hyperparameters.
        let s = fitted_2d(10, 7);
        let ghosts = [[0.1, 0.9], [0.8, 0.15], [0.5, 0.5]];
        let mut cs = ConditionedSurrogate::from_base(s.clone());
        for g in &ghosts {
            cs = cs.condition_on(g).surrogate;
        }
        let mut locs = s.training().locations().to_vec();
        let mut vals = s.training().raw_values().to_vec();
        for g in &ghosts {
            locs.push(g.to_vec());
            vals.push(s.raw_mean_at(g));
        }
        let ts = TrainingSet::with_scaler(locs, vals, s.scaler()).unwrap();
        let direct = FittedSurrogate::new(ts, s.hyperparams().clone()).unwrap();
        for x in probes(200, 8) {
            let a = cs.std_at(&x);
            let b = direct.std_at(&x);
            assert!((a - b).abs() < 1e-6 * b.max(1e-3), "{a} vs {b}");
            assert!((cs.mean_at(&x) - direct.mean_at(&x)).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = fitted_2d(15, 9);
        let cs = ConditionedSurrogate::from_base(s)
            .condition_on(&[0.3, 0.6])
            .surrogate
            .condition_on(&[0.7, 0.2])
            .surrogate;
        let h = 1e-4;
        for x in probes(20, 10) {
            let g = cs.mean_std_gradient(&x);
            assert!((g.std - cs.std_at(&x)).abs() < 1e-12);
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd_mean = (cs.mean_at(&xp) - cs.mean_at(&xm)) / (2.0 * h);
                let fd_std = (cs.std_at(&xp) - cs.std_at(&xm)) / (2.0 * h);
                assert!((fd_mean - g.mean_grad[i]).abs() < 1e-5 * fd_mean.abs().max(1.0));
                assert!(
                    (fd_std - g.std_grad[i]).abs() < 1e-4 * fd_std.abs().max(1e-2),
                    "std grad {fd_std} vs {}",
                    g.std_grad[i]
                );
            }
        }
    }
}
