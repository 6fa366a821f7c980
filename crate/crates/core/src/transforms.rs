//! Mapping between the user's parameter box and the unit hypercube, and
//! affine standardization of log-posterior values.
//!
//! All surrogate modelling happens in `[0, 1]^d` with standardized outputs.
//! The scaler uses the population (divide-by-N) standard deviation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale below which a set of outputs is treated as constant.
const DEGENERATE_SCALE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("prior box must have at least one dimension")]
    EmptyBox,
    #[error("prior box has {lower} lower bounds but {upper} upper bounds")]
    BoundsLength { lower: usize, upper: usize },
    #[error("prior box dimension {dim}: upper bound {upper} is not above lower bound {lower}")]
    InvertedBounds { dim: usize, lower: f64, upper: f64 },
    #[error("expected a point of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("coordinate {dim} = {value} lies outside [{lower}, {upper}]")]
    OutOfDomain {
        dim: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("need at least 2 values to fit an output scaler, got {0}")]
    TooFewValues(usize),
    #[error("non-finite value {0} passed to the output scaler")]
    NonFinite(f64),
}

/// Axis-aligned box-uniform prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl PriorBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, TransformError> {
        if lower.len() != upper.len() {
            return Err(TransformError::BoundsLength {
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(TransformError::EmptyBox);
        }
        for (dim, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            // NaN bounds fail the finiteness checks.
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(TransformError::InvertedBounds {
                    dim,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval `[lo, hi]` in each of `dim` dimensions.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self, TransformError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }

    /// Log of the box volume; the uniform prior density is `-log_volume()`.
    pub fn log_volume(&self) -> f64 {
        self.widths().iter().map(|w| w.ln()).sum()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    fn check_dim(&self, got: usize) -> Result<(), TransformError> {
        if got != self.dim() {
            return Err(TransformError::Dimension {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Maps a point of the box onto `[0, 1]^d`.
    pub fn to_unit(&self, x: &[f64]) -> Result<Vec<f64>, TransformError> {
        self.check_dim(x.len())?;
        x.iter()
            .enumerate()
            .map(|(dim, &v)| {
                let (lo, hi) = (self.lower[dim], self.upper[dim]);
                if !(v >= lo && v <= hi) {
                    return Err(TransformError::OutOfDomain {
                        dim,
                        value: v,
                        lower: lo,
                        upper: hi,
                    });
                }
                Ok((v - lo) / (hi - lo))
            })
            .collect()
    }

    /// Inverse of [`PriorBox::to_unit`].
    pub fn from_unit(&self, u: &[f64]) -> Result<Vec<f64>, TransformError> {
        self.check_dim(u.len())?;
        u.iter()
            .enumerate()
            .map(|(dim, &v)| {
                if !(0.0..=1.0).contains(&v) {
                    return Err(TransformError::OutOfDomain {
                        dim,
                        value: v,
                        lower: 0.0,
                        upper: 1.0,
                    });
                }
                let (lo, hi) = (self.lower[dim], self.upper[dim]);
                Ok(lo + v * (hi - lo))
            })
            .collect()
    }
}

/// Affine map `y -> (y - mean) / scale` applied to log-posterior values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScaler {
    pub mean: f64,
    pub scale: f64,
}

impl OutputScaler {
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            scale: 1.0,
        }
    }

    /// Fits mean and population standard deviation. Near-constant inputs get
    /// `scale = 1` so that standardization never divides by zero.
    pub fn fit(y: &[f64]) -> Result<Self, TransformError> {
        if y.len() < 2 {
            return Err(TransformError::TooFewValues(y.len()));
        }
        if let Some(&bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(TransformError::NonFinite(bad));
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut scale = var.sqrt();
        if scale < DEGENERATE_SCALE * mean.abs().max(1.0) {
            scale = 1.0;
        }
        Ok(Self { mean, scale })
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn unstandardize(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }

    pub fn standardize_all(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.standardize(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_points_map_to_cube_corners() {
        let b = PriorBox::new(vec![0.0, -5.0], vec![10.0, 5.0]).unwrap();
        assert_eq!(b.to_unit(&[0.0, -5.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(b.to_unit(&[10.0, 5.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.to_unit(&[5.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(b.from_unit(&[0.5, 0.5]).unwrap(), b.center());
    }

    #[test]
    fn unit_box_is_identity() {
        let b = PriorBox::cube(3, 0.0, 1.0).unwrap();
        let x = [0.1, 0.7, 0.33];
        assert_eq!(b.to_unit(&x).unwrap(), x.to_vec());
        assert_eq!(b.from_unit(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn out_of_box_reports_coordinate() {
        let b = PriorBox::cube(2, -1.0, 1.0).unwrap();
        match b.to_unit(&[0.0, 1.5]) {
            Err(TransformError::OutOfDomain { dim, .. }) => assert_eq!(dim, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            b.from_unit(&[-0.1, 0.5]),
            Err(TransformError::OutOfDomain { dim: 0, .. })
        ));
        assert!(b.to_unit(&[0.0]).is_err());
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(PriorBox::new(vec![], vec![]).is_err());
        assert!(PriorBox::new(vec![1.0], vec![1.0]).is_err());
        assert!(PriorBox::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(PriorBox::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn random_round_trip() {
        use rand::{Rng, SeedableRng};
        let b = PriorBox::new(vec![-3.0, 0.5, 100.0], vec![7.0, 0.6, 1e4]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let u: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let back = b.to_unit(&b.from_unit(&u).unwrap()).unwrap();
            for (a, c) in u.iter().zip(&back) {
                worst = worst.max((a - c).abs());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn scaler_two_points() {
        // population std of (0, 2) is 1
        let s = OutputScaler::fit(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.scale, 1.0);
        let s = OutputScaler::fit(&[1.0, 5.0, 9.0]).unwrap();
        assert!((s.scale - (32.0f64 / 3.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn scaler_degenerate_and_errors() {
        let s = OutputScaler::fit(&[3.5, 3.5, 3.5]).unwrap();
        assert_eq!(s.mean, 3.5);
        assert_eq!(s.scale, 1.0);
        assert!(matches!(
            OutputScaler::fit(&[1.0]),
            Err(TransformError::TooFewValues(1))
        ));
        assert!(OutputScaler::fit(&[1.0, f64::NEG_INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn standardized_values_have_zero_mean_unit_std(
            y in prop::collection::vec(-1e3f64..1e3, 2..40)
        ) {
            let s = OutputScaler::fit(&y).unwrap();
            prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-6));
            let z = s.standardize_all(&y);
            let n = z.len() as f64;
            let m = z.iter().sum::<f64>() / n;
            let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((sd - 1.0).abs() < 1e-9);
            for (a, b) in y.iter().zip(&z) {
                prop_assert!((s.unstandardize(*b) - a).abs() < 1e-9 * a.abs().max(1.0));
            }
        }

        #[test]
        fn refit_preserves_argmax(
            y in prop::collection::vec(-50f64..50.0, 2..20),
            extra in prop::collection::vec(-50f64..50.0, 1..10),
        ) {
            let argmax = |v: &[f64]| v.iter().enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0;
            let before = argmax(&OutputScaler::fit(&y).unwrap().standardize_all(&y));
            let mut all = y.clone();
            all.extend(&extra);
            let after = OutputScaler::fit(&all).unwrap().standardize_all(&all);
            prop_assert_eq!(argmax(&after[..y.len()]), before);
        }
    }
}
