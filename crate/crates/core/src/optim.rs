//! Box-constrained quasi-Newton minimizer.
//!
//! A projected L-BFGS: the two-loop recursion runs on the free variables
//! (those not pinned at a bound by the gradient) and a backtracking Armijo
//! search walks along the projected path. Used for GP hyperparameter fitting
//! and for the multi-start acquisition maximization of the sequential baseline.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub max_iterations: usize,
    /// Stop when the projected gradient's infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop when the relative decrease of `f` over one iteration falls below this.
    pub value_tolerance: f64,
    pub memory: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            value_tolerance: 1e-10,
            memory: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((xi, gi), (lo, hi))| ((xi - gi).clamp(*lo, *hi) - xi).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// `f` returns the value and gradient. A non-finite value is treated as an
/// infeasible step and triggers backtracking; a non-finite value at `x0`
/// returns immediately.
pub fn minimize_box<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &MinimizeOptions,
) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;

    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Minimum {
            x,
            value: fx,
            iterations,
            evaluations,
        };
    }

    while iterations < opts.max_iterations {
        if projected_gradient_norm(&x, &g, lower, upper) < opts.gradient_tolerance {
            break;
        }
        iterations += 1;

        // Variables held at a bound by the gradient are excluded from the step.
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = x[i] <= lower[i] && g[i] > 0.0;
                let at_hi = x[i] >= upper[i] && g[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let masked = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(&free)
                .map(|(a, &fr)| if fr { *a } else { 0.0 })
                .collect()
        };

        let mut q = masked(&g);
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(&masked(s), &q);
            for (qi, yi) in q.iter_mut().zip(masked(y)) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let (sm, ym) = (masked(s), masked(y));
            let yy = dot(&ym, &ym);
            if yy > 0.0 {
                let gamma = dot(&sm, &ym) / yy;
                if gamma > 0.0 {
                    q.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(&masked(y), &q);
            for (qi, si) in q.iter_mut().zip(masked(s)) {
                *qi += si * (a - b);
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &g) >= 0.0 {
            history.clear();
            dir = masked(&g).iter().map(|v| -v).collect();
        }
        if history.is_empty() {
            // First step: unit-ish length in the variable scale.
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let widest = lower
                .iter()
                .zip(upper)
                .map(|(l, u)| u - l)
                .filter(|w| w.is_finite())
                .fold(0.0, f64::max);
            let cap = if widest > 0.0 { 0.25 * widest } else { 1.0 };
            if norm > cap {
                dir.iter_mut().for_each(|v| *v *= cap / norm);
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            project(&mut trial, lower, upper);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &moved);
            if decrease >= 0.0 && moved.iter().all(|m| *m == 0.0) {
                break;
            }
            let (ft, gt) = f(&trial);
            evaluations += 1;
            if ft.is_finite()
                && gt.iter().all(|v| v.is_finite())
                && ft <= fx + 1e-4 * decrease.min(0.0)
            {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }

        let Some((xn, fn_, gn)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        let rel = (fx - fn_).abs() / fx.abs().max(fn_.abs()).max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        if rel < opts.value_tolerance {
            break;
        }
    }

    Minimum {
        x,
        value: fx,
        iterations,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn finds_interior_minimum() {
        let opts = MinimizeOptions {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            value_tolerance: 0.0,
            ..Default::default()
        };
        let m = minimize_box(rosenbrock, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &opts);
        assert!(
            (m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4,
            "{m:?}"
        );
    }

    #[test]
    fn respects_active_bounds() {
        // minimum of (x-3)^2 + (y+1)^2 on [0,1]^2 is (1, 0)
        let f = |x: &[f64]| {
            (
                (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)],
            )
        };
        let m = minimize_box(
            f,
            &[0.5, 0.5],
            &[0.0, 0.0],
            &[1.0, 1.0],
            &Default::default(),
        );
        assert_eq!(m.x, vec![1.0, 0.0]);
        assert!((m.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn backtracks_out_of_infeasible_region() {
        // +inf for x > 0.6; minimum of (x-1)^2 inside is at 0.6
        let f = |x: &[f64]| {
            if x[0] > 0.6 {
                (f64::INFINITY, vec![0.0])
            } else {
                ((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)])
            }
        };
        let m = minimize_box(f, &[0.0], &[0.0], &[1.0], &Default::default());
        assert!(m.x[0] <= 0.6 && m.x[0] > 0.55, "{m:?}");
    }
}
