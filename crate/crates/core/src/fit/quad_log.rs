use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{lstsq, FitError};
use crate::math::{abs, exp, ln};
use crate::stats;

/// `L(η) = L_min + C·(ln η − η_min)²`, natural log throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadLogFit {
    pub l_min: f64,
    pub c: f64,
    /// Location of the minimum in `ln η`.
    pub eta_min: f64,
    pub r2: f64,
    pub rmse: f64,
    pub n_points: usize,
}

impl QuadLogFit {
    pub fn predict_ln(&self, ln_lr: f64) -> f64 {
        let d = ln_lr - self.eta_min;
        self.l_min + self.c * d * d
    }

    pub fn predict(&self, lr: f64) -> f64 {
        self.predict_ln(ln(lr))
    }

    pub fn optimal_lr(&self) -> f64 {
        exp(self.eta_min)
    }
}

/// `exp(η_min)`.
pub fn optimal_lr(fit: &QuadLogFit) -> f64 {
    fit.optimal_lr()
}

/// Least-squares parabola in `ln η`, all points weighted equally.
///
/// Requires three distinct learning rates and a strictly positive curvature.
pub fn fit_quad_log(points: &[(f64, f64)]) -> Result<QuadLogFit, FitError> {
    if points
        .iter()
        .any(|(lr, loss)| !(*lr > 0.0) || !lr.is_finite() || !loss.is_finite())
    {
        return Err(FitError::BadInput);
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(FitError::TooFewDistinct {
            need: 3,
            got: distinct.len(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| ln(p.0)).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let x_bar = stats::mean(&xs);
    let y_bar = stats::mean(&ys);
    let m = points.len();
    let design: Vec<f64> = xs
        .iter()
        .flat_map(|x| {
            let u = x - x_bar;
            [1.0, u, u * u]
        })
        .collect();
    let centered: Vec<f64> = ys.iter().map(|y| y - y_bar).collect();
    let coef = lstsq(&design, &centered, m, 3).ok_or(FitError::DegenerateDesign)?;
    let (a, b, c) = (coef[0] + y_bar, coef[1], coef[2]);

    // Curvature indistinguishable from round-off counts as flat.
    let span = xs
        .iter()
        .fold(f64::NEG_INFINITY, |m, x| m.max(abs(x - x_bar)));
    let y_scale = ys.iter().fold(0.0f64, |m, y| m.max(abs(*y)));
    let floor = 64.0 * f64::EPSILON * y_scale / (span * span);
    if !(c > floor) {
        return Err(FitError::NoInteriorOptimum { curvature: c });
    }
    let offset = -b / (2.0 * c);
    let fit = QuadLogFit {
        l_min: a - b * b / (4.0 * c),
        c,
        eta_min: x_bar + offset,
        r2: 0.0,
        rmse: 0.0,
        n_points: m,
    };
    let predicted: Vec<f64> = xs.iter().map(|x| fit.predict_ln(*x)).collect();
    Ok(QuadLogFit {
        r2: stats::r_squared(&ys, &predicted),
        rmse: stats::rmse(&ys, &predicted),
        ..fit
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::rel_err;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const GRID: [f64; 7] = [8e-5, 1e-4, 3e-4, 5e-4, 8e-4, 1.5e-3, 2e-3];

    fn planted(l_min: f64, c: f64, eta_min: f64, lrs: &[f64]) -> Vec<(f64, f64)> {
        lrs.iter()
            .map(|&lr| (lr, l_min + c * (ln(lr) - eta_min).powi(2)))
            .collect()
    }

    #[test]
    fn symmetric_exact_quadratic() {
        let e = core::f64::consts::E;
        let pts = [(1.0 / e, 1.1), (1.0, 1.0), (e, 1.1)];
        let fit = fit_quad_log(&pts).unwrap();
        assert!((fit.l_min - 1.0).abs() < 1e-14);
        assert!((fit.c - 0.1).abs() < 1e-14);
        assert!(fit.eta_min.abs() < 1e-14);
        assert!((fit.optimal_lr() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn vertex_prediction_is_exact() {
        let fit = fit_quad_log(&planted(2.3, 0.3, ln(5.55e-4), &GRID)).unwrap();
        assert_eq!(fit.predict_ln(fit.eta_min), fit.l_min);
    }

    #[test]
    fn planted_optimum_round_trips() {
        let fit = QuadLogFit {
            l_min: 2.0,
            c: 0.3,
            eta_min: ln(5.55e-4),
            r2: 1.0,
            rmse: 0.0,
            n_points: 7,
        };
        assert!(rel_err(optimal_lr(&fit), 5.55e-4) < 1e-14);
    }

    #[test]
    fn noisy_grid_recovers_vertex() {
        // 3% of the ln-distance between 5e-4 and 8e-4, the grid points
        // bracketing the planted optimum.
        let tol = 0.03 * ln(8e-4 / 5e-4);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let clean = planted(2.3, 0.3, ln(5.55e-4), &GRID);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = clean
                .iter()
                .map(|(lr, l)| (*lr, l + noise.sample(&mut rng)))
                .collect();
            let fit = fit_quad_log(&pts).unwrap();
            assert!(
                (fit.eta_min - ln(5.55e-4)).abs() < tol,
                "seed {seed}: {fit:?}"
            );
        }
    }

    #[test]
    fn monotone_losses_have_no_optimum() {
        let pts: Vec<(f64, f64)> = GRID
            .iter()
            .enumerate()
            .map(|(i, lr)| (*lr, 3.0 - 0.1 * i as f64 - 0.01 * (i * i) as f64))
            .collect();
        assert!(matches!(
            fit_quad_log(&pts),
            Err(FitError::NoInteriorOptimum { .. })
        ));
    }

    #[test]
    fn flat_losses_have_no_optimum() {
        let pts: Vec<(f64, f64)> = GRID.iter().map(|lr| (*lr, 2.1)).collect();
        assert!(matches!(
            fit_quad_log(&pts),
            Err(FitError::NoInteriorOptimum { .. })
        ));
    }

    #[test]
    fn needs_three_distinct_lrs() {
        let pts = [(1e-3, 1.0), (1e-3, 1.1), (2e-3, 0.9), (2e-3, 0.95)];
        assert_eq!(
            fit_quad_log(&pts).unwrap_err(),
            FitError::TooFewDistinct { need: 3, got: 2 }
        );
        assert_eq!(
            fit_quad_log(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]).unwrap_err(),
            FitError::BadInput
        );
    }

    fn noisy_points(seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.02).unwrap();
        planted(2.0, 0.2, ln(4e-4), &GRID)
            .into_iter()
            .map(|(lr, l)| (lr, l + noise.sample(&mut rng)))
            .collect()
    }

    proptest! {
        #[test]
        fn offset_invariance(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let pts = noisy_points(seed);
            let base = fit_quad_log(&pts).unwrap();
            let moved: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (*x, y + shift)).collect();
            let fit = fit_quad_log(&moved).unwrap();
            prop_assert!((fit.l_min - base.l_min - shift).abs() < 1e-9);
            prop_assert!((fit.eta_min - base.eta_min).abs() < 1e-9);
            prop_assert!(rel_err(fit.c, base.c) < 1e-9);
        }

        #[test]
        fn scale_equivariance(seed in 0u64..1000, k in 0.1f64..10.0) {
            let pts = noisy_points(seed);
            let base = fit_quad_log(&pts).unwrap();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (*x, k * y)).collect();
            let fit = fit_quad_log(&scaled).unwrap();
            prop_assert!(rel_err(fit.c, k * base.c) < 1e-9);
            prop_assert!(rel_err(fit.l_min, k * base.l_min) < 1e-9);
            prop_assert!((fit.eta_min - base.eta_min).abs() < 1e-9);
        }

        #[test]
        fn lr_scale_shifts_vertex(seed in 0u64..1000, kappa in 0.01f64..100.0) {
            let pts = noisy_points(seed);
            let base = fit_quad_log(&pts).unwrap();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (kappa * x, *y)).collect();
            let fit = fit_quad_log(&scaled).unwrap();
            prop_assert!((fit.eta_min - base.eta_min - ln(kappa)).abs() < 1e-9);
            prop_assert!(rel_err(fit.optimal_lr(), kappa * base.optimal_lr()) < 1e-9);
        }

        #[test]
        fn exact_data_has_unit_r2(c in 0.01f64..2.0, center in -9.0f64..-5.0, l in 1.0f64..4.0) {
            let fit = fit_quad_log(&planted(l, c, center, &GRID)).unwrap();
            prop_assert!((fit.r2 - 1.0).abs() < 1e-9);
            prop_assert!((fit.eta_min - center).abs() < 1e-8);
        }
    }
}
