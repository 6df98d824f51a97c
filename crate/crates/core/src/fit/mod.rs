//! Least-squares engine and the two single-run curve families:
//! loss against training tokens (`L0 + A·D^-γ`) and loss against `ln η`
//! (a parabola with an interior minimum).

mod linalg;
pub mod lm;
mod power_law;
mod quad_log;

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use linalg::lstsq;
pub use lm::{levenberg_marquardt, LeastSquaresProblem, LmOutcome, Termination};
pub use power_law::{
    extrapolate_loss, fit_power_law, Extrapolation, PowerLawFit, PowerLawOptions, TrustIssue,
    DEFAULT_MIN_TOKENS,
};
pub use quad_log::{fit_quad_log, optimal_lr, QuadLogFit};

use crate::math::{exp, ln, powf};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{points} points cannot determine {params} parameters")]
    Underdetermined { points: usize, params: usize },
    #[error("degenerate design: all x values are identical")]
    DegenerateDesign,
    #[error("initial parameters are not finite or give non-finite residuals")]
    BadInit,
    #[error("invalid fit options: {0}")]
    BadOptions(&'static str),
    #[error("input values must be finite and positive where logarithms are taken")]
    BadInput,
    #[error("need at least {need} distinct learning rates, got {got}")]
    TooFewDistinct { need: usize, got: usize },
    #[error("no interior optimum: fitted curvature {curvature} is not positive")]
    NoInteriorOptimum { curvature: f64 },
    #[error("loss does not decrease with tokens (fitted amplitude {amplitude})")]
    NotDecreasing { amplitude: f64 },
}

/// Solver controls shared by every fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative step-size tolerance.
    pub xtol: f64,
    /// Relative cost-reduction tolerance.
    pub ftol: f64,
    pub initial_damping: f64,
    /// Factor applied to the damping after a rejected step (doubles on each
    /// consecutive rejection).
    pub damping_increase: f64,
    /// Number of starting points tried; the best result wins.
    pub multi_start: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            xtol: 1e-14,
            ftol: 1e-16,
            initial_damping: 1e-3,
            damping_increase: 2.0,
            multi_start: 4,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.max_iterations == 0 {
            return Err(FitError::BadOptions("max_iterations must be >= 1"));
        }
        if !(self.xtol > 0.0 && self.ftol > 0.0) {
            return Err(FitError::BadOptions("tolerances must be > 0"));
        }
        if !(self.initial_damping > 0.0 && self.damping_increase > 1.0) {
            return Err(FitError::BadOptions(
                "damping must be > 0 and grow by a factor > 1",
            ));
        }
        if self.multi_start == 0 {
            return Err(FitError::BadOptions("multi_start must be >= 1"));
        }
        Ok(())
    }
}

/// One-dimensional curve families available to [`nlls_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `y = p0 + p1·x^-p2` with `x > 0`.
    PowerLaw,
    /// `y = p0 + p1·(x − p2)²`.
    QuadVertex,
}

impl Family {
    pub fn n_params(self) -> usize {
        3
    }

    pub fn eval(self, x: f64, p: &[f64]) -> f64 {
        match self {
            Family::PowerLaw => p[0] + p[1] * powf(x, -p[2]),
            Family::QuadVertex => p[0] + p[1] * (x - p[2]) * (x - p[2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllsFit {
    pub params: Vec<f64>,
    pub rss: f64,
    pub rmse: f64,
    pub r2: f64,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
}

/// Power law with `x` rescaled by a reference so the amplitude and exponent
/// columns of the Jacobian are not nearly collinear:
/// `y = L0 + B·(x/x_ref)^-γ`, `B = A·x_ref^-γ`.
pub(crate) struct ScaledPowerLaw<'a> {
    pub ln_s: Vec<f64>,
    pub y: &'a [f64],
}

impl<'a> ScaledPowerLaw<'a> {
    pub fn new(xs: &[f64], y: &'a [f64], ln_ref: f64) -> Self {
        Self {
            ln_s: xs.iter().map(|x| ln(*x) - ln_ref).collect(),
            y,
        }
    }
}

impl LeastSquaresProblem for ScaledPowerLaw<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.y.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for ((o, ls), y) in out.iter_mut().zip(&self.ln_s).zip(self.y) {
            *o = p[0] + p[1] * exp(-p[2] * ls) - y;
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut [f64]) {
        for (row, ls) in self.ln_s.iter().enumerate() {
            let z = exp(-p[2] * ls);
            out[row * 3] = 1.0;
            out[row * 3 + 1] = z;
            out[row * 3 + 2] = -p[1] * z * ls;
        }
    }
}

struct QuadVertexProblem<'a> {
    x: &'a [f64],
    y: &'a [f64],
}

impl LeastSquaresProblem for QuadVertexProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.y.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(self.x).zip(self.y) {
            *o = p[0] + p[1] * (x - p[2]) * (x - p[2]) - y;
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut [f64]) {
        for (row, x) in self.x.iter().enumerate() {
            let d = x - p[2];
            out[row * 3] = 1.0;
            out[row * 3 + 1] = d * d;
            out[row * 3 + 2] = -2.0 * p[1] * d;
        }
    }
}

pub(crate) fn geometric_mean_ln(xs: &[f64]) -> f64 {
    xs.iter().map(|x| ln(*x)).sum::<f64>() / xs.len() as f64
}

/// Jittered copies of `init` for multi-start, first entry unchanged.
pub(crate) fn jittered_starts(init: &[f64], options: &FitOptions) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut starts = vec![init.to_vec()];
    for _ in 1..options.multi_start {
        starts.push(
            init.iter()
                .map(|v| {
                    let f: f64 = rng.gen_range(-0.2..0.2);
                    v * exp(f)
                })
                .collect(),
        );
    }
    starts
}

/// General nonlinear least-squares fit of a one-dimensional family.
///
/// The result never has a larger residual sum of squares than `init`.
pub fn nlls_fit(
    family: Family,
    points: &[(f64, f64)],
    init: &[f64],
    options: &FitOptions,
) -> Result<NllsFit, FitError> {
    options.validate()?;
    let n = family.n_params();
    if points.len() < n {
        return Err(FitError::Underdetermined {
            points: points.len(),
            params: n,
        });
    }
    if init.len() != n || init.iter().any(|v| !v.is_finite()) {
        return Err(FitError::BadInit);
    }
    if points.iter().all(|p| p.0 == points[0].0) {
        return Err(FitError::DegenerateDesign);
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(FitError::BadInput);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let raw_rss = |p: &[f64]| -> f64 {
        let s: f64 = points
            .iter()
            .map(|(x, y)| {
                let r = family.eval(*x, p) - y;
                r * r
            })
            .sum();
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    };
    let init_rss = raw_rss(init);
    if !init_rss.is_finite() {
        return Err(FitError::BadInit);
    }

    let mut best_params = init.to_vec();
    let mut best_rss = init_rss;
    let mut best_term = Termination::ZeroResidual;
    let mut iterations = 0;
    let mut converged = true;
    if init_rss > 0.0 {
        converged = false;
        best_term = Termination::MaxIterations;
        for start in jittered_starts(init, options) {
            let outcome = match family {
                Family::PowerLaw => {
                    if xs.iter().any(|x| *x <= 0.0) {
                        return Err(FitError::BadInput);
                    }
                    let ln_ref = geometric_mean_ln(&xs);
                    let problem = ScaledPowerLaw::new(&xs, &ys, ln_ref);
                    let scaled = [start[0], start[1] * exp(-start[2] * ln_ref), start[2]];
                    levenberg_marquardt(&problem, &scaled, options).map(|mut o| {
                        o.params[1] *= exp(o.params[2] * ln_ref);
                        o
                    })
                }
                Family::QuadVertex => {
                    levenberg_marquardt(&QuadVertexProblem { x: &xs, y: &ys }, &start, options)
                }
            };
            let Ok(outcome) = outcome else { continue };
            iterations += outcome.iterations;
            let rss = raw_rss(&outcome.params);
            if rss < best_rss || (rss == best_rss && !converged && outcome.converged()) {
                best_rss = rss;
                best_params = outcome.params.clone();
                best_term = outcome.termination;
                converged = outcome.converged();
            }
        }
    }
    let predicted: Vec<f64> = xs.iter().map(|x| family.eval(*x, &best_params)).collect();
    Ok(NllsFit {
        rmse: stats::rmse(&ys, &predicted),
        r2: stats::r_squared(&ys, &predicted),
        params: best_params,
        rss: best_rss,
        converged,
        termination: best_term,
        iterations,
    })
}

#[cfg(test)]
pub(crate) fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        crate::math::abs(got)
    } else {
        crate::math::abs(got - want) / crate::math::abs(want)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted_points() -> Vec<(f64, f64)> {
        // x from 1e8 to 2e11, 25 log-spaced points
        (0..25)
            .map(|i| {
                let x = 1e8 * powf(2000.0, i as f64 / 24.0);
                (x, 2.0 + 5.0 * powf(x, -0.5))
            })
            .collect()
    }

    #[test]
    fn planted_init_is_a_fixed_point() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&x| (x, 2.0 + 5.0 * powf(x, -0.5)))
            .collect();
        let fit = nlls_fit(
            Family::PowerLaw,
            &pts,
            &[2.0, 5.0, 0.5],
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.params, vec![2.0, 5.0, 0.5]);
        assert_eq!(fit.rss, 0.0);
    }

    #[test]
    fn recovers_planted_power_law_from_generic_init() {
        let pts = planted_points();
        let fit = nlls_fit(
            Family::PowerLaw,
            &pts,
            &[1.9, 3.0, 0.4],
            &FitOptions::default(),
        )
        .unwrap();
        for (got, want) in fit.params.iter().zip([2.0, 5.0, 0.5]) {
            assert!(rel_err(*got, want) < 1e-6, "{:?}", fit.params);
        }
    }

    #[test]
    fn underdetermined_is_rejected() {
        let err = nlls_fit(
            Family::PowerLaw,
            &[(1.0, 1.0), (2.0, 0.5)],
            &[0.0, 1.0, 1.0],
            &FitOptions::default(),
        );
        assert_eq!(
            err.unwrap_err(),
            FitError::Underdetermined {
                points: 2,
                params: 3
            }
        );
    }

    #[test]
    fn identical_x_is_degenerate() {
        let pts = [(3.0, 1.0), (3.0, 2.0), (3.0, 3.0)];
        let err = nlls_fit(
            Family::QuadVertex,
            &pts,
            &[0.0, 1.0, 0.0],
            &FitOptions::default(),
        );
        assert_eq!(err.unwrap_err(), FitError::DegenerateDesign);
    }

    #[test]
    fn never_worse_than_init() {
        let pts: Vec<(f64, f64)> = (0..9)
            .map(|i| {
                (
                    i as f64 - 4.0,
                    1.0 + 0.3 * ((i as f64) - 3.3).powi(2) + 0.01 * ((i * 7 % 3) as f64),
                )
            })
            .collect();
        let init = [1.0, 0.2, 0.0];
        let fit = nlls_fit(Family::QuadVertex, &pts, &init, &FitOptions::default()).unwrap();
        let init_rss: f64 = pts
            .iter()
            .map(|(x, y)| (Family::QuadVertex.eval(*x, &init) - y).powi(2))
            .sum();
        assert!(fit.rss <= init_rss);
        assert!(fit.converged);
    }
}
