//! Damped Gauss-Newton (Levenberg-Marquardt) solver.
//!
//! Marquardt diagonal scaling with Nielsen's damping update. Steps are only
//! accepted when they lower the residual sum of squares, so the returned
//! parameters are never worse than the starting point.

use alloc::vec;
use alloc::vec::Vec;

use super::linalg::solve;
use super::{FitError, FitOptions};
use crate::math::{powf, sqrt};

/// A residual vector `r(p)` with its Jacobian `∂r/∂p`.
pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, params: &[f64], out: &mut [f64]);
    /// Row-major `n_residuals × n_params`.
    fn jacobian(&self, params: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Residuals are exactly zero.
    ZeroResidual,
    /// Relative step below `xtol`.
    SmallStep,
    /// Relative cost reduction below `ftol`.
    SmallReduction,
    /// Damping grew without finding a descent step.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub rss: f64,
    pub initial_rss: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl LmOutcome {
    pub fn converged(&self) -> bool {
        !matches!(self.termination, Termination::MaxIterations)
    }
}

fn rss_of<P: LeastSquaresProblem + ?Sized>(problem: &P, p: &[f64], buf: &mut [f64]) -> f64 {
    problem.residuals(p, buf);
    let s: f64 = buf.iter().map(|r| r * r).sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Minimises `‖r(p)‖²` starting from `init`.
pub fn levenberg_marquardt<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    init: &[f64],
    options: &FitOptions,
) -> Result<LmOutcome, FitError> {
    options.validate()?;
    let n = problem.n_params();
    let m = problem.n_residuals();
    if init.len() != n || init.iter().any(|v| !v.is_finite()) {
        return Err(FitError::BadInit);
    }
    if m < n {
        return Err(FitError::Underdetermined {
            points: m,
            params: n,
        });
    }
    let mut p = init.to_vec();
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut cost = rss_of(problem, &p, &mut r);
    if !cost.is_finite() {
        return Err(FitError::BadInit);
    }
    let initial_rss = cost;
    let mut lambda = -1.0;
    let mut nu = options.damping_increase;
    let mut scratch = vec![0.0; m];
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    'outer: while iterations < options.max_iterations {
        iterations += 1;
        if cost == 0.0 {
            termination = Termination::ZeroResidual;
            break;
        }
        problem.residuals(&p, &mut r);
        problem.jacobian(&p, &mut jac);
        let mut jtj = vec![0.0; n * n];
        let mut g = vec![0.0; n];
        for row in 0..m {
            let jr = &jac[row * n..(row + 1) * n];
            for a in 0..n {
                g[a] += jr[a] * r[row];
                for b in a..n {
                    jtj[a * n + b] += jr[a] * jr[b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                jtj[a * n + b] = jtj[b * n + a];
            }
        }
        let diag: Vec<f64> = (0..n).map(|a| jtj[a * n + a].max(1e-300)).collect();
        if lambda < 0.0 {
            lambda = options.initial_damping;
        }
        loop {
            let mut lhs = jtj.clone();
            for a in 0..n {
                lhs[a * n + a] += lambda * diag[a];
            }
            let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let Some(delta) = solve(&mut lhs, &mut rhs, n) else {
                lambda *= nu;
                nu *= 2.0;
                if !lambda.is_finite() || lambda > 1e300 {
                    termination = Termination::Stalled;
                    break 'outer;
                }
                continue;
            };
            let step_norm = sqrt(delta.iter().map(|d| d * d).sum());
            let p_norm = sqrt(p.iter().map(|v| v * v).sum());
            if step_norm <= options.xtol * (p_norm + options.xtol) {
                termination = Termination::SmallStep;
                break 'outer;
            }
            let trial: Vec<f64> = p.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let new_cost = rss_of(problem, &trial, &mut scratch);
            // predicted reduction of the quadratic model
            let predicted: f64 = (0..n)
                .map(|a| delta[a] * (lambda * diag[a] * delta[a] - g[a]))
                .sum();
            let actual = cost - new_cost;
            if new_cost < cost && predicted > 0.0 {
                let rho = actual / predicted;
                p = trial;
                let old = cost;
                cost = new_cost;
                lambda *= (1.0f64 / 3.0).max(1.0 - powf(2.0 * rho - 1.0, 3.0));
                nu = options.damping_increase;
                if actual <= options.ftol * old {
                    termination = Termination::SmallReduction;
                    break 'outer;
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if !lambda.is_finite() || lambda > 1e300 {
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }
    Ok(LmOutcome {
        params: p,
        rss: cost,
        initial_rss,
        iterations,
        termination,
    })
}
