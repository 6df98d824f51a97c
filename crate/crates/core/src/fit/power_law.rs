use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{geometric_mean_ln, levenberg_marquardt, lstsq, FitError, FitOptions, ScaledPowerLaw};
use crate::ingest::LossSample;
use crate::math::{exp, powf};
use crate::stats;

/// Samples below this many tokens belong to warmup and are not fitted.
pub const DEFAULT_MIN_TOKENS: u64 = 10_000_000_000;

/// Reasons a fitted loss curve should not be trusted for extrapolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "issue")]
pub enum TrustIssue {
    NotConverged,
    /// `γ ≤ 0`: the curve never converges.
    NonPositiveExponent {
        gamma: f64,
    },
    /// `γ` below the configured floor: the fit window has not reached the
    /// flattening part of the curve.
    ExponentBelowFloor {
        gamma: f64,
        floor: f64,
    },
    /// Asymptotic loss at or below zero.
    NonPositiveFloor {
        l0: f64,
    },
    /// The reducible term still dominates the loss at the end of the window.
    ReducibleDominates {
        share: f64,
        limit: f64,
    },
}

/// `L(D) = L0 + A·D^-γ` fitted to one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub l0: f64,
    pub a: f64,
    pub gamma: f64,
    pub r2: f64,
    pub rmse: f64,
    /// Smallest and largest token counts used in the fit.
    pub fit_range: [u64; 2],
    pub n_points: usize,
    pub converged: bool,
    #[serde(default)]
    pub trust_issues: Vec<TrustIssue>,
}

impl PowerLawFit {
    /// Loss predicted at `tokens`.
    pub fn predict(&self, tokens: f64) -> f64 {
        self.l0 + self.a * powf(tokens, -self.gamma)
    }

    pub fn low_trust(&self) -> bool {
        !self.trust_issues.is_empty()
    }

    /// A fit built directly from known coefficients, without data.
    pub fn from_coefficients(l0: f64, a: f64, gamma: f64, fit_range: [u64; 2]) -> Self {
        Self {
            l0,
            a,
            gamma,
            r2: 1.0,
            rmse: 0.0,
            fit_range,
            n_points: 0,
            converged: true,
            trust_issues: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawOptions {
    /// Samples with fewer tokens are ignored (warmup).
    pub min_tokens: u64,
    /// Exponents below this are flagged low-trust.
    pub gamma_floor: f64,
    /// Largest tolerated share of `A·D^-γ` in the loss at the end of the window.
    pub max_reducible_share: f64,
    pub solver: FitOptions,
}

impl Default for PowerLawOptions {
    fn default() -> Self {
        Self {
            min_tokens: DEFAULT_MIN_TOKENS,
            gamma_floor: 0.05,
            max_reducible_share: 0.5,
            solver: FitOptions::default(),
        }
    }
}

/// Grid over γ used to seed the solver: for fixed γ the model is linear in
/// `(L0, B)`, so each grid point has a closed-form best fit.
fn gamma_grid() -> Vec<f64> {
    const N: usize = 160;
    (0..N)
        .map(|i| 1e-3 * powf(4000.0, i as f64 / (N - 1) as f64))
        .collect()
}

fn profile_fit(ln_s: &[f64], y: &[f64], gamma: f64) -> Option<([f64; 3], f64)> {
    let m = y.len();
    let design: Vec<f64> = ln_s.iter().flat_map(|ls| [1.0, exp(-gamma * ls)]).collect();
    let c = lstsq(&design, y, m, 2)?;
    let rss: f64 = ln_s
        .iter()
        .zip(y)
        .map(|(ls, yy)| {
            let r = c[0] + c[1] * exp(-gamma * ls) - yy;
            r * r
        })
        .sum();
    rss.is_finite().then_some(([c[0], c[1], gamma], rss))
}

/// Fits `L0 + A·D^-γ` to the samples at or above `options.min_tokens`.
///
/// Starting points come from the γ-profile grid (local minima, best first);
/// each is refined by Levenberg-Marquardt and the lowest residual wins.
pub fn fit_power_law(
    samples: &[LossSample],
    options: &PowerLawOptions,
) -> Result<PowerLawFit, FitError> {
    options.solver.validate()?;
    let used: Vec<&LossSample> = samples
        .iter()
        .filter(|s| s.tokens >= options.min_tokens && s.tokens > 0)
        .collect();
    if used.len() < 4 {
        return Err(FitError::Underdetermined {
            points: used.len(),
            params: 4,
        });
    }
    if used.iter().any(|s| !s.loss.is_finite()) {
        return Err(FitError::BadInput);
    }
    if used.iter().all(|s| s.tokens == used[0].tokens) {
        return Err(FitError::DegenerateDesign);
    }
    let xs: Vec<f64> = used.iter().map(|s| s.tokens as f64).collect();
    let ys: Vec<f64> = used.iter().map(|s| s.loss).collect();
    let ln_ref = geometric_mean_ln(&xs);
    let problem = ScaledPowerLaw::new(&xs, &ys, ln_ref);

    let grid = gamma_grid();
    let profile: Vec<Option<([f64; 3], f64)>> = grid
        .iter()
        .map(|g| profile_fit(&problem.ln_s, &ys, *g))
        .collect();
    let rss_at = |i: usize| profile[i].map_or(f64::INFINITY, |p| p.1);
    let mut minima: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let here = rss_at(i);
            here.is_finite()
                && (i == 0 || here <= rss_at(i - 1))
                && (i + 1 == grid.len() || here <= rss_at(i + 1))
        })
        .collect();
    minima.sort_by(|&a, &b| rss_at(a).total_cmp(&rss_at(b)));
    minima.truncate(options.solver.multi_start);
    if minima.is_empty() {
        return Err(FitError::DegenerateDesign);
    }

    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for &i in &minima {
        let (start, start_rss) = profile[i].expect("finite minimum");
        let outcome = match levenberg_marquardt(&problem, &start, &options.solver) {
            Ok(o) => o,
            Err(_) => continue,
        };
        let (params, rss, converged) = if outcome.rss <= start_rss {
            (outcome.params.clone(), outcome.rss, outcome.converged())
        } else {
            (start.to_vec(), start_rss, false)
        };
        if best.as_ref().map_or(true, |b| rss < b.1) {
            best = Some((params, rss, converged));
        }
    }
    let (p, _, converged) = best.ok_or(FitError::DegenerateDesign)?;
    let (l0, b, gamma) = (p[0], p[1], p[2]);
    if b <= 0.0 {
        return Err(FitError::NotDecreasing { amplitude: b });
    }
    let a = b * exp(gamma * ln_ref);
    let predicted: Vec<f64> = problem
        .ln_s
        .iter()
        .map(|ls| l0 + b * exp(-gamma * ls))
        .collect();
    let lo = used.iter().map(|s| s.tokens).min().unwrap_or(0);
    let hi = used.iter().map(|s| s.tokens).max().unwrap_or(0);

    let mut issues = vec![];
    if !converged {
        issues.push(TrustIssue::NotConverged);
    }
    if gamma <= 0.0 {
        issues.push(TrustIssue::NonPositiveExponent { gamma });
    } else if gamma < options.gamma_floor {
        issues.push(TrustIssue::ExponentBelowFloor {
            gamma,
            floor: options.gamma_floor,
        });
    }
    if l0 <= 0.0 {
        issues.push(TrustIssue::NonPositiveFloor { l0 });
    }
    let end_loss = l0 + a * powf(hi as f64, -gamma);
    let share = (end_loss - l0) / end_loss;
    if !(share <= options.max_reducible_share) {
        issues.push(TrustIssue::ReducibleDominates {
            share,
            limit: options.max_reducible_share,
        });
    }

    Ok(PowerLawFit {
        l0,
        a,
        gamma,
        r2: stats::r_squared(&ys, &predicted),
        rmse: stats::rmse(&ys, &predicted),
        fit_range: [lo, hi],
        n_points: used.len(),
        converged,
        trust_issues: issues,
    })
}

/// Loss predicted by a fitted curve at `tokens`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrapolation {
    pub loss: f64,
    /// `tokens` lies beyond the largest fitted token count.
    pub extrapolated: bool,
}

pub fn extrapolate_loss(fit: &PowerLawFit, tokens: f64) -> Result<Extrapolation, FitError> {
    if !(tokens > 0.0) {
        return Err(FitError::BadInput);
    }
    Ok(Extrapolation {
        loss: fit.predict(tokens),
        extrapolated: tokens > fit.fit_range[1] as f64,
    })
}
