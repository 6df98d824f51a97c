//! Joint power law for the optimal learning rate,
//! `η*(N, D) = C_η · N^-α · D^-β`.
//!
//! Per-cell optima come from quadratic fits in `ln η` over each model's LR
//! sweep, read either directly off the recorded samples or off each run's
//! smoothed `L(D)` curve. The law is seeded by linear least squares in log
//! space and then refined in the original space, minimising RMSE.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{
    fit_power_law, fit_quad_log, levenberg_marquardt, lstsq, FitError, FitOptions,
    LeastSquaresProblem, PowerLawOptions,
};
use crate::ingest::RunRecord;
use crate::math::{exp, ln, powf};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LawError {
    #[error("D grid is empty")]
    EmptyGrid,
    #[error("no (N, D) cell produced an optimum")]
    AllCellsFailed,
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("rank-deficient design: need at least 2 distinct N and 2 distinct D")]
    RankDeficient,
    #[error("N, D and η* must be finite and > 0")]
    BadPoint,
    #[error("units {given:?} do not match the law's units {law:?}")]
    UnitMismatch { given: Units, law: Units },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Units in which a law's `N` and `D` are expressed: value = raw count / scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub n_scale: f64,
    pub d_scale: f64,
}

impl Units {
    pub const RAW: Units = Units {
        n_scale: 1.0,
        d_scale: 1.0,
    };
    pub const BILLIONS: Units = Units {
        n_scale: 1e9,
        d_scale: 1e9,
    };
}

impl Default for Units {
    fn default() -> Self {
        Self::RAW
    }
}

/// Optimal LR of one `(N, D)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalLrPoint {
    pub n: f64,
    pub d: f64,
    pub eta_star: f64,
    /// r² of the quadratic fit the optimum came from.
    pub source_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrLaw {
    pub c_eta: f64,
    pub alpha_n: f64,
    pub beta_d: f64,
    /// Coefficient of determination of `ln η*`.
    pub r2: f64,
    /// RMSE of `η*` in the original space.
    pub rmse: f64,
    /// RMSE of the log-linear seed before refinement.
    pub seed_rmse: f64,
    pub units: Units,
    pub n_points: usize,
}

impl LrLaw {
    /// `C_η·N^-α·D^-β`, with `n` and `d` in `self.units`.
    pub fn predict(&self, n: f64, d: f64) -> f64 {
        self.c_eta * powf(n, -self.alpha_n) * powf(d, -self.beta_d)
    }

    /// Same as [`predict`](Self::predict) but checks the caller's units.
    pub fn predict_in(&self, n: f64, d: f64, units: Units) -> Result<f64, LawError> {
        if units != self.units {
            return Err(LawError::UnitMismatch {
                given: units,
                law: self.units,
            });
        }
        if !(n > 0.0 && d > 0.0) {
            return Err(LawError::BadPoint);
        }
        Ok(self.predict(n, d))
    }

    /// The same law with `N` and `D` re-expressed in `units`.
    pub fn in_units(&self, units: Units) -> LrLaw {
        let n_factor = units.n_scale / self.units.n_scale;
        let d_factor = units.d_scale / self.units.d_scale;
        LrLaw {
            c_eta: self.c_eta * powf(n_factor, -self.alpha_n) * powf(d_factor, -self.beta_d),
            units,
            ..self.clone()
        }
    }

    /// `η*(N1, D1) / η*(N2, D2)`; independent of `C_η` and of units.
    pub fn ratio(&self, n1: f64, n2: f64, d1: f64, d2: f64) -> f64 {
        powf(n1 / n2, -self.alpha_n) * powf(d1 / d2, -self.beta_d)
    }
}

pub fn predict_lr(law: &LrLaw, n: f64, d: f64) -> f64 {
    law.predict(n, d)
}

pub fn lr_ratio(law: &LrLaw, n1: f64, n2: f64, d1: f64, d2: f64) -> f64 {
    law.ratio(n1, n2, d1, d2)
}

/// Where each cell's losses come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSource {
    /// Evaluate each run's fitted `L(D)` at the cell's `D`.
    #[default]
    Smoothed,
    /// Use the recorded sample at exactly the cell's `D`.
    Raw,
}

/// Which parameter count stands in for `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCount {
    #[default]
    Total,
    Active,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectOptions {
    pub source: LossSource,
    pub param_count: ParamCount,
    pub power_law: PowerLawOptions,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            source: LossSource::Smoothed,
            param_count: ParamCount::Total,
            power_law: PowerLawOptions::default(),
        }
    }
}

/// A cell or run that produced no usable value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub model: String,
    /// `None` when a whole run failed (its curve fit), else the cell's `D`.
    pub tokens: Option<u64>,
    pub run_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedOptima {
    pub points: Vec<OptimalLrPoint>,
    pub failures: Vec<CellFailure>,
}

/// One optimum per `(model, D)` cell from the global-LR sweeps in `runs`.
///
/// Runs carrying per-module LRs belong to module searches and are skipped.
pub fn collect_optima(
    runs: &[RunRecord],
    d_grid: &[u64],
    options: &CollectOptions,
) -> Result<CollectedOptima, LawError> {
    if d_grid.is_empty() {
        return Err(LawError::EmptyGrid);
    }
    let mut failures = Vec::new();
    // model name -> (N, [(lr, losses at each D)])
    let mut by_model: BTreeMap<&str, (f64, Vec<(f64, Vec<Option<f64>>)>)> = BTreeMap::new();
    for run in runs.iter().filter(|r| r.module_lrs.is_none()) {
        let n = match options.param_count {
            ParamCount::Total => run.model.total_params,
            ParamCount::Active => run.model.active_params,
        } as f64;
        let losses: Vec<Option<f64>> = match options.source {
            LossSource::Raw => d_grid
                .iter()
                .map(|d| run.samples.iter().find(|s| s.tokens == *d).map(|s| s.loss))
                .collect(),
            LossSource::Smoothed => match fit_power_law(&run.samples, &options.power_law) {
                Ok(fit) => d_grid
                    .iter()
                    .map(|d| Some(fit.predict(*d as f64)))
                    .collect(),
                Err(e) => {
                    failures.push(CellFailure {
                        model: run.model.name.clone(),
                        tokens: None,
                        run_id: Some(run.run_id.clone()),
                        reason: alloc::format!("{e}"),
                    });
                    continue;
                }
            },
        };
        by_model
            .entry(run.model.name.as_str())
            .or_insert_with(|| (n, Vec::new()))
            .1
            .push((run.lr_global, losses));
    }

    let mut points = Vec::new();
    for (model, (n, sweep)) in &by_model {
        for (di, &d) in d_grid.iter().enumerate() {
            let cell: Vec<(f64, f64)> = sweep
                .iter()
                .filter_map(|(lr, ls)| ls[di].map(|l| (*lr, l)))
                .collect();
            match fit_quad_log(&cell) {
                Ok(fit) => points.push(OptimalLrPoint {
                    n: *n,
                    d: d as f64,
                    eta_star: fit.optimal_lr(),
                    source_r2: fit.r2,
                }),
                Err(e) => failures.push(CellFailure {
                    model: String::from(*model),
                    tokens: Some(d),
                    run_id: None,
                    reason: alloc::format!("{e}"),
                }),
            }
        }
    }
    if points.is_empty() {
        return Err(LawError::AllCellsFailed);
    }
    Ok(CollectedOptima { points, failures })
}

/// `η = exp(c − α·(ln N − n̄) − β·(ln D − d̄))`, centred for conditioning.
struct LawProblem {
    ln_n: Vec<f64>,
    ln_d: Vec<f64>,
    eta: Vec<f64>,
}

impl LawProblem {
    fn model(&self, p: &[f64], i: usize) -> f64 {
        exp(p[0] - p[1] * self.ln_n[i] - p[2] * self.ln_d[i])
    }
}

impl LeastSquaresProblem for LawProblem {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.eta.len()
    }
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.model(p, i) - self.eta[i];
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..self.eta.len() {
            let f = self.model(p, i);
            out[i * 3] = f;
            out[i * 3 + 1] = -f * self.ln_n[i];
            out[i * 3 + 2] = -f * self.ln_d[i];
        }
    }
}

fn count_distinct(mut v: Vec<f64>) -> usize {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Fits the joint law to `points` (in `units`).
///
/// Points are put in a canonical order first, so the result does not depend
/// on input order.
pub fn fit_lr_law(
    points: &[OptimalLrPoint],
    units: Units,
    options: &FitOptions,
) -> Result<LrLaw, LawError> {
    if points.len() < 4 {
        return Err(LawError::TooFewPoints(points.len()));
    }
    if points
        .iter()
        .any(|p| !(p.n > 0.0 && p.d > 0.0 && p.eta_star > 0.0) || !p.eta_star.is_finite())
    {
        return Err(LawError::BadPoint);
    }
    if count_distinct(points.iter().map(|p| p.n).collect()) < 2
        || count_distinct(points.iter().map(|p| p.d).collect()) < 2
    {
        return Err(LawError::RankDeficient);
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        a.n.total_cmp(&b.n)
            .then(a.d.total_cmp(&b.d))
            .then(a.eta_star.total_cmp(&b.eta_star))
    });

    let raw_ln_n: Vec<f64> = pts.iter().map(|p| ln(p.n)).collect();
    let raw_ln_d: Vec<f64> = pts.iter().map(|p| ln(p.d)).collect();
    let n_bar = stats::mean(&raw_ln_n);
    let d_bar = stats::mean(&raw_ln_d);
    let problem = LawProblem {
        ln_n: raw_ln_n.iter().map(|x| x - n_bar).collect(),
        ln_d: raw_ln_d.iter().map(|x| x - d_bar).collect(),
        eta: pts.iter().map(|p| p.eta_star).collect(),
    };
    let ln_eta: Vec<f64> = problem.eta.iter().map(|e| ln(*e)).collect();
    let m = pts.len();
    let design: Vec<f64> = (0..m)
        .flat_map(|i| [1.0, -problem.ln_n[i], -problem.ln_d[i]])
        .collect();
    let seed = lstsq(&design, &ln_eta, m, 3).ok_or(LawError::RankDeficient)?;

    let rmse_of = |p: &[f64]| {
        let pred: Vec<f64> = (0..m).map(|i| problem.model(p, i)).collect();
        stats::rmse(&problem.eta, &pred)
    };
    let seed_rmse = rmse_of(&seed);
    let refined = levenberg_marquardt(&problem, &seed, options)?;
    let params = if rmse_of(&refined.params) <= seed_rmse {
        refined.params
    } else {
        seed.clone()
    };

    let ln_pred: Vec<f64> = (0..m)
        .map(|i| params[0] - params[1] * problem.ln_n[i] - params[2] * problem.ln_d[i])
        .collect();
    Ok(LrLaw {
        c_eta: exp(params[0] + params[1] * n_bar + params[2] * d_bar),
        alpha_n: params[1],
        beta_d: params[2],
        r2: stats::r_squared(&ln_eta, &ln_pred),
        rmse: rmse_of(&params),
        seed_rmse,
        units,
        n_points: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::rel_err;
    use proptest::prelude::*;

    const PLANTED: (f64, f64, f64) = (38.4588, 0.2219, 0.3509);

    fn law(c: f64, a: f64, b: f64) -> LrLaw {
        LrLaw {
            c_eta: c,
            alpha_n: a,
            beta_d: b,
            r2: 1.0,
            rmse: 0.0,
            seed_rmse: 0.0,
            units: Units::RAW,
            n_points: 0,
        }
    }

    fn grid_points(c: f64, a: f64, b: f64) -> Vec<OptimalLrPoint> {
        let l = law(c, a, b);
        let mut pts = Vec::new();
        for n in [0.55e9, 1e9, 2e9, 3e9] {
            for k in 0..15u64 {
                let d = (80 + 10 * k) as f64 * 1e9;
                pts.push(OptimalLrPoint {
                    n,
                    d,
                    eta_star: l.predict(n, d),
                    source_r2: 1.0,
                });
            }
        }
        pts
    }

    #[test]
    fn exact_recovery_of_reference() {
        let fit = fit_lr_law(
            &grid_points(PLANTED.0, PLANTED.1, PLANTED.2),
            Units::RAW,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(rel_err(fit.c_eta, PLANTED.0) < 1e-6, "{fit:?}");
        assert!(rel_err(fit.alpha_n, PLANTED.1) < 1e-6);
        assert!(rel_err(fit.beta_d, PLANTED.2) < 1e-6);
        assert!((fit.r2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_d_exponent_is_recovered() {
        let fit = fit_lr_law(
            &grid_points(1e-2, 0.3, 0.0),
            Units::RAW,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(fit.beta_d.abs() < 1e-9, "{fit:?}");
    }

    #[test]
    fn rank_deficient_designs() {
        let mut pts = grid_points(PLANTED.0, PLANTED.1, PLANTED.2);
        pts.retain(|p| p.n == 1e9);
        assert_eq!(
            fit_lr_law(&pts, Units::RAW, &FitOptions::default()).unwrap_err(),
            LawError::RankDeficient
        );
        let pts: Vec<OptimalLrPoint> = grid_points(PLANTED.0, PLANTED.1, PLANTED.2)
            .into_iter()
            .filter(|p| p.d == 8e10)
            .collect();
        assert_eq!(
            fit_lr_law(&pts, Units::RAW, &FitOptions::default()).unwrap_err(),
            LawError::RankDeficient
        );
        assert_eq!(
            fit_lr_law(&pts[..3], Units::RAW, &FitOptions::default()).unwrap_err(),
            LawError::TooFewPoints(3)
        );
    }

    #[test]
    fn refinement_never_increases_rmse() {
        let mut pts = grid_points(PLANTED.0, PLANTED.1, PLANTED.2);
        for (i, p) in pts.iter_mut().enumerate() {
            p.eta_star *= 1.0 + 0.05 * (((i * 37) % 11) as f64 / 10.0 - 0.5);
        }
        let fit = fit_lr_law(&pts, Units::RAW, &FitOptions::default()).unwrap();
        assert!(fit.rmse <= fit.seed_rmse);
    }

    #[test]
    fn permutation_invariant() {
        let mut pts = grid_points(PLANTED.0, PLANTED.1, PLANTED.2);
        for (i, p) in pts.iter_mut().enumerate() {
            p.eta_star *= 1.0 + 0.03 * (((i * 13) % 7) as f64 / 6.0 - 0.5);
        }
        let a = fit_lr_law(&pts, Units::RAW, &FitOptions::default()).unwrap();
        pts.reverse();
        pts.swap(3, 17);
        let b = fit_lr_law(&pts, Units::RAW, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_law() {
        let l = law(3e-4, 0.0, 0.0);
        assert_eq!(predict_lr(&l, 1e9, 1e11), 3e-4);
        assert_eq!(predict_lr(&l, 7.0, 0.5), 3e-4);
    }

    #[test]
    fn size_ratio_of_reference_models() {
        let l = law(PLANTED.0, PLANTED.1, PLANTED.2);
        let r = lr_ratio(&l, 0.55e9, 4e9, 1.2e11, 1.2e11);
        assert!((r - 1.5533).abs() < 5e-4, "{r}");
        let table = 8.75e-4 / 5.55e-4;
        assert!((r / table - 1.0).abs() < 0.05);
        assert!((lr_ratio(&l, 8.0, 1.0, 1.0, 1.0) - 1.0 / 1.586).abs() < 1e-3);
        assert!((lr_ratio(&l, 1.0, 8.0, 1.0, 1.0) - 1.586).abs() < 1e-3);
    }

    #[test]
    fn unit_mismatch_is_reported() {
        let l = law(PLANTED.0, PLANTED.1, PLANTED.2);
        assert!(matches!(
            l.predict_in(4.0, 120.0, Units::BILLIONS),
            Err(LawError::UnitMismatch { .. })
        ));
        assert!(l.predict_in(4e9, 1.2e11, Units::RAW).is_ok());
    }

    #[test]
    fn unit_change_rescales_constant_only() {
        let l = law(PLANTED.0, PLANTED.1, PLANTED.2);
        let b = l.in_units(Units {
            n_scale: 1e9,
            d_scale: 1.0,
        });
        assert!(rel_err(b.c_eta, PLANTED.0 * powf(10.0, -9.0 * PLANTED.1)) < 1e-12);
        assert_eq!((b.alpha_n, b.beta_d), (l.alpha_n, l.beta_d));
        assert!(rel_err(b.predict(4.0, 1.2e11), l.predict(4e9, 1.2e11)) < 1e-12);
        assert_eq!(b.ratio(1.0, 3.0, 5.0, 7.0), l.ratio(1.0, 3.0, 5.0, 7.0));
    }

    #[test]
    fn eq7_magnitude_at_4b_120b() {
        // Evaluated with raw counts the reference constants give ~3.7e-5.
        let v = law(PLANTED.0, PLANTED.1, PLANTED.2).predict(4e9, 1.2e11);
        assert!((v - 3.7e-5).abs() < 1e-6, "{v}");
    }

    proptest! {
        #[test]
        fn homogeneity(n in 1e6f64..1e12, d in 1e8f64..1e13, k in 0.01f64..100.0) {
            let l = law(PLANTED.0, PLANTED.1, PLANTED.2);
            prop_assert!(rel_err(l.predict(k * n, d), powf(k, -PLANTED.1) * l.predict(n, d)) < 1e-13);
            prop_assert!(rel_err(l.predict(n, k * d), powf(k, -PLANTED.2) * l.predict(n, d)) < 1e-13);
            prop_assert!(l.predict(n, d) > 0.0);
        }

        #[test]
        fn ratio_is_antisymmetric(a in 1e6f64..1e12, b in 1e6f64..1e12, c in 1e8f64..1e13, d in 1e8f64..1e13) {
            let l = law(PLANTED.0, PLANTED.1, PLANTED.2);
            prop_assert!((l.ratio(a, b, c, d) * l.ratio(b, a, d, c) - 1.0).abs() < 1e-13);
            prop_assert_eq!(l.ratio(a, a, c, c), 1.0);
        }
    }
}
