//! Bodies of each artifact kind, plus the pipeline steps that produce them.

use std::collections::BTreeMap;

use lrkit_core::digest::{digest_points, DigestBuilder};
use lrkit_core::fit::{
    fit_power_law, fit_quad_log, PowerLawFit, PowerLawOptions, QuadLogFit, TrustIssue,
};
use lrkit_core::ingest::{resample_curve, IngestError, LossSample, ModelShape, RunRecord};
use lrkit_core::lawfit::{
    collect_optima, fit_lr_law, CellFailure, CollectOptions, LawError, LossSource, LrLaw,
    OptimalLrPoint, ParamCount, Units,
};
use lrkit_core::micro::{
    CoordCheckReport, CoordStats, MarkovTask, NetConfig, TrainOptions, TrainTrace,
};
use lrkit_core::modsearch::{ModuleLrTable, RunConfig, SearchPlan};
use lrkit_core::mutransfer::{BaseHParams, GroupHParams, TransferGroup, TransferPlan};
use lrkit_core::oracle::SurfaceSpec;
use lrkit_core::FitOptions;
use serde::{Deserialize, Serialize};

use crate::runs::to_jsonl;

fn short(s: String) -> String {
    s[..16.min(s.len())].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    /// Digest of the canonical JSONL of the ingested runs.
    pub input_digest: String,
    pub n_runs: usize,
    pub n_samples: usize,
    pub run_ids: Vec<String>,
}

impl IngestRecord {
    pub fn of(runs: &[RunRecord]) -> Self {
        Self {
            input_digest: short(lrkit_core::digest::sha256_hex(to_jsonl(runs).as_bytes())),
            n_runs: runs.len(),
            n_samples: runs.iter().map(|r| r.samples.len()).sum(),
            run_ids: runs.iter().map(|r| r.run_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams {
    pub l0: f64,
    pub a: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawRecord {
    pub run_id: String,
    pub params: PowerLawParams,
    pub r2: f64,
    pub rmse: f64,
    pub fit_range: [u64; 2],
    pub n_points: usize,
    pub converged: bool,
    pub low_trust: bool,
    pub trust_issues: Vec<TrustIssue>,
    pub min_tokens: u64,
    pub input_digest: String,
    pub samples: Vec<LossSample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resampled: Vec<LossSample>,
}

impl PowerLawRecord {
    pub fn fit(
        run: &RunRecord,
        options: &PowerLawOptions,
    ) -> Result<Self, lrkit_core::fit::FitError> {
        let fit = fit_power_law(&run.samples, options)?;
        let used: Vec<(f64, f64)> = run
            .samples
            .iter()
            .filter(|s| s.tokens >= options.min_tokens && s.tokens > 0)
            .map(|s| (s.tokens as f64, s.loss))
            .collect();
        Ok(Self {
            run_id: run.run_id.clone(),
            params: PowerLawParams {
                l0: fit.l0,
                a: fit.a,
                gamma: fit.gamma,
            },
            r2: fit.r2,
            rmse: fit.rmse,
            fit_range: fit.fit_range,
            n_points: fit.n_points,
            converged: fit.converged,
            low_trust: fit.low_trust(),
            trust_issues: fit.trust_issues.clone(),
            min_tokens: options.min_tokens,
            input_digest: digest_points(&used),
            samples: run.samples.clone(),
            resampled: Vec::new(),
        })
    }

    pub fn to_fit(&self) -> PowerLawFit {
        PowerLawFit {
            l0: self.params.l0,
            a: self.params.a,
            gamma: self.params.gamma,
            r2: self.r2,
            rmse: self.rmse,
            fit_range: self.fit_range,
            n_points: self.n_points,
            converged: self.converged,
            trust_issues: self.trust_issues.clone(),
        }
    }

    pub fn with_resampled(
        mut self,
        interval: u64,
        lo: u64,
        hi: u64,
        strict: bool,
    ) -> Result<Self, IngestError> {
        self.resampled = resample_curve(&self.to_fit(), interval, lo, hi, strict)?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadLogParams {
    pub l_min: f64,
    pub c: f64,
    pub eta_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadLogRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u64>,
    pub params: QuadLogParams,
    pub eta_star: f64,
    pub r2: f64,
    pub rmse: f64,
    pub n_points: usize,
    pub input_digest: String,
    /// `(lr, loss)` points the parabola was fitted to.
    pub points: Vec<(f64, f64)>,
}

impl QuadLogRecord {
    pub fn fit(
        points: Vec<(f64, f64)>,
        model: Option<String>,
        tokens: Option<u64>,
    ) -> Result<Self, lrkit_core::fit::FitError> {
        let mut points = points;
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let fit = fit_quad_log(&points)?;
        Ok(Self {
            model,
            tokens,
            params: QuadLogParams {
                l_min: fit.l_min,
                c: fit.c,
                eta_min: fit.eta_min,
            },
            eta_star: fit.optimal_lr(),
            r2: fit.r2,
            rmse: fit.rmse,
            n_points: fit.n_points,
            input_digest: digest_points(&points),
            points,
        })
    }

    pub fn to_fit(&self) -> QuadLogFit {
        QuadLogFit {
            l_min: self.params.l_min,
            c: self.params.c,
            eta_min: self.params.eta_min,
            r2: self.r2,
            rmse: self.rmse,
            n_points: self.n_points,
        }
    }
}

/// `(lr, loss)` points of one `(model, D)` cell, from each global-LR run.
pub fn cell_points(
    runs: &[RunRecord],
    model: &str,
    tokens: u64,
    source: LossSource,
    options: &PowerLawOptions,
) -> Result<Vec<(f64, f64)>, lrkit_core::fit::FitError> {
    let mut points = Vec::new();
    for run in runs
        .iter()
        .filter(|r| r.model.name == model && r.module_lrs.is_none())
    {
        let loss = match source {
            LossSource::Raw => run
                .samples
                .iter()
                .find(|s| s.tokens == tokens)
                .map(|s| s.loss),
            LossSource::Smoothed => {
                Some(fit_power_law(&run.samples, options)?.predict(tokens as f64))
            }
        };
        if let Some(l) = loss {
            points.push((run.lr_global, l));
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrLawRecord {
    #[serde(rename = "C_eta")]
    pub c_eta: f64,
    #[serde(rename = "alpha_N")]
    pub alpha_n: f64,
    #[serde(rename = "beta_D")]
    pub beta_d: f64,
    pub units: Units,
    /// Coefficient of determination of `ln η*`.
    pub r2: f64,
    pub rmse: f64,
    pub seed_rmse: f64,
    pub n_points: usize,
    pub points_digest: String,
    pub source: LossSource,
    pub param_count: ParamCount,
    pub min_tokens: u64,
    pub d_grid: Vec<u64>,
    /// Per-cell optima in raw counts.
    pub points: Vec<OptimalLrPoint>,
    pub failures: Vec<CellFailure>,
}

impl LrLawRecord {
    pub fn to_law(&self) -> LrLaw {
        LrLaw {
            c_eta: self.c_eta,
            alpha_n: self.alpha_n,
            beta_d: self.beta_d,
            r2: self.r2,
            rmse: self.rmse,
            seed_rmse: self.seed_rmse,
            units: self.units,
            n_points: self.n_points,
        }
    }
}

pub fn points_digest(points: &[OptimalLrPoint]) -> String {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.n.total_cmp(&b.n)
            .then(a.d.total_cmp(&b.d))
            .then(a.eta_star.total_cmp(&b.eta_star))
    });
    let mut d = DigestBuilder::new();
    d.u64(sorted.len() as u64);
    for p in &sorted {
        d.f64(p.n).f64(p.d).f64(p.eta_star);
    }
    d.finish_hex(16)
}

/// Settings of the runs → optima → law pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct LawPipeline {
    pub d_grid: Vec<u64>,
    pub collect: CollectOptions,
    pub units: Units,
    pub solver: FitOptions,
}

impl LawPipeline {
    pub fn new(d_grid: Vec<u64>) -> Self {
        Self {
            d_grid,
            collect: CollectOptions::default(),
            units: Units::RAW,
            solver: FitOptions::default(),
        }
    }

    /// Collects per-cell optima from `runs` and fits the joint law.
    pub fn run(&self, runs: &[RunRecord]) -> Result<LrLawRecord, LawError> {
        let collected = collect_optima(runs, &self.d_grid, &self.collect)?;
        let raw = fit_lr_law(&collected.points, Units::RAW, &self.solver)?;
        let law = raw.in_units(self.units);
        let mut points = collected.points;
        points.sort_by(|a, b| a.n.total_cmp(&b.n).then(a.d.total_cmp(&b.d)));
        Ok(LrLawRecord {
            c_eta: law.c_eta,
            alpha_n: law.alpha_n,
            beta_d: law.beta_d,
            units: law.units,
            r2: law.r2,
            rmse: law.rmse,
            seed_rmse: law.seed_rmse,
            n_points: law.n_points,
            points_digest: points_digest(&points),
            source: self.collect.source,
            param_count: self.collect.param_count,
            min_tokens: self.collect.power_law.min_tokens,
            d_grid: self.d_grid.clone(),
            points,
            failures: collected.failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRecord {
    pub spec: SurfaceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_name: Option<String>,
    pub shapes: Vec<ModelShape>,
    pub lr_grid: Vec<f64>,
    pub d_grid: Vec<u64>,
    /// Digest of the generated runs as JSONL.
    pub runs_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPlanRecord {
    pub plan: SearchPlan,
    pub complete: bool,
    pub next_configs: Vec<RunConfig>,
}

impl SearchPlanRecord {
    pub fn of(plan: SearchPlan) -> Self {
        let next_configs = plan.next_stage_configs().unwrap_or_default();
        Self {
            complete: plan.is_complete(),
            plan,
            next_configs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleTableRecord {
    pub table: ModuleLrTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlanRecord {
    pub plan: TransferPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseHParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applied: Option<BTreeMap<TransferGroup, GroupHParams>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub config: NetConfig,
    pub task: MarkovTask,
    pub options: TrainOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    pub num_params: usize,
    pub trace: TrainTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckRecord {
    pub task: MarkovTask,
    pub options: TrainOptions,
    pub report: CoordCheckReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_series: Option<Vec<CoordStats>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_ratio: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrkit_core::oracle::{gen_runs, SweepDesign};

    #[test]
    fn zero_noise_raw_pipeline_recovers_planted_law() {
        let spec = SurfaceSpec::reference(0.0, 0);
        let design = SweepDesign::reference();
        let runs = gen_runs(&spec, &design.shapes, &design.d_grid, &design.lr_grid);
        let mut p = LawPipeline::new(design.d_grid.clone());
        p.collect.source = LossSource::Raw;
        let rec = p.run(&runs).unwrap();
        assert!(
            (rec.alpha_n / spec.alpha_n - 1.0).abs() < 1e-4,
            "{}",
            rec.alpha_n
        );
        assert!(
            (rec.beta_d / spec.beta_d - 1.0).abs() < 1e-4,
            "{}",
            rec.beta_d
        );
        assert!((rec.c_eta / spec.c_eta - 1.0).abs() < 1e-4, "{}", rec.c_eta);
        assert_eq!(rec.n_points, 60);
    }

    #[test]
    fn billions_law_predicts_like_raw_law() {
        let spec = SurfaceSpec::reference(0.0, 0);
        let design = SweepDesign::reference();
        let runs = gen_runs(&spec, &design.shapes, &design.d_grid, &design.lr_grid);
        let mut p = LawPipeline::new(design.d_grid.clone());
        let raw = p.run(&runs).unwrap().to_law();
        p.units = Units::BILLIONS;
        let bil = p.run(&runs).unwrap().to_law();
        let (a, b) = (raw.predict(12e9, 500e9), bil.predict(12.0, 500.0));
        assert!((a / b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quad_record_is_order_independent() {
        let pts: Vec<(f64, f64)> = [1e-4, 3e-4, 1e-3, 3e-3]
            .iter()
            .map(|&lr: &f64| (lr, 2.0 + (lr.ln() + 7.0).powi(2)))
            .collect();
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(
            QuadLogRecord::fit(pts, None, None).unwrap(),
            QuadLogRecord::fit(rev, None, None).unwrap()
        );
    }
}
