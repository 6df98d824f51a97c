//! Greedy module-level learning-rate search.
//!
//! Parameters are split into four groups. Starting from the global optimum
//! for every group, one group at a time sweeps its LR grid while all others
//! stay fixed; the fitted minimum of loss against `ln η` becomes that
//! group's LR for every later stage.
//!
//! Default stage order: LM head, router, hidden, embedding.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{fit_quad_log, FitError, QuadLogFit};
use crate::ingest::ModelShape;

/// Parameter groups for module-level learning rates.
///
/// `Hidden` holds attention and normalisation parameters (and dense MLPs);
/// `Router` holds the router matrix together with the experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleGroup {
    Embedding,
    Hidden,
    Router,
    LmHead,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 4] = [
        ModuleGroup::Embedding,
        ModuleGroup::Hidden,
        ModuleGroup::Router,
        ModuleGroup::LmHead,
    ];

    /// Stage order used unless the caller overrides it.
    pub const DEFAULT_ORDER: [ModuleGroup; 4] = [
        ModuleGroup::LmHead,
        ModuleGroup::Router,
        ModuleGroup::Hidden,
        ModuleGroup::Embedding,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ModuleGroup::Embedding => "embedding",
            ModuleGroup::Hidden => "hidden",
            ModuleGroup::Router => "router",
            ModuleGroup::LmHead => "lm_head",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.key() == key)
    }
}

/// Token budget of each search run unless configured otherwise.
pub const DEFAULT_D_BUDGET: u64 = 120_000_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("global optimal LR must be finite and > 0")]
    BadGlobalLr,
    #[error("grid for {0:?} needs at least 3 positive learning rates")]
    ShortGrid(ModuleGroup),
    #[error("stage order must be a permutation of the four module groups")]
    BadOrder,
    #[error("search plan is complete")]
    Complete,
    #[error("search plan is not complete ({done} of 4 stages recorded)")]
    Incomplete { done: usize },
    #[error("stage fit failed: {0}")]
    Fit(#[from] FitError),
}

/// One training run requested by a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    pub stage: usize,
    pub group: ModuleGroup,
    /// LR of the group being swept.
    pub lr: f64,
    /// LRs for all four groups, the swept one included.
    pub module_lrs: BTreeMap<ModuleGroup, f64>,
    pub tokens: u64,
}

/// Outcome of one recorded stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub group: ModuleGroup,
    pub points: Vec<(f64, f64)>,
    pub fit: Option<QuadLogFit>,
    pub optimum: f64,
    /// The parabola had no interior minimum and the best grid point was used.
    pub fallback: bool,
    /// Fitted minimum loss, or the best observed loss on fallback.
    pub best_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPlan {
    pub shape: ModelShape,
    pub global_opt_lr: f64,
    pub stage_order: Vec<ModuleGroup>,
    pub fixed_lrs: BTreeMap<ModuleGroup, f64>,
    pub grids: BTreeMap<ModuleGroup, Vec<f64>>,
    pub d_budget: u64,
    /// Loss of the all-global configuration at `d_budget`, if known.
    #[serde(default)]
    pub global_loss: Option<f64>,
    #[serde(default)]
    pub results: Vec<StageResult>,
}

/// The same grid for every group.
pub fn uniform_grids(grid: &[f64]) -> BTreeMap<ModuleGroup, Vec<f64>> {
    ModuleGroup::ALL
        .into_iter()
        .map(|g| (g, grid.to_vec()))
        .collect()
}

pub fn init_plan(
    shape: ModelShape,
    global_opt_lr: f64,
    grids: BTreeMap<ModuleGroup, Vec<f64>>,
    d_budget: u64,
) -> Result<SearchPlan, SearchError> {
    if !(global_opt_lr > 0.0 && global_opt_lr.is_finite()) {
        return Err(SearchError::BadGlobalLr);
    }
    for g in ModuleGroup::ALL {
        let ok = grids
            .get(&g)
            .is_some_and(|v| v.len() >= 3 && v.iter().all(|lr| *lr > 0.0 && lr.is_finite()));
        if !ok {
            return Err(SearchError::ShortGrid(g));
        }
    }
    Ok(SearchPlan {
        shape,
        global_opt_lr,
        stage_order: ModuleGroup::DEFAULT_ORDER.to_vec(),
        fixed_lrs: ModuleGroup::ALL
            .into_iter()
            .map(|g| (g, global_opt_lr))
            .collect(),
        grids,
        d_budget,
        global_loss: None,
        results: Vec::new(),
    })
}

impl SearchPlan {
    pub fn with_stage_order(mut self, order: &[ModuleGroup]) -> Result<Self, SearchError> {
        let mut sorted = order.to_vec();
        sorted.sort();
        sorted.dedup();
        if order.len() != 4 || sorted.len() != 4 || !self.results.is_empty() {
            return Err(SearchError::BadOrder);
        }
        self.stage_order = order.to_vec();
        Ok(self)
    }

    pub fn with_global_loss(mut self, loss: f64) -> Self {
        self.global_loss = Some(loss);
        self
    }

    pub fn is_complete(&self) -> bool {
        self.results.len() == self.stage_order.len()
    }

    pub fn current_group(&self) -> Option<ModuleGroup> {
        self.stage_order.get(self.results.len()).copied()
    }

    /// LRs in force for the next stage: recorded optima over the global LR.
    pub fn current_lrs(&self) -> BTreeMap<ModuleGroup, f64> {
        let mut lrs = self.fixed_lrs.clone();
        for r in &self.results {
            lrs.insert(r.group, r.optimum);
        }
        lrs
    }

    /// Recorded optimum for `group`, if its stage has run.
    pub fn optimum(&self, group: ModuleGroup) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.group == group)
            .map(|r| r.optimum)
    }

    pub fn next_stage_configs(&self) -> Result<Vec<RunConfig>, SearchError> {
        let group = self.current_group().ok_or(SearchError::Complete)?;
        let base = self.current_lrs();
        Ok(self.grids[&group]
            .iter()
            .map(|&lr| {
                let mut module_lrs = base.clone();
                module_lrs.insert(group, lr);
                RunConfig {
                    model: self.shape.name.clone(),
                    stage: self.results.len(),
                    group,
                    lr,
                    module_lrs,
                    tokens: self.d_budget,
                }
            })
            .collect())
    }

    /// Fits the current stage's `(lr, loss)` points and fixes its optimum.
    pub fn record_stage(&mut self, stage_runs: &[(f64, f64)]) -> Result<&StageResult, SearchError> {
        let group = self.current_group().ok_or(SearchError::Complete)?;
        let result = match fit_quad_log(stage_runs) {
            Ok(fit) => StageResult {
                group,
                points: stage_runs.to_vec(),
                optimum: fit.optimal_lr(),
                best_loss: fit.l_min,
                fit: Some(fit),
                fallback: false,
            },
            Err(FitError::NoInteriorOptimum { .. }) => {
                let (lr, loss) = stage_runs
                    .iter()
                    .copied()
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
                    .expect("fit_quad_log checked the point count");
                StageResult {
                    group,
                    points: stage_runs.to_vec(),
                    fit: None,
                    optimum: lr,
                    fallback: true,
                    best_loss: loss,
                }
            }
            Err(e) => return Err(e.into()),
        };
        self.results.push(result);
        Ok(self.results.last().expect("just pushed"))
    }
}

pub fn next_stage_configs(plan: &SearchPlan) -> Result<Vec<RunConfig>, SearchError> {
    plan.next_stage_configs()
}

pub fn record_stage(
    mut plan: SearchPlan,
    stage_runs: &[(f64, f64)],
) -> Result<SearchPlan, SearchError> {
    plan.record_stage(stage_runs)?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleLrRow {
    pub model: String,
    pub total_params: u64,
    pub global_lr: f64,
    pub optima: BTreeMap<ModuleGroup, f64>,
    pub fallbacks: Vec<ModuleGroup>,
    pub global_loss: Option<f64>,
    /// Lowest loss reached across the stages.
    pub module_min_loss: f64,
    /// `module_min_loss − global_loss`.
    pub delta_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleLrTable {
    pub rows: Vec<ModuleLrRow>,
}

pub fn assemble_table(plans: &[SearchPlan]) -> Result<ModuleLrTable, SearchError> {
    let mut rows = Vec::with_capacity(plans.len());
    for p in plans {
        if !p.is_complete() {
            return Err(SearchError::Incomplete {
                done: p.results.len(),
            });
        }
        let module_min_loss = p
            .results
            .iter()
            .map(|r| r.best_loss)
            .fold(f64::INFINITY, f64::min);
        rows.push(ModuleLrRow {
            model: p.shape.name.clone(),
            total_params: p.shape.total_params,
            global_lr: p.global_opt_lr,
            optima: p.results.iter().map(|r| (r.group, r.optimum)).collect(),
            fallbacks: p
                .results
                .iter()
                .filter(|r| r.fallback)
                .map(|r| r.group)
                .collect(),
            global_loss: p.global_loss,
            module_min_loss,
            delta_loss: p.global_loss.map(|g| module_min_loss - g),
        });
    }
    Ok(ModuleLrTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ln;

    fn shape_4b() -> ModelShape {
        ModelShape::new(
            "qwen3-moe-4b-a0.5b",
            4_000_000_000,
            530_000_000,
            768,
            18,
            32,
            4,
            768,
            true,
        )
    }

    fn grid_500m() -> Vec<f64> {
        alloc::vec![8e-5, 3e-4, 8.75e-4, 1e-3, 1.5e-3, 2e-3, 3e-3, 4e-3]
    }

    #[test]
    fn init_sets_every_group_to_global() {
        let plan = init_plan(
            shape_4b(),
            5.55e-4,
            uniform_grids(&grid_500m()),
            DEFAULT_D_BUDGET,
        )
        .unwrap();
        assert!(plan.fixed_lrs.values().all(|lr| *lr == 5.55e-4));
        assert_eq!(plan.fixed_lrs.len(), 4);
        assert!(plan.results.is_empty());
        assert_eq!(plan.stage_order, ModuleGroup::DEFAULT_ORDER);
        for g in ModuleGroup::ALL {
            assert_eq!(plan.grids[&g], grid_500m());
        }
    }

    #[test]
    fn first_stage_has_one_config_per_grid_point() {
        let plan = init_plan(
            shape_4b(),
            5.55e-4,
            uniform_grids(&grid_500m()),
            DEFAULT_D_BUDGET,
        )
        .unwrap();
        let configs = plan.next_stage_configs().unwrap();
        assert_eq!(configs.len(), 8);
        for c in &configs {
            assert_eq!(c.group, ModuleGroup::LmHead);
            assert_eq!(c.tokens, 120_000_000_000);
            for g in [
                ModuleGroup::Embedding,
                ModuleGroup::Hidden,
                ModuleGroup::Router,
            ] {
                assert_eq!(c.module_lrs[&g], 5.55e-4);
            }
            assert_eq!(c.module_lrs[&ModuleGroup::LmHead], c.lr);
        }
    }

    #[test]
    fn second_stage_uses_recorded_lm_head() {
        let mut plan = init_plan(
            shape_4b(),
            5.55e-4,
            uniform_grids(&grid_500m()),
            DEFAULT_D_BUDGET,
        )
        .unwrap();
        let target = 2.86e-4;
        let pts: Vec<(f64, f64)> = grid_500m()
            .iter()
            .map(|&lr| (lr, 2.2 + 0.05 * (ln(lr) - ln(target)).powi(2)))
            .collect();
        plan.record_stage(&pts).unwrap();
        assert!((plan.optimum(ModuleGroup::LmHead).unwrap() / target - 1.0).abs() < 1e-9);
        let configs = plan.next_stage_configs().unwrap();
        for c in &configs {
            assert_eq!(c.group, ModuleGroup::Router);
            assert!((c.module_lrs[&ModuleGroup::LmHead] / 2.86e-4 - 1.0).abs() < 1e-9);
            assert_eq!(c.module_lrs[&ModuleGroup::Embedding], 5.55e-4);
            assert_eq!(c.module_lrs[&ModuleGroup::Hidden], 5.55e-4);
        }
    }

    #[test]
    fn flat_stage_falls_back_to_best_grid_point() {
        let mut plan = init_plan(
            shape_4b(),
            5.55e-4,
            uniform_grids(&grid_500m()),
            DEFAULT_D_BUDGET,
        )
        .unwrap();
        let pts: Vec<(f64, f64)> = grid_500m().iter().map(|&lr| (lr, 2.0)).collect();
        let r = plan.record_stage(&pts).unwrap();
        assert!(r.fallback);
        assert_eq!(r.optimum, 8e-5);
    }

    #[test]
    fn completed_plan_signals_complete() {
        let mut plan = init_plan(
            shape_4b(),
            5.55e-4,
            uniform_grids(&grid_500m()),
            DEFAULT_D_BUDGET,
        )
        .unwrap();
        let pts: Vec<(f64, f64)> = grid_500m()
            .iter()
            .map(|&lr| (lr, 2.0 + 0.1 * (ln(lr) - ln(6e-4)).powi(2)))
            .collect();
        for _ in 0..4 {
            plan.record_stage(&pts).unwrap();
        }
        assert!(plan.is_complete());
        assert_eq!(plan.next_stage_configs(), Err(SearchError::Complete));
        assert!(matches!(
            plan.record_stage(&pts),
            Err(SearchError::Complete)
        ));
    }

    #[test]
    fn rejects_short_grids_and_bad_orders() {
        let mut grids = uniform_grids(&grid_500m());
        grids.insert(ModuleGroup::Router, alloc::vec![1e-4, 2e-4]);
        assert_eq!(
            init_plan(shape_4b(), 5e-4, grids, 1).unwrap_err(),
            SearchError::ShortGrid(ModuleGroup::Router)
        );
        let plan = init_plan(shape_4b(), 5e-4, uniform_grids(&grid_500m()), 1).unwrap();
        assert!(plan
            .clone()
            .with_stage_order(&[ModuleGroup::Hidden; 4])
            .is_err());
        assert!(plan.with_stage_order(&ModuleGroup::ALL).is_ok());
        assert_eq!(
            init_plan(shape_4b(), 0.0, uniform_grids(&grid_500m()), 1).unwrap_err(),
            SearchError::BadGlobalLr
        );
    }

    #[test]
    fn table_requires_complete_plans() {
        let plan = init_plan(
            shape_4b(),
            5.55e-4,
            uniform_grids(&grid_500m()),
            DEFAULT_D_BUDGET,
        )
        .unwrap();
        assert_eq!(
            assemble_table(&[plan]),
            Err(SearchError::Incomplete { done: 0 })
        );
    }

    #[test]
    fn table_row_and_delta() {
        let mut plan = init_plan(
            shape_4b(),
            5.55e-4,
            uniform_grids(&grid_500m()),
            DEFAULT_D_BUDGET,
        )
        .unwrap()
        .with_global_loss(2.05);
        for l in [2.04, 2.03, 2.045, 2.05] {
            let pts: Vec<(f64, f64)> = grid_500m()
                .iter()
                .map(|&lr| (lr, l + 0.1 * (ln(lr) - ln(6e-4)).powi(2)))
                .collect();
            plan.record_stage(&pts).unwrap();
        }
        let table = assemble_table(&[plan]).unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.optima.len(), 4);
        assert!((row.module_min_loss - 2.03).abs() < 1e-9);
        assert!((row.delta_loss.unwrap() + 0.02).abs() < 1e-9);
    }
}
