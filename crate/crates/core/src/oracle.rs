//! Synthetic loss surfaces with planted answers.
//!
//! `L(N, D, η) = L0(N) + A·D^-γ + C·(ln η − ln η*(N, D))² + noise`, with
//! `η*(N, D) = C_η·N^-α·D^-β`. Optional per-group terms replace the single
//! quadratic by a separable sum over module groups, for checking the greedy
//! module search.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::digest::DigestBuilder;
use crate::ingest::{LossSample, ModelShape, RunRecord};
use crate::math::{ln, powf};
use crate::modsearch::ModuleGroup;
use crate::schedule::WsdSchedule;

/// `L0(N) = base + amp·N^-exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFloor {
    pub base: f64,
    pub amp: f64,
    pub exponent: f64,
}

impl LossFloor {
    pub fn at(&self, n: f64) -> f64 {
        self.base + self.amp * powf(n, -self.exponent)
    }
}

/// Quadratic term of one module group: optimum at `η*·exp(log_ratio)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupTerm {
    pub log_ratio: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub c_eta: f64,
    pub alpha_n: f64,
    pub beta_d: f64,
    pub floor: LossFloor,
    pub a: f64,
    pub gamma: f64,
    pub c_curv: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_terms: Option<BTreeMap<ModuleGroup, GroupTerm>>,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self::reference(0.0, 0)
    }
}

impl SurfaceSpec {
    /// Reference law constants (C_η = 38.4588, α = 0.2219, β = 0.3509), with a loss surface whose runs all
    /// decrease in `D` over the sweep design.
    pub fn reference(noise_sigma: f64, seed: u64) -> Self {
        Self {
            c_eta: 38.4588,
            alpha_n: 0.2219,
            beta_d: 0.3509,
            floor: LossFloor {
                base: 1.7,
                amp: 40.0,
                exponent: 0.2,
            },
            a: 3.5e5,
            gamma: 0.5,
            c_curv: 0.1,
            noise_sigma,
            seed,
            group_terms: None,
        }
    }

    pub fn optimal_lr(&self, n: f64, d: f64) -> f64 {
        self.c_eta * powf(n, -self.alpha_n) * powf(d, -self.beta_d)
    }

    /// Optimum of one group's LR when the surface has group terms.
    pub fn group_optimum(&self, group: ModuleGroup, n: f64, d: f64) -> Option<f64> {
        let t = self.group_terms.as_ref()?.get(&group)?;
        Some(self.optimal_lr(n, d) * crate::math::exp(t.log_ratio))
    }

    fn noise(
        &self,
        n: f64,
        d: f64,
        eta: f64,
        module_lrs: Option<&BTreeMap<ModuleGroup, f64>>,
    ) -> f64 {
        if self.noise_sigma == 0.0 {
            return 0.0;
        }
        let mut h = DigestBuilder::new();
        h.u64(self.seed).f64(n).f64(d).f64(eta);
        if let Some(m) = module_lrs {
            for (g, lr) in m {
                h.bytes(g.key().as_bytes()).f64(*lr);
            }
        }
        let hex = h.finish_hex(16);
        let seed = u64::from_str_radix(&hex, 16).expect("hex digest");
        let z: f64 = StandardNormal.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        self.noise_sigma * z
    }
}

/// Loss of one configuration. Noise is a deterministic function of the
/// spec's seed and the inputs.
pub fn sample_loss(
    spec: &SurfaceSpec,
    n: f64,
    d: f64,
    eta: f64,
    module_lrs: Option<&BTreeMap<ModuleGroup, f64>>,
) -> f64 {
    let ln_opt = ln(spec.optimal_lr(n, d));
    let quad = match &spec.group_terms {
        Some(terms) => terms
            .iter()
            .map(|(g, t)| {
                let lr = module_lrs.and_then(|m| m.get(g).copied()).unwrap_or(eta);
                let dx = ln(lr) - ln_opt - t.log_ratio;
                t.curvature * dx * dx
            })
            .sum(),
        None => {
            let dx = ln(eta) - ln_opt;
            spec.c_curv * dx * dx
        }
    };
    spec.floor.at(n) + spec.a * powf(d, -spec.gamma) + quad + spec.noise(n, d, eta, module_lrs)
}

/// Placeholder shape for a bare parameter count.
pub fn synthetic_shape(n: u64) -> ModelShape {
    ModelShape::new(&format!("oracle-{n}"), n, n, 256, 4, 4, 4, 512, false)
}

/// One run per `(shape, lr)` with a sample at every `D` in `d_grid`.
pub fn gen_runs(
    spec: &SurfaceSpec,
    shapes: &[ModelShape],
    d_grid: &[u64],
    lr_grid: &[f64],
) -> Vec<RunRecord> {
    let mut runs = Vec::with_capacity(shapes.len() * lr_grid.len());
    for shape in shapes {
        let n = shape.total_params as f64;
        for &lr in lr_grid {
            let samples = d_grid
                .iter()
                .map(|&d| LossSample {
                    tokens: d,
                    loss: sample_loss(spec, n, d as f64, lr, None),
                })
                .collect();
            let mut other = serde_json::Map::new();
            other.insert(String::from("source"), serde_json::Value::from("oracle"));
            other.insert(
                String::from("oracle_seed"),
                serde_json::Value::from(spec.seed),
            );
            runs.push(RunRecord {
                run_id: format!("{}-lr{:e}", shape.name, lr),
                model: shape.clone(),
                lr_global: lr,
                module_lrs: None,
                schedule: WsdSchedule::stable_only(1000, lr),
                batch_tokens: 4_000_000,
                samples,
                other_hparams: other,
            });
        }
    }
    runs
}

/// The small-model sweep: four model sizes, seven learning rates, and loss
/// read every 10B tokens from 80B to 220B.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepDesign {
    pub shapes: Vec<ModelShape>,
    pub lr_grid: Vec<f64>,
    pub d_grid: Vec<u64>,
}

pub const REFERENCE_LR_GRID: [f64; 7] = [8e-5, 1e-4, 3e-4, 5e-4, 8e-4, 1.5e-3, 2e-3];

pub fn reference_training_shapes() -> Vec<ModelShape> {
    alloc::vec![
        ModelShape::new(
            "qwen3-moe-0.5b-a0.1b",
            550_000_000,
            100_000_000,
            256,
            3,
            32,
            4,
            768,
            true
        ),
        ModelShape::new(
            "qwen3-moe-1b-a0.2b",
            1_000_000_000,
            190_000_000,
            384,
            9,
            32,
            4,
            768,
            true
        ),
        ModelShape::new(
            "qwen3-moe-2b-a0.3b",
            2_000_000_000,
            280_000_000,
            512,
            12,
            32,
            4,
            768,
            true
        ),
        ModelShape::new(
            "qwen3-moe-3b-a0.4b",
            3_000_000_000,
            400_000_000,
            640,
            15,
            32,
            4,
            768,
            true
        ),
    ]
}

impl SweepDesign {
    pub fn reference() -> Self {
        Self {
            shapes: reference_training_shapes(),
            lr_grid: REFERENCE_LR_GRID.to_vec(),
            d_grid: (0..15)
                .map(|k| 80_000_000_000 + k * 10_000_000_000)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::rel_err;

    #[test]
    fn vertex_is_noise_free_floor_plus_data_term() {
        let s = SurfaceSpec::reference(0.0, 1);
        let (n, d) = (1e9, 1e11);
        let eta = s.optimal_lr(n, d);
        let want = s.floor.at(n) + s.a * powf(d, -s.gamma);
        assert!(rel_err(sample_loss(&s, n, d, eta, None), want) < 1e-15);
    }

    #[test]
    fn symmetric_in_log_lr() {
        let s = SurfaceSpec::reference(0.0, 1);
        let eta = s.optimal_lr(2e9, 1.5e11);
        let up = sample_loss(&s, 2e9, 1.5e11, eta * 3.0, None);
        let down = sample_loss(&s, 2e9, 1.5e11, eta / 3.0, None);
        assert!((up - down).abs() < 1e-12);
    }

    #[test]
    fn optimum_ratio_follows_size_exponent() {
        let s = SurfaceSpec::reference(0.0, 1);
        let r = s.optimal_lr(0.55e9, 1e11) / s.optimal_lr(4e9, 1e11);
        assert!(rel_err(r, powf(0.55 / 4.0, -0.2219)) < 1e-12);
    }

    #[test]
    fn noise_is_reproducible_and_seed_dependent() {
        let a = SurfaceSpec::reference(1e-3, 7);
        let b = SurfaceSpec::reference(1e-3, 8);
        let x = sample_loss(&a, 1e9, 1e11, 3e-4, None);
        assert_eq!(x, sample_loss(&a, 1e9, 1e11, 3e-4, None));
        assert_ne!(x, sample_loss(&b, 1e9, 1e11, 3e-4, None));
        let clean = sample_loss(&SurfaceSpec::reference(0.0, 7), 1e9, 1e11, 3e-4, None);
        assert!((x - clean).abs() < 6e-3);
    }

    #[test]
    fn counting() {
        let s = SurfaceSpec::reference(0.0, 0);
        let runs = gen_runs(&s, &[synthetic_shape(1_000_000_000)], &[1, 2, 3], &[1e-3]);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].samples.len(), 3);
        let design = SweepDesign::reference();
        let runs = gen_runs(&s, &design.shapes, &design.d_grid, &design.lr_grid);
        assert_eq!(runs.len(), 28);
        assert!(runs
            .iter()
            .all(|r| r.samples.len() == 15 && r.validate().is_ok()));
    }

    #[test]
    fn every_sweep_run_decreases_in_tokens() {
        let s = SurfaceSpec::reference(0.0, 0);
        let design = SweepDesign::reference();
        for run in gen_runs(&s, &design.shapes, &design.d_grid, &design.lr_grid) {
            assert!(
                run.samples.windows(2).all(|w| w[1].loss < w[0].loss),
                "{}",
                run.run_id
            );
        }
    }

    #[test]
    fn group_terms_are_separable() {
        let mut s = SurfaceSpec::reference(0.0, 0);
        let terms: BTreeMap<ModuleGroup, GroupTerm> = ModuleGroup::ALL
            .iter()
            .enumerate()
            .map(|(i, g)| {
                (
                    *g,
                    GroupTerm {
                        log_ratio: 0.3 * i as f64 - 0.4,
                        curvature: 0.05,
                    },
                )
            })
            .collect();
        s.group_terms = Some(terms);
        let (n, d) = (1e9, 1.2e11);
        let opt: BTreeMap<ModuleGroup, f64> = ModuleGroup::ALL
            .iter()
            .map(|g| (*g, s.group_optimum(*g, n, d).unwrap()))
            .collect();
        let best = sample_loss(&s, n, d, 1.0, Some(&opt));
        let floor = s.floor.at(n) + s.a * powf(d, -s.gamma);
        assert!((best - floor).abs() < 1e-12);
        let mut moved = opt.clone();
        *moved.get_mut(&ModuleGroup::Router).unwrap() *= 2.0;
        let worse = sample_loss(&s, n, d, 1.0, Some(&moved));
        assert!((worse - best - 0.05 * ln(2.0) * ln(2.0)).abs() < 1e-12);
    }
}
