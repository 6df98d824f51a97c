use std::collections::BTreeMap;

use lrkit_core::modsearch::{init_plan, uniform_grids, ModuleGroup};
use lrkit_core::oracle::{sample_loss, synthetic_shape, GroupTerm, SurfaceSpec};

fn separable_spec() -> SurfaceSpec {
    let terms = [
        (ModuleGroup::Embedding, 0.9),
        (ModuleGroup::Hidden, -0.2),
        (ModuleGroup::Router, 0.5),
        (ModuleGroup::LmHead, -0.7),
    ]
    .into_iter()
    .map(|(g, r)| {
        (
            g,
            GroupTerm {
                log_ratio: r,
                curvature: 0.05,
            },
        )
    })
    .collect::<BTreeMap<_, _>>();
    SurfaceSpec {
        group_terms: Some(terms),
        ..SurfaceSpec::reference(0.0, 0)
    }
}

#[test]
fn greedy_search_finds_planted_group_optima() {
    let spec = separable_spec();
    let (n, d) = (4e9, 1.2e11);
    let shape = synthetic_shape(n as u64);
    let eta = spec.optimal_lr(n, d);
    let step = 0.25f64;
    let grid: Vec<f64> = (-8..=8).map(|k| eta * (step * k as f64).exp()).collect();
    let mut plan = init_plan(shape, eta, uniform_grids(&grid), d as u64).unwrap();
    while !plan.is_complete() {
        let configs = plan.next_stage_configs().unwrap();
        let active = configs[0].group;
        for c in &configs {
            for (g, lr) in &c.module_lrs {
                if *g != active {
                    assert_eq!(lr.to_bits(), configs[0].module_lrs[g].to_bits());
                }
            }
        }
        let points: Vec<(f64, f64)> = configs
            .iter()
            .map(|c| (c.lr, sample_loss(&spec, n, d, eta, Some(&c.module_lrs))))
            .collect();
        plan.record_stage(&points).unwrap();
    }
    for g in ModuleGroup::ALL {
        let got = plan.optimum(g).unwrap();
        let want = spec.group_optimum(g, n, d).unwrap();
        assert!((got / want).ln().abs() <= step, "{g:?}: {got} vs {want}");
    }
}
