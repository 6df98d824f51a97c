use lrkit_core::mutransfer::{compose_plans, make_transfer_plan, TransferGroup, Variant};
use lrkit_core::ModelShape;
use proptest::prelude::*;

fn shape(hidden: u64, layers: u64) -> ModelShape {
    ModelShape::new(
        &format!("m{hidden}x{layers}"),
        hidden * hidden * layers * 12,
        hidden * hidden * layers * 12,
        hidden,
        layers,
        8,
        8,
        4 * hidden,
        false,
    )
}

fn rel(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

#[test]
fn hand_derived_multipliers() {
    let plan = make_transfer_plan(
        &shape(640, 18),
        &shape(1280, 30),
        200_000_000_000,
        500_000_000_000,
        1.0,
        Variant::CompleteP,
    )
    .unwrap();
    let h = plan.group(TransferGroup::HiddenWeights);
    let u = plan.group(TransferGroup::UnembWeights);
    let want = [
        (h.lr.value, 0.316227766016838),
        (h.init_var.value, 0.5),
        (u.init_var.value, 0.25),
        (plan.residual_mult.value, 0.6),
        (h.eps.as_ref().unwrap().value, 0.474341649025257),
        (h.wd.value, 1.264911064067352),
    ];
    for (got, w) in want {
        assert!(rel(got, w) < 1e-12, "{got} vs {w}");
    }
}

fn dims() -> impl Strategy<Value = (u64, u64, u64)> {
    (1u64..=64, 1u64..=48, 1u64..=500).prop_map(|(h, l, t)| (h * 64, l, t * 1_000_000_000))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn self_transfer_is_identity((h, l, t) in dims(), mup in any::<bool>()) {
        let variant = if mup { Variant::MuP } else { Variant::CompleteP };
        let plan = make_transfer_plan(&shape(h, l), &shape(h, l), t, t, 1.0, variant).unwrap();
        for m in plan.groups.values() {
            prop_assert_eq!(m.lr.value, 1.0);
            prop_assert_eq!(m.init_var.value, 1.0);
            prop_assert_eq!(m.wd.value, 1.0);
            if let Some(e) = &m.eps {
                prop_assert_eq!(e.value, 1.0);
            }
        }
        prop_assert_eq!(plan.residual_mult.value, 1.0);
    }

    #[test]
    fn composition_matches_direct_plan(a in dims(), b in dims(), c in dims()) {
        let (sa, sb, sc) = (shape(a.0, a.1), shape(b.0, b.1), shape(c.0, c.1));
        let ab = make_transfer_plan(&sa, &sb, a.2, b.2, 1.0, Variant::CompleteP).unwrap();
        let bc = make_transfer_plan(&sb, &sc, b.2, c.2, 1.0, Variant::CompleteP).unwrap();
        let ac = make_transfer_plan(&sa, &sc, a.2, c.2, 1.0, Variant::CompleteP).unwrap();
        let composed = compose_plans(&ab, &bc).unwrap();
        prop_assert_eq!(composed.ratios, ac.ratios);
        for (g, m) in &ac.groups {
            let k = &composed.groups[g];
            prop_assert_eq!(k.init_var.exact, m.init_var.exact);
            prop_assert_eq!(k.init_var.value.to_bits(), m.init_var.value.to_bits());
            prop_assert_eq!(k.lr.value.to_bits(), m.lr.value.to_bits());
            prop_assert_eq!(k.wd.value.to_bits(), m.wd.value.to_bits());
        }
    }
}
