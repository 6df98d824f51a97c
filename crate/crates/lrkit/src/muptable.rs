//! Plain-text rendering of a transfer plan, laid out by rule family.

use std::fmt::Write as _;

use lrkit_core::mutransfer::{Monomial, Multiplier, TransferGroup, TransferPlan, Variant};

fn monomial(m: &Monomial) -> String {
    let mut parts = Vec::new();
    for (sym, e) in [("m_N", m.n), ("m_L", m.l), ("m_D", m.d)] {
        if e != 0.0 {
            parts.push(if e == 1.0 {
                sym.to_string()
            } else {
                format!("{sym}^{e}")
            });
        }
    }
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join(" * ")
    }
}

fn cell(m: &Multiplier) -> String {
    let exact = m.exact.map(|e| format!(" = {e}")).unwrap_or_default();
    format!("{:<26} {:>12.6}{exact}", monomial(&m.exponents), m.value)
}

fn label(g: TransferGroup) -> &'static str {
    match g {
        TransferGroup::InputEmb => "Input Emb.",
        TransferGroup::HiddenWeights => "Hidden weights",
        TransferGroup::HiddenBiasesNorms => "Hidden biases/norms",
        TransferGroup::QkNorms => "QK norms",
        TransferGroup::UnembLn => "Unemb. LN",
        TransferGroup::UnembWeights => "Unemb. weights",
    }
}

pub fn render(plan: &TransferPlan) -> String {
    let mut s = String::new();
    let variant = match plan.variant {
        Variant::MuP => "muP",
        Variant::CompleteP => "Complete-P",
    };
    let _ = writeln!(
        s,
        "{variant} transfer {} (d={}, L={}, D={}) -> {} (d={}, L={}, D={}), alpha={}",
        plan.proxy.name,
        plan.proxy.hidden_size,
        plan.proxy.num_layers,
        plan.proxy.tokens,
        plan.target.name,
        plan.target.hidden_size,
        plan.target.num_layers,
        plan.target.tokens,
        plan.alpha_depth
    );
    let _ = writeln!(
        s,
        "m_N = {}  m_L = {}  m_D = {}",
        plan.ratios.m_n, plan.ratios.m_l, plan.ratios.m_d
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Multipliers");
    let _ = writeln!(s, "  {:<22} {}", "MHA residual", cell(&plan.residual_mult));
    let _ = writeln!(s, "  {:<22} {}", "MLP residual", cell(&plan.residual_mult));
    type Pick = fn(&lrkit_core::mutransfer::GroupMultipliers) -> Option<&Multiplier>;
    let sections: [(&str, Pick); 4] = [
        ("Init variances", |m| Some(&m.init_var)),
        ("Learning rates", |m| Some(&m.lr)),
        ("AdamW eps", |m| m.eps.as_ref()),
        ("Weight decay", |m| Some(&m.wd)),
    ];
    for (title, pick) in sections {
        let _ = writeln!(s, "{title}");
        for g in TransferGroup::ALL {
            let text = pick(plan.group(g)).map(cell).unwrap_or_else(|| "NA".into());
            let _ = writeln!(s, "  {:<22} {text}", label(g));
        }
    }
    s
}
