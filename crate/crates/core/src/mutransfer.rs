//! μP / Complete-P hyperparameter transfer from a proxy model to a target.
//!
//! Every multiplier is a monomial `m_N^a · m_L^b · m_D^c` in the width,
//! depth and token-horizon ratios. Ratios are kept as exact fractions, so
//! composing `A→B` with `B→C` gives exactly the plan `A→C`.
//!
//! Router and expert weights count as hidden weights. Batch size is assumed
//! fixed across the transfer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};

use num_rational::Ratio;
use num_traits::{CheckedMul, One};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ingest::ModelShape;
use crate::math::{powf, sqrt};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransferError {
    #[error("{0} must be > 0")]
    NonPositive(&'static str),
    #[error("plans do not chain: first target {first} differs from second proxy {second}")]
    ShapeMismatch { first: String, second: String },
    #[error("plans use different variants or depth exponents")]
    IncompatiblePlans,
    #[error("{group:?} has no epsilon rule under {variant:?}")]
    NotApplicable {
        group: TransferGroup,
        variant: Variant,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "mup")]
    MuP,
    CompleteP,
}

/// Parameter groups distinguished by the transfer rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferGroup {
    InputEmb,
    HiddenWeights,
    HiddenBiasesNorms,
    QkNorms,
    UnembLn,
    UnembWeights,
}

impl TransferGroup {
    pub const ALL: [TransferGroup; 6] = [
        TransferGroup::InputEmb,
        TransferGroup::HiddenWeights,
        TransferGroup::HiddenBiasesNorms,
        TransferGroup::QkNorms,
        TransferGroup::UnembLn,
        TransferGroup::UnembWeights,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TransferGroup::InputEmb => "input_emb",
            TransferGroup::HiddenWeights => "hidden_weights",
            TransferGroup::HiddenBiasesNorms => "hidden_biases_norms",
            TransferGroup::QkNorms => "qk_norms",
            TransferGroup::UnembLn => "unemb_ln",
            TransferGroup::UnembWeights => "unemb_weights",
        }
    }
}

/// A positive fraction, written as `"num/den"` (or `"num"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactRatio(pub Ratio<u128>);

impl ExactRatio {
    pub fn new(num: u64, den: u64) -> Self {
        Self(Ratio::new(num as u128, den as u128))
    }

    pub fn one() -> Self {
        Self(Ratio::one())
    }

    pub fn to_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    pub fn checked_mul(self, other: Self) -> Option<Self> {
        self.0.checked_mul(&other.0).map(Self)
    }

    /// Integer power, `None` on overflow.
    pub fn checked_powi(self, e: i32) -> Option<Self> {
        let mut acc = Ratio::<u128>::one();
        for _ in 0..e.unsigned_abs() {
            acc = acc.checked_mul(&self.0)?;
        }
        Some(Self(if e < 0 { acc.recip() } else { acc }))
    }
}

impl core::fmt::Display for ExactRatio {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl Serialize for ExactRatio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ExactRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (n, den) = match s.split_once('/') {
            Some((a, b)) => (a.trim().parse::<u128>(), b.trim().parse::<u128>()),
            None => (s.trim().parse::<u128>(), Ok(1)),
        };
        match (n, den) {
            (Ok(n), Ok(den)) if n > 0 && den > 0 => Ok(Self(Ratio::new(n, den))),
            _ => Err(serde::de::Error::custom(format!("invalid ratio `{s}`"))),
        }
    }
}

/// Exponents of `(m_N, m_L, m_D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub n: f64,
    pub l: f64,
    pub d: f64,
}

impl Monomial {
    pub const ONE: Monomial = Monomial {
        n: 0.0,
        l: 0.0,
        d: 0.0,
    };

    const fn new(n: f64, l: f64, d: f64) -> Self {
        Self { n, l, d }
    }
}

/// One multiplier: its monomial, numeric value, and exact fraction when all
/// contributing exponents are integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multiplier {
    pub exponents: Monomial,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactRatio>,
}

fn integral(e: f64) -> Option<i32> {
    (crate::math::is_integral(e) && crate::math::abs(e) <= 64.0).then_some(e as i32)
}

impl Multiplier {
    fn evaluate(exponents: Monomial, ratios: &Ratios) -> Self {
        let value = powf(ratios.m_n.to_f64(), exponents.n)
            * powf(ratios.m_l.to_f64(), exponents.l)
            * powf(ratios.m_d.to_f64(), exponents.d);
        let term = |r: ExactRatio, e: f64| -> Option<ExactRatio> {
            if e == 0.0 || r == ExactRatio::one() {
                Some(ExactRatio::one())
            } else {
                r.checked_powi(integral(e)?)
            }
        };
        let exact = term(ratios.m_n, exponents.n)
            .zip(term(ratios.m_l, exponents.l))
            .and_then(|(a, b)| a.checked_mul(b))
            .zip(term(ratios.m_d, exponents.d))
            .and_then(|(a, b)| a.checked_mul(b));
        Self {
            exponents,
            value,
            exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub m_n: ExactRatio,
    pub m_l: ExactRatio,
    pub m_d: ExactRatio,
}

/// Multipliers of one parameter group. `eps` is `None` where the rule is
/// not applicable (QK norms under μP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMultipliers {
    pub init_var: Multiplier,
    pub lr: Multiplier,
    pub eps: Option<Multiplier>,
    pub wd: Multiplier,
}

/// The dimensions a plan transfers between.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub name: String,
    pub hidden_size: u64,
    pub num_layers: u64,
    pub tokens: u64,
}

impl Endpoint {
    pub fn of(shape: &ModelShape, tokens: u64) -> Self {
        Self {
            name: shape.name.clone(),
            hidden_size: shape.hidden_size,
            num_layers: shape.num_layers,
            tokens,
        }
    }

    fn same_dims(&self, other: &Endpoint) -> bool {
        self.hidden_size == other.hidden_size
            && self.num_layers == other.num_layers
            && self.tokens == other.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub variant: Variant,
    pub alpha_depth: f64,
    pub proxy: Endpoint,
    pub target: Endpoint,
    pub ratios: Ratios,
    pub groups: BTreeMap<TransferGroup, GroupMultipliers>,
    /// Factor on every attention and MLP residual branch.
    pub residual_mult: Multiplier,
}

/// Monomial exponents for one group under `variant`.
fn rules(
    group: TransferGroup,
    variant: Variant,
    alpha: f64,
) -> (Monomial, Monomial, Option<Monomial>, Monomial) {
    use TransferGroup::*;
    let cp = variant == Variant::CompleteP;
    let depth_lr = if cp { alpha - 1.0 } else { 0.0 };
    let depth_eps = if cp { -alpha } else { 0.0 };
    let init = match group {
        HiddenWeights => Monomial::new(-1.0, 0.0, 0.0),
        UnembWeights => Monomial::new(-2.0, 0.0, 0.0),
        InputEmb | HiddenBiasesNorms | QkNorms | UnembLn => Monomial::ONE,
    };
    let lr = match group {
        InputEmb | UnembLn => Monomial::new(0.0, 0.0, -0.5),
        HiddenWeights => Monomial::new(-1.0, depth_lr, -0.5),
        HiddenBiasesNorms | QkNorms => Monomial::new(0.0, depth_lr, -0.5),
        UnembWeights => Monomial::new(-1.0, 0.0, -0.5),
    };
    let eps = match group {
        HiddenWeights | HiddenBiasesNorms => Some(Monomial::new(-1.0, depth_eps, 0.5)),
        QkNorms => cp.then(|| Monomial::new(0.0, -alpha, 0.5)),
        InputEmb => Some(Monomial::new(-1.0, 0.0, 0.5)),
        UnembLn | UnembWeights => Some(Monomial::new(0.0, 0.0, 0.5)),
    };
    let wd = match group {
        HiddenWeights | UnembWeights => Monomial::new(1.0, 0.0, -0.5),
        _ => Monomial::new(0.0, 0.0, -0.5),
    };
    (init, lr, eps, wd)
}

/// `(m_N, m_L, m_D)` = target / proxy for hidden size, layer count and tokens.
pub fn shape_ratios(
    proxy: &ModelShape,
    target: &ModelShape,
    tokens_proxy: u64,
    tokens_target: u64,
) -> Result<Ratios, TransferError> {
    ratios_of(
        &Endpoint::of(proxy, tokens_proxy),
        &Endpoint::of(target, tokens_target),
    )
}

fn ratios_of(proxy: &Endpoint, target: &Endpoint) -> Result<Ratios, TransferError> {
    for (name, v) in [
        ("proxy hidden_size", proxy.hidden_size),
        ("proxy num_layers", proxy.num_layers),
        ("proxy tokens", proxy.tokens),
        ("target hidden_size", target.hidden_size),
        ("target num_layers", target.num_layers),
        ("target tokens", target.tokens),
    ] {
        if v == 0 {
            return Err(TransferError::NonPositive(name));
        }
    }
    Ok(Ratios {
        m_n: ExactRatio::new(target.hidden_size, proxy.hidden_size),
        m_l: ExactRatio::new(target.num_layers, proxy.num_layers),
        m_d: ExactRatio::new(target.tokens, proxy.tokens),
    })
}

/// `m_L^-α`.
pub fn residual_multiplier(m_l: f64, alpha_depth: f64) -> f64 {
    powf(m_l, -alpha_depth)
}

fn build(
    proxy: Endpoint,
    target: Endpoint,
    ratios: Ratios,
    alpha_depth: f64,
    variant: Variant,
) -> TransferPlan {
    let groups = TransferGroup::ALL
        .into_iter()
        .map(|g| {
            let (init, lr, eps, wd) = rules(g, variant, alpha_depth);
            (
                g,
                GroupMultipliers {
                    init_var: Multiplier::evaluate(init, &ratios),
                    lr: Multiplier::evaluate(lr, &ratios),
                    eps: eps.map(|e| Multiplier::evaluate(e, &ratios)),
                    wd: Multiplier::evaluate(wd, &ratios),
                },
            )
        })
        .collect();
    let residual = match variant {
        Variant::CompleteP => Monomial::new(0.0, -alpha_depth, 0.0),
        Variant::MuP => Monomial::ONE,
    };
    TransferPlan {
        variant,
        alpha_depth,
        proxy,
        target,
        residual_mult: Multiplier::evaluate(residual, &ratios),
        ratios,
        groups,
    }
}

pub fn make_transfer_plan(
    proxy: &ModelShape,
    target: &ModelShape,
    tokens_proxy: u64,
    tokens_target: u64,
    alpha_depth: f64,
    variant: Variant,
) -> Result<TransferPlan, TransferError> {
    let (p, t) = (
        Endpoint::of(proxy, tokens_proxy),
        Endpoint::of(target, tokens_target),
    );
    let ratios = ratios_of(&p, &t)?;
    Ok(build(p, t, ratios, alpha_depth, variant))
}

/// Chains `A→B` and `B→C` into `A→C`.
pub fn compose_plans(
    first: &TransferPlan,
    second: &TransferPlan,
) -> Result<TransferPlan, TransferError> {
    if !first.target.same_dims(&second.proxy) {
        return Err(TransferError::ShapeMismatch {
            first: first.target.name.clone(),
            second: second.proxy.name.clone(),
        });
    }
    if first.variant != second.variant
        || first.alpha_depth.to_bits() != second.alpha_depth.to_bits()
    {
        return Err(TransferError::IncompatiblePlans);
    }
    let mul =
        |a: ExactRatio, b: ExactRatio| a.checked_mul(b).ok_or(TransferError::IncompatiblePlans);
    let ratios = Ratios {
        m_n: mul(first.ratios.m_n, second.ratios.m_n)?,
        m_l: mul(first.ratios.m_l, second.ratios.m_l)?,
        m_d: mul(first.ratios.m_d, second.ratios.m_d)?,
    };
    Ok(build(
        first.proxy.clone(),
        second.target.clone(),
        ratios,
        first.alpha_depth,
        first.variant,
    ))
}

/// Base hyperparameters tuned on the proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseHParams {
    pub eta_b: f64,
    pub sigma_b: f64,
    pub eps_b: f64,
    pub lambda_b: f64,
    pub tokens_b: u64,
}

impl BaseHParams {
    pub fn validate(&self) -> Result<(), TransferError> {
        for (name, v) in [
            ("eta_b", self.eta_b),
            ("sigma_b", self.sigma_b),
            ("eps_b", self.eps_b),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TransferError::NonPositive(name));
            }
        }
        if self.tokens_b == 0 {
            return Err(TransferError::NonPositive("tokens_b"));
        }
        Ok(())
    }
}

/// Concrete hyperparameters of one group on the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupHParams {
    pub init_std: f64,
    pub lr: f64,
    pub eps: Option<f64>,
    pub wd: f64,
}

impl TransferPlan {
    pub fn group(&self, g: TransferGroup) -> &GroupMultipliers {
        &self.groups[&g]
    }

    pub fn eps_mult(&self, g: TransferGroup) -> Result<f64, TransferError> {
        self.groups[&g]
            .eps
            .as_ref()
            .map(|m| m.value)
            .ok_or(TransferError::NotApplicable {
                group: g,
                variant: self.variant,
            })
    }

    pub fn apply(
        &self,
        base: &BaseHParams,
    ) -> Result<BTreeMap<TransferGroup, GroupHParams>, TransferError> {
        base.validate()?;
        Ok(self
            .groups
            .iter()
            .map(|(g, m)| {
                (
                    *g,
                    GroupHParams {
                        init_std: base.sigma_b * sqrt(m.init_var.value),
                        lr: base.eta_b * m.lr.value,
                        eps: m.eps.as_ref().map(|e| base.eps_b * e.value),
                        wd: base.lambda_b * m.wd.value,
                    },
                )
            })
            .collect())
    }
}

pub fn apply_plan(
    plan: &TransferPlan,
    base: &BaseHParams,
) -> Result<BTreeMap<TransferGroup, GroupHParams>, TransferError> {
    plan.apply(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::rel_err;

    fn shape(hidden: u64, layers: u64) -> ModelShape {
        ModelShape::new("m", 1, 1, hidden, layers, 32, 4, 768, true)
    }

    fn proxy_to_target_plan() -> TransferPlan {
        make_transfer_plan(
            &shape(640, 18),
            &shape(1280, 30),
            200_000_000_000,
            500_000_000_000,
            1.0,
            Variant::CompleteP,
        )
        .unwrap()
    }

    #[test]
    fn ratios_of_reference_shapes() {
        let r = shape_ratios(
            &shape(640, 18),
            &shape(1280, 30),
            200_000_000_000,
            500_000_000_000,
        )
        .unwrap();
        assert_eq!(r.m_n.to_string(), "2");
        assert_eq!(r.m_l.to_string(), "5/3");
        assert_eq!(r.m_d.to_string(), "5/2");
        let id = shape_ratios(&shape(640, 18), &shape(640, 18), 7, 7).unwrap();
        assert_eq!(
            (id.m_n, id.m_l, id.m_d),
            (ExactRatio::one(), ExactRatio::one(), ExactRatio::one())
        );
    }

    #[test]
    fn residual_values() {
        assert_eq!(residual_multiplier(3.7, 0.0), 1.0);
        assert!((residual_multiplier(5.0 / 3.0, 1.0) - 0.6).abs() < 1e-15);
        assert_eq!(residual_multiplier(1.0, 1.0), 1.0);
    }

    #[test]
    fn hand_derived_multipliers() {
        let p = proxy_to_target_plan();
        let hw = p.group(TransferGroup::HiddenWeights);
        assert!(rel_err(hw.lr.value, 0.316227766016838) < 1e-12);
        assert!(rel_err(hw.init_var.value, 0.5) < 1e-12);
        assert!(rel_err(p.group(TransferGroup::UnembWeights).init_var.value, 0.25) < 1e-12);
        assert!(rel_err(p.residual_mult.value, 0.6) < 1e-12);
        assert!(rel_err(hw.eps.as_ref().unwrap().value, 0.474341649025257) < 1e-12);
        assert!(rel_err(hw.wd.value, 1.264911064067352) < 1e-12);
        assert_eq!(hw.init_var.exact.unwrap().to_string(), "1/2");
        assert_eq!(p.residual_mult.exact.unwrap().to_string(), "3/5");
        assert!(hw.lr.exact.is_none());
    }

    #[test]
    fn mup_has_no_qk_norm_eps() {
        let p =
            make_transfer_plan(&shape(640, 18), &shape(1280, 30), 1, 1, 1.0, Variant::MuP).unwrap();
        assert!(matches!(
            p.eps_mult(TransferGroup::QkNorms),
            Err(TransferError::NotApplicable { .. })
        ));
        assert_eq!(p.residual_mult.value, 1.0);
        let cp = proxy_to_target_plan();
        assert!(cp.eps_mult(TransferGroup::QkNorms).is_ok());
    }

    #[test]
    fn apply_hand_values() {
        let base = BaseHParams {
            eta_b: 5e-4,
            sigma_b: 0.02,
            eps_b: 1e-8,
            lambda_b: 0.1,
            tokens_b: 200_000_000_000,
        };
        let hp = proxy_to_target_plan().apply(&base).unwrap();
        let hidden = hp[&TransferGroup::HiddenWeights];
        assert!(rel_err(hidden.init_std, 0.02 / core::f64::consts::SQRT_2) < 1e-12);
        assert!(rel_err(hidden.lr, 1.58113883e-4) < 1e-8);
        let id = make_transfer_plan(
            &shape(640, 18),
            &shape(640, 18),
            5,
            5,
            1.0,
            Variant::CompleteP,
        )
        .unwrap();
        for (g, h) in id.apply(&base).unwrap() {
            assert_eq!(h.init_std, 0.02, "{g:?}");
            assert_eq!(h.lr, 5e-4);
            assert_eq!(h.eps, Some(1e-8));
            assert_eq!(h.wd, 0.1);
        }
    }

    #[test]
    fn compose_two_width_doublings() {
        let a = shape(256, 4);
        let b = shape(512, 4);
        let c = shape(1024, 4);
        let ab = make_transfer_plan(&a, &b, 10, 10, 1.0, Variant::CompleteP).unwrap();
        let bc = make_transfer_plan(&b, &c, 10, 10, 1.0, Variant::CompleteP).unwrap();
        let ac = compose_plans(&ab, &bc).unwrap();
        assert_eq!(ac.group(TransferGroup::HiddenWeights).init_var.value, 0.25);
        assert!(matches!(
            compose_plans(&bc, &ab),
            Err(TransferError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ratio_serde_round_trip() {
        let r = ExactRatio::new(30, 18);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, "\"5/3\"");
        assert_eq!(serde_json::from_str::<ExactRatio>(&s).unwrap(), r);
        assert!(serde_json::from_str::<ExactRatio>("\"0/3\"").is_err());
    }
}
