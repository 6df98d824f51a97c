//! Desk-scale transformer trainer with hand-written gradients.
//!
//! Pre-norm residual blocks (causal attention with optional QK-Norm, then a
//! SiLU MLP or a two-expert top-1 MoE), trained with AdamW on a Markov token
//! stream. Everything is `f64` and seeded, so runs are bitwise reproducible.

mod adamw;
mod coord;
mod gradcheck;
mod mat;
mod net;
mod task;
mod train;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ModelShape;
use crate::mutransfer::{
    make_transfer_plan, GroupHParams, TransferError, TransferGroup, TransferPlan, Variant,
};

pub use adamw::{AdamW, AdamWState};
pub use coord::{
    coord_check_sweep, coord_check_width, coord_stats, growth_ratio, step_stability_probe,
    summarize, CoordCheckReport, CoordStats, Probe, TrendPoint, WidthSeries,
};
pub use gradcheck::{central_difference_check, grad_check, GradCheckReport, TensorCheck};
pub use net::{Cache, Net, Routing, Tensor, TensorKind};
pub use task::{Batch, Chain, MarkovTask};
pub use train::{train, Checkpoint, TensorRms, TrainOptions, TrainTrace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MicroError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing hyperparameters for group {0}")]
    MissingGroup(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("steps must be >= 1")]
    NoSteps,
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    Sp,
    MupComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub vocab: usize,
    /// 0 for a dense MLP, 2 for a top-1 mixture of two experts.
    pub moe_experts: usize,
    pub qk_norm: bool,
    pub parametrization: Parametrization,
    pub residual_mult: f64,
    pub groups: BTreeMap<TransferGroup, GroupHParams>,
    /// AdamW ε for groups whose plan entry has none.
    pub default_eps: f64,
    pub seed: u64,
}

pub const SP_INIT_STD: f64 = 0.02;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-2;

impl NetConfig {
    /// Same init std, LR, ε and decay for every group.
    pub fn uniform(
        width: usize,
        depth: usize,
        heads: usize,
        vocab: usize,
        lr: f64,
        seed: u64,
    ) -> Self {
        let hp = GroupHParams {
            init_std: SP_INIT_STD,
            lr,
            eps: Some(DEFAULT_EPS),
            wd: DEFAULT_WEIGHT_DECAY,
        };
        Self {
            width,
            depth,
            heads,
            vocab,
            moe_experts: 0,
            qk_norm: false,
            parametrization: Parametrization::Sp,
            residual_mult: 1.0,
            groups: TransferGroup::ALL.iter().map(|g| (*g, hp)).collect(),
            default_eps: DEFAULT_EPS,
            seed,
        }
    }

    /// Desk-scale default: a Qwen3-style block with QK-Norm and a
    /// two-expert MoE layer, width 64, depth 2, 4 heads, vocab 64.
    pub fn desk_default(seed: u64) -> Self {
        Self::uniform(64, 2, 4, 64, DEFAULT_LR, seed)
            .with_moe(2)
            .with_qk_norm(true)
    }

    pub fn with_moe(mut self, experts: usize) -> Self {
        self.moe_experts = experts;
        self
    }

    pub fn with_qk_norm(mut self, on: bool) -> Self {
        self.qk_norm = on;
        self
    }

    pub fn with_parametrization(mut self, p: Parametrization) -> Self {
        self.parametrization = p;
        self
    }

    pub fn validate(&self) -> Result<(), MicroError> {
        let bad = |m: String| Err(MicroError::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.depth == 0 {
            return bad(String::from("depth must be >= 1"));
        }
        if self.vocab < 2 {
            return bad(String::from("vocab must be >= 2"));
        }
        if self.moe_experts != 0 && self.moe_experts != 2 {
            return bad(format!(
                "moe_experts must be 0 or 2, got {}",
                self.moe_experts
            ));
        }
        if !(self.residual_mult > 0.0 && self.residual_mult.is_finite()) {
            return bad(String::from("residual_mult must be finite and > 0"));
        }
        if !(self.default_eps > 0.0) {
            return bad(String::from("default_eps must be > 0"));
        }
        for g in TransferGroup::ALL {
            let hp = self
                .groups
                .get(&g)
                .ok_or(MicroError::MissingGroup(g.key()))?;
            if !(hp.init_std > 0.0 && hp.init_std.is_finite()) {
                return bad(format!("{}: init_std must be finite and > 0", g.key()));
            }
            if !(hp.lr >= 0.0 && hp.lr.is_finite()) {
                return bad(format!("{}: lr must be finite and >= 0", g.key()));
            }
            if !(hp.wd >= 0.0 && hp.wd.is_finite()) {
                return bad(format!("{}: wd must be finite and >= 0", g.key()));
            }
            if hp.eps.is_some_and(|e| !(e > 0.0)) {
                return bad(format!("{}: eps must be > 0", g.key()));
            }
        }
        Ok(())
    }

    pub fn group(&self, g: TransferGroup) -> &GroupHParams {
        &self.groups[&g]
    }

    pub fn eps(&self, g: TransferGroup) -> f64 {
        self.groups[&g].eps.unwrap_or(self.default_eps)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.width
    }

    /// Shape record used to derive transfer ratios.
    pub fn shape(&self) -> ModelShape {
        ModelShape::new(
            &format!("micro-w{}-l{}", self.width, self.depth),
            1,
            1,
            self.width as u64,
            self.depth as u64,
            self.heads as u64,
            self.heads as u64,
            self.ff_dim() as u64,
            self.moe_experts > 0,
        )
    }

    /// Applies a transfer plan's multipliers to this config's hyperparameters.
    pub fn transferred(&self, plan: &TransferPlan, width: usize, depth: usize) -> Self {
        let mut out = self.clone();
        out.width = width;
        out.depth = depth;
        out.residual_mult = self.residual_mult * plan.residual_mult.value;
        for (g, hp) in out.groups.iter_mut() {
            let m = plan.group(*g);
            hp.init_std *= crate::math::sqrt(m.init_var.value);
            hp.lr *= m.lr.value;
            hp.wd *= m.wd.value;
            if let (Some(e), Some(me)) = (hp.eps.as_mut(), m.eps.as_ref()) {
                *e *= me.value;
            }
        }
        out
    }

    /// Config at another width/depth. SP keeps every hyperparameter; μP
    /// (Complete-P, α = 1) rescales through a transfer plan at equal tokens.
    pub fn resized(&self, width: usize, depth: usize) -> Result<Self, MicroError> {
        let mut out = match self.parametrization {
            Parametrization::Sp => {
                let mut c = self.clone();
                c.width = width;
                c.depth = depth;
                c
            }
            Parametrization::MupComplete => {
                let mut target = self.clone();
                target.width = width;
                target.depth = depth;
                let plan = make_transfer_plan(
                    &self.shape(),
                    &target.shape(),
                    1,
                    1,
                    1.0,
                    Variant::CompleteP,
                )?;
                self.transferred(&plan, width, depth)
            }
        };
        if self.heads > width || width % self.heads != 0 {
            out.heads = 1;
        }
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = NetConfig::uniform(16, 2, 2, 32, 1e-3, 0);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.width = 15;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.depth = 0;
        assert!(c.validate().is_err());
        assert!(ok.clone().with_moe(3).validate().is_err());
        let mut c = ok.clone();
        c.groups.remove(&TransferGroup::QkNorms);
        assert_eq!(c.validate(), Err(MicroError::MissingGroup("qk_norms")));
        let mut c = ok;
        c.groups.get_mut(&TransferGroup::InputEmb).unwrap().lr = 0.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn mup_resize_follows_width_rules() {
        let base = NetConfig::uniform(32, 2, 4, 64, 1e-2, 0)
            .with_parametrization(Parametrization::MupComplete);
        let big = base.resized(64, 2).unwrap();
        let hw = big.group(TransferGroup::HiddenWeights);
        assert!((hw.init_std - SP_INIT_STD / crate::math::sqrt(2.0)).abs() < 1e-15);
        assert!((hw.lr - 5e-3).abs() < 1e-15);
        assert!((big.group(TransferGroup::UnembWeights).init_std - 0.01).abs() < 1e-15);
        let (e0, e1) = (
            base.group(TransferGroup::InputEmb),
            big.group(TransferGroup::InputEmb),
        );
        assert_eq!((e1.init_std, e1.lr), (e0.init_std, e0.lr));
        assert_eq!(e1.eps, Some(DEFAULT_EPS / 2.0));
        assert_eq!(big.residual_mult, 1.0);
        let sp = NetConfig::uniform(32, 2, 4, 64, 1e-2, 0)
            .resized(64, 2)
            .unwrap();
        assert_eq!(sp.groups, NetConfig::uniform(32, 2, 4, 64, 1e-2, 0).groups);
    }
}
