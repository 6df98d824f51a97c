//! Training-run records: the data every fitter consumes.
//!
//! Token counts are stored raw (not in billions). Validation here covers the
//! type invariants; line-oriented parsing and the on-disk store live in the
//! `lrkit` crate.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::PowerLawFit;
use crate::modsearch::ModuleGroup;
use crate::schedule::WsdSchedule;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("resample range is empty or interval is zero")]
    BadRange,
    #[error("range [{lo}, {hi}] leaves the fit's trusted range [{fit_lo}, {fit_hi}]")]
    OutsideTrustRegion {
        lo: u64,
        hi: u64,
        fit_lo: u64,
        fit_hi: u64,
    },
    #[error("fit is flagged low-trust")]
    LowTrustFit,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> IngestError {
    IngestError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// One validation-loss observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    pub tokens: u64,
    pub loss: f64,
}

// Wire form is a `[tokens, loss]` pair. Token counts written as integral
// floats (`1.2e11`) are accepted.
impl Serialize for LossSample {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(2)?;
        t.serialize_element(&self.tokens)?;
        t.serialize_element(&self.loss)?;
        t.end()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TokenCount {
    Int(u64),
    Float(f64),
}

impl<'de> Deserialize<'de> for LossSample {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = LossSample;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a [tokens, loss] pair")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<LossSample, A::Error> {
                let tokens: TokenCount = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let loss: f64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                let tokens = match tokens {
                    TokenCount::Int(t) => t,
                    TokenCount::Float(f)
                        if f >= 0.0 && crate::math::is_integral(f) && f < 1.8e19 =>
                    {
                        f as u64
                    }
                    TokenCount::Float(f) => {
                        return Err(de::Error::custom(alloc::format!(
                            "tokens must be a non-negative integer, got {f}"
                        )))
                    }
                };
                Ok(LossSample { tokens, loss })
            }
        }
        d.deserialize_tuple(2, PairVisitor)
    }
}

/// Architecture of one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub name: String,
    pub total_params: u64,
    pub active_params: u64,
    pub hidden_size: u64,
    pub num_layers: u64,
    pub attn_heads: u64,
    pub kv_heads: u64,
    pub intermediate_size: u64,
    pub moe: bool,
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), IngestError> {
        let dims = [
            ("model.total_params", self.total_params),
            ("model.active_params", self.active_params),
            ("model.hidden_size", self.hidden_size),
            ("model.num_layers", self.num_layers),
            ("model.attn_heads", self.attn_heads),
            ("model.kv_heads", self.kv_heads),
            ("model.intermediate_size", self.intermediate_size),
        ];
        for (field, v) in dims {
            if v < 1 {
                return Err(invalid(field, "must be >= 1"));
            }
        }
        if self.active_params > self.total_params {
            return Err(invalid("model.active_params", "exceeds total_params"));
        }
        if self.attn_heads % self.kv_heads != 0 {
            return Err(invalid("model.kv_heads", "must divide attn_heads"));
        }
        Ok(())
    }

    /// Convenience constructor for the shape tables used in tests and docs.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        total_params: u64,
        active_params: u64,
        hidden_size: u64,
        num_layers: u64,
        attn_heads: u64,
        kv_heads: u64,
        intermediate_size: u64,
        moe: bool,
    ) -> Self {
        Self {
            name: name.to_string(),
            total_params,
            active_params,
            hidden_size,
            num_layers,
            attn_heads,
            kv_heads,
            intermediate_size,
            moe,
        }
    }
}

/// One training run: model, learning rates, schedule and loss curve.
///
/// Fields the format does not name are kept in `other_hparams` and written
/// back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub model: ModelShape,
    pub lr_global: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_lrs: Option<BTreeMap<ModuleGroup, f64>>,
    pub schedule: WsdSchedule,
    pub batch_tokens: u64,
    pub samples: Vec<LossSample>,
    #[serde(flatten)]
    pub other_hparams: serde_json::Map<String, serde_json::Value>,
}

impl RunRecord {
    /// Checks every type invariant, naming the first offending field.
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.run_id.is_empty() {
            return Err(invalid("run_id", "must be non-empty"));
        }
        self.model.validate()?;
        if !(self.lr_global > 0.0 && self.lr_global.is_finite()) {
            return Err(invalid("lr_global", "must be finite and > 0"));
        }
        if let Some(m) = &self.module_lrs {
            for (group, lr) in m {
                if !(*lr > 0.0 && lr.is_finite()) {
                    return Err(invalid(
                        alloc::format!("module_lrs.{}", group.key()),
                        "must be finite and > 0",
                    ));
                }
            }
        }
        self.schedule
            .validate()
            .map_err(|e| invalid("schedule", e.to_string()))?;
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.loss.is_finite() && s.loss > 0.0) {
                return Err(invalid(
                    alloc::format!("samples[{i}].loss"),
                    "loss must be finite and > 0",
                ));
            }
            if i > 0 && s.tokens <= self.samples[i - 1].tokens {
                return Err(invalid(
                    alloc::format!("samples[{i}].tokens"),
                    "tokens must be strictly increasing",
                ));
            }
        }
        Ok(())
    }

    /// LR applied to `group`: the per-module override if present, else global.
    pub fn lr_for(&self, group: ModuleGroup) -> f64 {
        self.module_lrs
            .as_ref()
            .and_then(|m| m.get(&group).copied())
            .unwrap_or(self.lr_global)
    }
}

/// Evaluates a fitted `L(D)` curve on a regular token grid.
///
/// Returns samples at `lo, lo + interval, …` up to and including `hi` when it
/// lands on the grid. With `strict`, the range must sit inside the fit's own
/// range and the fit must not be low-trust.
pub fn resample_curve(
    fit: &PowerLawFit,
    interval: u64,
    lo: u64,
    hi: u64,
    strict: bool,
) -> Result<Vec<LossSample>, IngestError> {
    if interval == 0 || lo >= hi || lo == 0 {
        return Err(IngestError::BadRange);
    }
    if strict {
        if fit.low_trust() {
            return Err(IngestError::LowTrustFit);
        }
        if lo < fit.fit_range[0] || hi > fit.fit_range[1] {
            return Err(IngestError::OutsideTrustRegion {
                lo,
                hi,
                fit_lo: fit.fit_range[0],
                fit_hi: fit.fit_range[1],
            });
        }
    }
    let count = (hi - lo) / interval + 1;
    Ok((0..count)
        .map(|k| {
            let tokens = lo + k * interval;
            LossSample {
                tokens,
                loss: fit.predict(tokens as f64),
            }
        })
        .collect())
}
