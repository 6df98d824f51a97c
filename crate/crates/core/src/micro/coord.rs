//! Coordinate checks: spread of activation drift `x_t − x_0` across widths
//! and training steps.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::net::Net;
use super::task::{Batch, MarkovTask};
use super::train::{train, TrainOptions};
use super::{MicroError, NetConfig, Parametrization};
use crate::stats::{spearman, std_dev};

/// Fixed batch on which activations are compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub batch: Batch,
    /// Measure attention scores from the raw projections, skipping QK-Norm.
    pub ablate_qk_norm: bool,
}

impl Probe {
    pub fn new(task: &MarkovTask, sequences: usize, ablate_qk_norm: bool) -> Self {
        Self {
            batch: task.probe(&task.chain(), sequences),
            ablate_qk_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordStats {
    pub step: u64,
    #[serde(with = "crate::serde_float::scalar")]
    pub std_embed: f64,
    #[serde(with = "crate::serde_float::scalar")]
    pub std_attn_logits: f64,
    #[serde(with = "crate::serde_float::scalar")]
    pub std_logits: f64,
    pub probe_digest: alloc::string::String,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Activations {
    embed: Vec<f64>,
    attn: Vec<f64>,
    logits: Vec<f64>,
}

fn drift_std(now: &[f64], base: &[f64], site: &str) -> Result<f64, MicroError> {
    if now.len() != base.len() {
        return Err(MicroError::ShapeMismatch(alloc::format!(
            "{site}: {} vs {} coordinates",
            now.len(),
            base.len()
        )));
    }
    let diff: Vec<f64> = now.iter().zip(base).map(|(a, b)| a - b).collect();
    Ok(std_dev(&diff))
}

impl Activations {
    pub(crate) fn collect(net: &Net, probe: &Probe) -> Result<Self, MicroError> {
        let cache = net.forward(&probe.batch)?;
        Ok(Self {
            embed: cache.embeddings().to_vec(),
            attn: cache.attention_logits(&net.config, &probe.batch, probe.ablate_qk_norm),
            logits: cache.logits.clone(),
        })
    }

    pub(crate) fn stats_against(
        &self,
        base: &Self,
        step: u64,
        probe: &Probe,
    ) -> Result<CoordStats, MicroError> {
        Ok(CoordStats {
            step,
            std_embed: drift_std(&self.embed, &base.embed, "embeddings")?,
            std_attn_logits: drift_std(&self.attn, &base.attn, "attention logits")?,
            std_logits: drift_std(&self.logits, &base.logits, "logits")?,
            probe_digest: probe.batch.digest(),
        })
    }
}

/// Drift of `net` relative to `baseline` (the same net at step 0).
pub fn coord_stats(
    net: &Net,
    baseline: &Net,
    probe: &Probe,
    step: u64,
) -> Result<CoordStats, MicroError> {
    if net.config.width != baseline.config.width
        || net.config.depth != baseline.config.depth
        || net.num_params() != baseline.num_params()
    {
        return Err(MicroError::ShapeMismatch(alloc::string::String::from(
            "net and baseline differ in shape",
        )));
    }
    Activations::collect(net, probe)?.stats_against(
        &Activations::collect(baseline, probe)?,
        step,
        probe,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSeries {
    pub width: usize,
    pub config: NetConfig,
    pub stats: Vec<CoordStats>,
    #[serde(with = "crate::serde_float::scalar")]
    pub final_loss: f64,
    pub diverged: bool,
}

/// Cross-width summary at one checkpoint. Correlations are `None` when
/// undefined (fewer than two widths or a constant series).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub step: u64,
    pub rho_embed: Option<f64>,
    pub rho_attn_logits: Option<f64>,
    pub rho_logits: Option<f64>,
    /// Max over min of `std_logits` across widths.
    pub logits_spread: Option<f64>,
    pub attn_spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckReport {
    pub parametrization: Parametrization,
    pub qk_norm: bool,
    pub ablate_qk_norm: bool,
    pub widths: Vec<usize>,
    pub series: Vec<WidthSeries>,
    pub trends: Vec<TrendPoint>,
    /// Some run diverged; its series stops early.
    pub partial: bool,
}

impl CoordCheckReport {
    pub fn final_trend(&self) -> Option<&TrendPoint> {
        self.trends.last()
    }
}

fn spread(xs: &[f64]) -> Option<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo > 0.0 && hi.is_finite()).then(|| hi / lo)
}

/// Trains one width of a sweep; `opts` must carry a probe.
pub fn coord_check_width(
    base: &NetConfig,
    width: usize,
    task: &MarkovTask,
    opts: &TrainOptions,
) -> Result<WidthSeries, MicroError> {
    if opts.probe.is_none() {
        return Err(MicroError::Config(alloc::string::String::from(
            "coordinate check needs a probe batch",
        )));
    }
    let config = base.resized(width, base.depth)?;
    let mut net = Net::build(&config)?;
    let trace = train(&mut net, task, opts)?;
    Ok(WidthSeries {
        width,
        config,
        stats: trace
            .checkpoints
            .into_iter()
            .filter_map(|c| c.coord)
            .collect(),
        final_loss: trace.losses.last().copied().unwrap_or(f64::NAN),
        diverged: trace.diverged,
    })
}

/// Assembles per-width series (sorted by width) into a report.
pub fn summarize(
    base: &NetConfig,
    probe_ablated: bool,
    mut series: Vec<WidthSeries>,
) -> CoordCheckReport {
    series.sort_by_key(|s| s.width);
    let widths: Vec<usize> = series.iter().map(|s| s.width).collect();
    let xs: Vec<f64> = widths.iter().map(|w| *w as f64).collect();
    let common = series.iter().map(|s| s.stats.len()).min().unwrap_or(0);
    let trends = (0..common)
        .map(|k| {
            let col = |f: fn(&CoordStats) -> f64| -> Vec<f64> {
                series.iter().map(|s| f(&s.stats[k])).collect()
            };
            let (e, a, l) = (
                col(|c| c.std_embed),
                col(|c| c.std_attn_logits),
                col(|c| c.std_logits),
            );
            TrendPoint {
                step: series[0].stats[k].step,
                rho_embed: spearman(&xs, &e),
                rho_attn_logits: spearman(&xs, &a),
                rho_logits: spearman(&xs, &l),
                logits_spread: spread(&l),
                attn_spread: spread(&a),
            }
        })
        .collect();
    CoordCheckReport {
        parametrization: base.parametrization,
        qk_norm: base.qk_norm,
        ablate_qk_norm: probe_ablated,
        widths,
        partial: series.iter().any(|s| s.diverged),
        series,
        trends,
    }
}

/// Trains `base` resized to each width on the same task and probe.
pub fn coord_check_sweep(
    base: &NetConfig,
    widths: &[usize],
    task: &MarkovTask,
    opts: &TrainOptions,
) -> Result<CoordCheckReport, MicroError> {
    if widths.is_empty() {
        return Err(MicroError::Config(alloc::string::String::from("no widths")));
    }
    let series = widths
        .iter()
        .map(|w| coord_check_width(base, *w, task, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let ablated = opts.probe.as_ref().is_some_and(|p| p.ablate_qk_norm);
    Ok(summarize(base, ablated, series))
}

/// Drift of one config against step count; step 0 is always included.
pub fn step_stability_probe(
    config: &NetConfig,
    task: &MarkovTask,
    opts: &TrainOptions,
) -> Result<Vec<CoordStats>, MicroError> {
    let mut steps = opts.checkpoints.clone();
    steps.push(0);
    let opts = opts.clone().with_checkpoints(steps);
    let series = coord_check_width(config, config.width, task, &opts)?;
    Ok(series.stats)
}

/// Growth of `std_logits` over a 10× step span, divided by its growth over
/// the sweep's width span. `None` if the step series lacks a checkpoint at
/// a tenth of its last step or any term is zero.
pub fn growth_ratio(step_series: &[CoordStats], sweep: &CoordCheckReport) -> Option<f64> {
    let last = step_series.last()?;
    let early = step_series
        .iter()
        .find(|c| c.step * 10 == last.step && c.step > 0)?;
    let small = sweep.series.first()?.stats.last()?;
    let large = sweep.series.last()?.stats.last()?;
    let (by_steps, by_width) = (
        last.std_logits / early.std_logits,
        large.std_logits / small.std_logits,
    );
    (by_steps.is_finite() && by_width.is_finite() && by_width > 0.0).then(|| by_steps / by_width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (NetConfig, MarkovTask) {
        (
            NetConfig::uniform(16, 1, 2, 32, 1e-2, 1).with_qk_norm(true),
            MarkovTask {
                vocab: 32,
                seq_len: 8,
                batch: 4,
                ..Default::default()
            },
        )
    }

    #[test]
    fn zero_at_start_and_after_null_step() {
        let (cfg, task) = setup();
        let net = Net::build(&cfg).unwrap();
        let probe = Probe::new(&task, 4, false);
        let s = coord_stats(&net, &net, &probe, 0).unwrap();
        assert_eq!(
            (s.std_embed, s.std_attn_logits, s.std_logits),
            (0.0, 0.0, 0.0)
        );
        let mut opts = TrainOptions::new(1, 0)
            .with_probe(probe)
            .with_checkpoints(alloc::vec![0, 1]);
        opts.schedule.peak_lr = 0.0;
        let stats = step_stability_probe(&cfg, &task, &opts).unwrap();
        assert_eq!(stats.len(), 2);
        assert!(stats
            .iter()
            .all(|s| s.std_embed == 0.0 && s.std_attn_logits == 0.0 && s.std_logits == 0.0));
    }

    #[test]
    fn positive_after_training() {
        let (cfg, task) = setup();
        for ablate in [false, true] {
            let opts = TrainOptions::new(5, 0)
                .with_probe(Probe::new(&task, 4, ablate))
                .with_checkpoints(alloc::vec![5]);
            let stats = step_stability_probe(&cfg, &task, &opts).unwrap();
            assert_eq!(stats[0].step, 0);
            let s = &stats[1];
            assert!(
                s.std_embed > 0.0 && s.std_attn_logits > 0.0 && s.std_logits > 0.0,
                "{s:?}"
            );
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (cfg, task) = setup();
        let a = Net::build(&cfg).unwrap();
        let b = Net::build(&NetConfig { width: 32, ..cfg }).unwrap();
        assert!(coord_stats(&a, &b, &Probe::new(&task, 2, false), 1).is_err());
    }

    #[test]
    fn single_width_has_undefined_trend() {
        let (cfg, task) = setup();
        let opts = TrainOptions::new(3, 0)
            .with_probe(Probe::new(&task, 2, false))
            .with_checkpoints(alloc::vec![3]);
        let report = coord_check_sweep(&cfg, &[16], &task, &opts).unwrap();
        let t = report.final_trend().unwrap();
        assert_eq!(t.rho_attn_logits, None);
        assert_eq!(t.logits_spread, Some(1.0));
    }
}
