//! Training loop and trace.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWState};
use super::coord::{Activations, CoordStats, Probe};
use super::net::{params_digest, Net, TensorKind};
use super::task::MarkovTask;
use super::MicroError;
use crate::math::sqrt;
use crate::schedule::WsdSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: u64,
    /// `peak_lr` multiplies every group's LR; 1.0 keeps the config's values.
    pub schedule: WsdSchedule,
    pub adamw: AdamW,
    /// Steps (0 = before the first update) at which to record diagnostics.
    pub checkpoints: Vec<u64>,
    #[serde(default)]
    pub keep_snapshots: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<Probe>,
}

impl TrainOptions {
    pub fn new(steps: u64, warmup_steps: u64) -> Self {
        Self {
            steps,
            schedule: WsdSchedule::stable_only(warmup_steps, 1.0),
            adamw: AdamW::default(),
            checkpoints: alloc::vec![steps],
            keep_snapshots: false,
            probe: None,
        }
    }

    pub fn with_checkpoints(mut self, mut steps: Vec<u64>) -> Self {
        steps.sort_unstable();
        steps.dedup();
        self.checkpoints = steps;
        self
    }

    pub fn with_probe(mut self, probe: Probe) -> Self {
        self.probe = Some(probe);
        self
    }

    fn stable_steps(&self) -> u64 {
        self.steps
            .saturating_sub(self.schedule.warmup_steps + self.schedule.decay_steps)
    }

    /// LR multiplier of the update taking the model from `step` to `step + 1`.
    pub fn lr_scale(&self, step: u64) -> f64 {
        self.schedule.lr(step + 1, self.stable_steps())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRms {
    pub name: String,
    pub kind: TensorKind,
    pub layer: Option<usize>,
    #[serde(with = "crate::serde_float::scalar")]
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    /// Update-direction RMS of the step that produced this checkpoint.
    pub update_rms: Vec<TensorRms>,
    /// Same, aggregated over every tensor of each block.
    #[serde(with = "crate::serde_float::seq")]
    pub layer_rms: Vec<f64>,
    pub param_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coord: Option<CoordStats>,
    #[serde(skip)]
    pub snapshot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    #[serde(with = "crate::serde_float::seq")]
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub diverged: bool,
    pub final_digest: String,
}

impl TrainTrace {
    pub fn checkpoint(&self, step: u64) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }
}

fn layer_rms(net: &Net, rms: &[f64]) -> Vec<f64> {
    let mut acc = alloc::vec![(0.0, 0usize); net.config.depth];
    for (t, r) in net.tensors().iter().zip(rms) {
        if let Some(l) = t.layer {
            acc[l].0 += r * r * t.len() as f64;
            acc[l].1 += t.len();
        }
    }
    acc.into_iter()
        .map(|(s, n)| if n == 0 { 0.0 } else { sqrt(s / n as f64) })
        .collect()
}

/// Trains `net` in place on batches drawn from `task`.
///
/// A non-finite loss stops training; the trace keeps that loss and sets
/// `diverged`.
pub fn train(
    net: &mut Net,
    task: &MarkovTask,
    opts: &TrainOptions,
) -> Result<TrainTrace, MicroError> {
    if opts.steps == 0 {
        return Err(MicroError::NoSteps);
    }
    if task.vocab != net.config.vocab {
        return Err(MicroError::ShapeMismatch(alloc::format!(
            "task vocab {} vs net vocab {}",
            task.vocab,
            net.config.vocab
        )));
    }
    opts.schedule
        .validate()
        .map_err(|e| MicroError::Config(alloc::format!("{e}")))?;
    let chain = task.chain();
    let baseline = match &opts.probe {
        Some(p) => Some(Activations::collect(net, p)?),
        None => None,
    };
    let mut checkpoints = Vec::new();
    let record = |net: &Net, step: u64, rms: &[f64]| -> Result<Checkpoint, MicroError> {
        let coord = match (&opts.probe, &baseline) {
            (Some(p), Some(base)) => {
                Some(Activations::collect(net, p)?.stats_against(base, step, p)?)
            }
            _ => None,
        };
        Ok(Checkpoint {
            step,
            update_rms: net
                .tensors()
                .iter()
                .zip(rms)
                .map(|(t, r)| TensorRms {
                    name: t.name.clone(),
                    kind: t.kind,
                    layer: t.layer,
                    rms: *r,
                })
                .collect(),
            layer_rms: if rms.is_empty() {
                Vec::new()
            } else {
                layer_rms(net, rms)
            },
            param_digest: net.digest(),
            coord,
            snapshot: opts.keep_snapshots.then(|| net.params.clone()),
        })
    };
    if opts.checkpoints.contains(&0) {
        checkpoints.push(record(net, 0, &[])?);
    }
    let mut state = AdamWState::new(net.num_params());
    let mut losses = Vec::with_capacity(opts.steps as usize);
    let mut diverged = false;
    for step in 0..opts.steps {
        let batch = task.batch_at(&chain, step);
        let (loss, grad) = net.loss_and_grad(&batch)?;
        losses.push(loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        let tensors = net.tensors().to_vec();
        let rms = opts.adamw.step(
            &net.config,
            &tensors,
            &mut net.params,
            &grad,
            &mut state,
            opts.lr_scale(step),
        );
        if opts.checkpoints.contains(&(step + 1)) {
            checkpoints.push(record(net, step + 1, &rms)?);
        }
    }
    Ok(TrainTrace {
        losses,
        checkpoints,
        diverged,
        final_digest: params_digest(&net.params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro::NetConfig;

    fn small() -> (NetConfig, MarkovTask) {
        (
            NetConfig::uniform(16, 2, 2, 32, 1e-2, 3),
            MarkovTask {
                vocab: 32,
                seq_len: 8,
                batch: 4,
                ..Default::default()
            },
        )
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (cfg, task) = small();
        let mut net = Net::build(&cfg).unwrap();
        let before = net.params.clone();
        let mut opts = TrainOptions::new(5, 0);
        opts.schedule.peak_lr = 0.0;
        let trace = train(&mut net, &task, &opts).unwrap();
        assert_eq!(net.params, before);
        assert_eq!(trace.losses.len(), 5);
        // Every step sees a fresh batch, so compare each loss with a replay.
        let chain = task.chain();
        for (s, l) in trace.losses.iter().enumerate() {
            assert_eq!(
                *l,
                net.forward(&task.batch_at(&chain, s as u64)).unwrap().loss
            );
        }
    }

    #[test]
    fn deterministic_traces() {
        let (cfg, task) = small();
        let opts = TrainOptions::new(20, 5).with_checkpoints(alloc::vec![0, 10, 20]);
        let a = train(&mut Net::build(&cfg).unwrap(), &task, &opts).unwrap();
        let b = train(&mut Net::build(&cfg).unwrap(), &task, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(
            a.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
            [0, 10, 20]
        );
    }

    #[test]
    fn loss_decreases() {
        let (cfg, task) = small();
        let mut net = Net::build(&cfg).unwrap();
        let trace = train(&mut net, &task, &TrainOptions::new(150, 10)).unwrap();
        let head: f64 = trace.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace.losses[140..].iter().sum::<f64>() / 10.0;
        assert!(tail < head - 0.3, "{head} -> {tail}");
    }

    #[test]
    fn divergence_is_flagged() {
        let (mut cfg, task) = small();
        for hp in cfg.groups.values_mut() {
            hp.lr = 1e300;
        }
        let trace = train(
            &mut Net::build(&cfg).unwrap(),
            &task,
            &TrainOptions::new(50, 0),
        )
        .unwrap();
        assert!(trace.diverged);
        assert!(trace.losses.len() < 50);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, task) = small();
        let mut net = Net::build(&cfg).unwrap();
        assert_eq!(
            train(&mut net, &task, &TrainOptions::new(0, 0)),
            Err(MicroError::NoSteps)
        );
        let wrong = MarkovTask { vocab: 16, ..task };
        assert!(matches!(
            train(&mut net, &wrong, &TrainOptions::new(1, 0)),
            Err(MicroError::ShapeMismatch(_))
        ));
    }
}
