//! AdamW with decoupled, per-group weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::net::Tensor;
use super::NetConfig;
use crate::math::{powf, sqrt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

impl AdamW {
    /// One update, `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`, where `lr` is the
    /// group LR times `lr_scale`. Returns the RMS of the direction
    /// `m̂/(√v̂ + ε)` for each tensor.
    pub fn step(
        &self,
        config: &NetConfig,
        tensors: &[Tensor],
        params: &mut [f64],
        grad: &[f64],
        state: &mut AdamWState,
        lr_scale: f64,
    ) -> Vec<f64> {
        state.step += 1;
        let t = state.step as f64;
        let c1 = 1.0 - powf(self.beta1, t);
        let c2 = 1.0 - powf(self.beta2, t);
        let mut rms = Vec::with_capacity(tensors.len());
        for tensor in tensors {
            let g = tensor.kind.transfer_group();
            let hp = config.group(g);
            let lr = hp.lr * lr_scale;
            let decay = 1.0 - lr * hp.wd;
            let eps = config.eps(g);
            let mut sq = 0.0;
            for i in tensor.range() {
                let gi = grad[i];
                let m = self.beta1 * state.m[i] + (1.0 - self.beta1) * gi;
                let v = self.beta2 * state.v[i] + (1.0 - self.beta2) * gi * gi;
                state.m[i] = m;
                state.v[i] = v;
                let dir = (m / c1) / (sqrt(v / c2) + eps);
                sq += dir * dir;
                params[i] = params[i] * decay - lr * dir;
            }
            rms.push(if tensor.is_empty() {
                0.0
            } else {
                sqrt(sq / tensor.len() as f64)
            });
        }
        rms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro::Net;
    use crate::mutransfer::TransferGroup;

    #[test]
    fn zero_gradient_only_decays() {
        let mut cfg = NetConfig::uniform(8, 1, 2, 8, 1e-2, 0);
        cfg.groups.get_mut(&TransferGroup::UnembWeights).unwrap().wd = 0.5;
        let net = Net::build(&cfg).unwrap();
        let mut params = net.params.clone();
        let mut st = AdamWState::new(params.len());
        let zero = vec![0.0; params.len()];
        let rms = AdamW::default().step(&cfg, net.tensors(), &mut params, &zero, &mut st, 1.0);
        assert!(rms.iter().all(|r| *r == 0.0));
        for t in net.tensors() {
            let wd = cfg.group(t.kind.transfer_group()).wd;
            for i in t.range() {
                assert_eq!(params[i], net.params[i] * (1.0 - 1e-2 * wd));
            }
        }
    }

    #[test]
    fn first_step_direction_is_sign() {
        let cfg = NetConfig::uniform(8, 1, 2, 8, 1e-3, 0);
        let net = Net::build(&cfg).unwrap();
        let mut params = net.params.clone();
        let grad: Vec<f64> = (0..params.len())
            .map(|i| if i % 2 == 0 { 3.0 } else { -0.5 })
            .collect();
        let mut st = AdamWState::new(params.len());
        let rms = AdamW::default().step(&cfg, net.tensors(), &mut params, &grad, &mut st, 1.0);
        assert!(rms.iter().all(|r| (r - 1.0).abs() < 1e-6));
    }
}
