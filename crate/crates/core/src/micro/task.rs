//! Next-token prediction on a seeded first-order Markov chain.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::digest::DigestBuilder;
use crate::math::exp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub batch: usize,
    /// Spread of the transition logits; larger is more predictable.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for MarkovTask {
    fn default() -> Self {
        Self {
            vocab: 64,
            seq_len: 16,
            batch: 4,
            sharpness: 2.0,
            seed: 0,
        }
    }
}

/// Token ids of `batch` sequences; `targets` is `inputs` shifted by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn digest(&self) -> String {
        let mut h = DigestBuilder::new();
        h.u64(self.batch as u64).u64(self.seq_len as u64);
        for t in self.inputs.iter().chain(&self.targets) {
            h.u64(*t as u64);
        }
        h.finish_hex(16)
    }
}

/// Cumulative transition rows of the chain.
#[derive(Debug, Clone)]
pub struct Chain {
    cdf: Vec<f64>,
    vocab: usize,
}

impl Chain {
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        let row = &self.cdf[from * self.vocab..(from + 1) * self.vocab];
        row[to] - if to == 0 { 0.0 } else { row[to - 1] }
    }

    /// Entropy rate under the stationary start; a floor for the loss.
    pub fn conditional_entropy(&self) -> f64 {
        let v = self.vocab;
        let mut h = 0.0;
        for i in 0..v {
            for j in 0..v {
                let p = self.probability(i, j);
                if p > 0.0 {
                    h -= p * crate::math::ln(p);
                }
            }
        }
        h / v as f64
    }

    fn next(&self, from: usize, u: f64) -> usize {
        let row = &self.cdf[from * self.vocab..(from + 1) * self.vocab];
        row.partition_point(|&c| c <= u).min(self.vocab - 1)
    }
}

impl MarkovTask {
    pub fn chain(&self) -> Chain {
        let v = self.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut cdf = Vec::with_capacity(v * v);
        for _ in 0..v {
            let logits: Vec<f64> = (0..v)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    self.sharpness * z
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| exp(l - top)).collect();
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for x in w {
                acc += x / total;
                cdf.push(acc);
            }
        }
        Chain { cdf, vocab: v }
    }

    fn sample(&self, chain: &Chain, stream: u64, batch: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let t = self.seq_len;
        let mut inputs = Vec::with_capacity(batch * t);
        let mut targets = Vec::with_capacity(batch * t);
        for _ in 0..batch {
            let mut tok = rng.gen_range(0..self.vocab);
            for _ in 0..t {
                let next = chain.next(tok, rng.gen::<f64>());
                inputs.push(tok);
                targets.push(next);
                tok = next;
            }
        }
        Batch {
            batch,
            seq_len: t,
            inputs,
            targets,
        }
    }

    /// Training batch for optimizer step `step` (0-based).
    pub fn batch_at(&self, chain: &Chain, step: u64) -> Batch {
        self.sample(chain, step + 1, self.batch)
    }

    /// Held-out batch, identical for every run sharing the task seed.
    pub fn probe(&self, chain: &Chain, sequences: usize) -> Batch {
        self.sample(chain, 0, sequences)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_distributions() {
        let chain = MarkovTask::default().chain();
        for i in 0..64 {
            let s: f64 = (0..64).map(|j| chain.probability(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let h = chain.conditional_entropy();
        assert!(h > 0.0 && h < crate::math::ln(64.0));
    }

    #[test]
    fn batches_are_reproducible_and_shifted() {
        let task = MarkovTask::default();
        let chain = task.chain();
        let a = task.batch_at(&chain, 3);
        assert_eq!(a, task.batch_at(&chain, 3));
        assert_ne!(a, task.batch_at(&chain, 4));
        assert_eq!(a.inputs.len(), 64);
        for s in 0..a.batch {
            for i in 1..a.seq_len {
                assert_eq!(
                    a.inputs[s * a.seq_len + i],
                    a.targets[s * a.seq_len + i - 1]
                );
            }
        }
        assert_ne!(task.probe(&chain, 4), a);
    }
}
