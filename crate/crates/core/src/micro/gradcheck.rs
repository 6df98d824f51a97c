//! Central-difference verification of the manual gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Net, Routing, TensorKind};
use super::task::Batch;
use super::MicroError;
use crate::math::abs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub kind: TensorKind,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tensors: Vec<TensorCheck>,
}

/// `(max relative error, max absolute error)` of `grad` against central
/// differences of `f` at `coords`.
pub fn central_difference_check(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    epsilon: f64,
) -> (f64, f64) {
    let mut probe = x.to_vec();
    let (mut rel, mut abs_max) = (0.0f64, 0.0f64);
    for &i in coords {
        probe[i] = x[i] + epsilon;
        let up = f(&probe);
        probe[i] = x[i] - epsilon;
        let down = f(&probe);
        probe[i] = x[i];
        let cd = (up - down) / (2.0 * epsilon);
        let err = abs(grad[i] - cd);
        rel = rel.max(err / (abs(grad[i]) + abs(cd) + f64::MIN_POSITIVE));
        abs_max = abs_max.max(err);
    }
    (rel, abs_max)
}

/// Checks up to `per_tensor` coordinates of every tensor, drawn from those
/// whose gradient is at least 1e-3 of the tensor's largest. Expert choices
/// are frozen at the unperturbed routing.
pub fn grad_check(
    net: &Net,
    batch: &Batch,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, MicroError> {
    if !(epsilon > 0.0) {
        return Err(MicroError::Config(String::from("epsilon must be > 0")));
    }
    let cache = net.forward(batch)?;
    let grad = net.backward(&net.params, batch, &cache);
    let routes = cache.routes.clone();
    let f = |p: &[f64]| {
        net.forward_with(p, batch, Routing::Fixed(&routes))
            .map(|c| c.loss)
            .unwrap_or(f64::NAN)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for t in net.tensors() {
        let range = t.range();
        let top = grad[range.clone()]
            .iter()
            .fold(0.0f64, |m, g| m.max(abs(*g)));
        let mut pool: Vec<usize> = range
            .filter(|&i| top > 0.0 && abs(grad[i]) >= 1e-3 * top)
            .collect();
        let take = per_tensor.min(pool.len());
        for k in 0..take {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
        }
        pool.truncate(take);
        let (rel, abs_err) = central_difference_check(&f, &net.params, &grad, &pool, epsilon);
        tensors.push(TensorCheck {
            name: t.name.clone(),
            kind: t.kind,
            coords: take,
            max_rel_err: rel,
            max_abs_err: abs_err,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        max_rel_err: tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_err)),
        max_abs_err: tensors.iter().fold(0.0, |m, t| m.max(t.max_abs_err)),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro::{MarkovTask, NetConfig};

    #[test]
    fn linear_function_is_exact() {
        let w = [0.5, -2.0, 3.25, 1.0];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (rel, _) =
            central_difference_check(f, &[1.0, 2.0, -1.0, 0.25], &w, &[0, 1, 2, 3], 1e-3);
        assert!(rel < 1e-12, "{rel}");
    }

    fn batch() -> Batch {
        let task = MarkovTask {
            vocab: 32,
            seq_len: 6,
            batch: 2,
            ..Default::default()
        };
        task.batch_at(&task.chain(), 1)
    }

    #[test]
    fn every_tensor_of_a_full_block_passes() {
        for (moe, qk) in [(0, false), (0, true), (2, false), (2, true)] {
            let cfg = NetConfig::uniform(16, 2, 2, 32, 1e-3, 11)
                .with_moe(moe)
                .with_qk_norm(qk);
            let mut net = Net::build(&cfg).unwrap();
            // Move norm gains off 1 so their gradients are generic.
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for t in net.tensors().to_vec() {
                if t.kind.is_norm() {
                    for i in t.range() {
                        net.params[i] += rng.gen_range(-0.3..0.3);
                    }
                }
            }
            let report = grad_check(&net, &batch(), 1e-5, 12, 0).unwrap();
            assert!(report.tensors.iter().all(|t| t.coords > 0), "{report:?}");
            assert!(report.max_rel_err < 1e-4, "moe={moe} qk={qk}: {report:?}");
        }
    }

    #[test]
    fn error_shrinks_quadratically_with_epsilon() {
        let cfg = NetConfig::uniform(16, 2, 2, 32, 1e-3, 4).with_qk_norm(true);
        let net = Net::build(&cfg).unwrap();
        let coarse = grad_check(&net, &batch(), 1e-2, 8, 0).unwrap();
        let fine = grad_check(&net, &batch(), 5e-3, 8, 0).unwrap();
        let ratio = coarse.max_abs_err / fine.max_abs_err;
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }
}
