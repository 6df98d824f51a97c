//! Parameter layout, forward pass and manual backward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mat::{gemm, mm, mm_nt, mm_tn, View};
use super::task::Batch;
use super::{MicroError, NetConfig};
use crate::digest::DigestBuilder;
use crate::math::{exp, ln, sqrt};
use crate::modsearch::ModuleGroup;
use crate::mutransfer::TransferGroup;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Embedding,
    AttnNorm,
    Query,
    Key,
    Value,
    AttnOut,
    QueryNorm,
    KeyNorm,
    MlpNorm,
    MlpUp,
    MlpDown,
    Router,
    FinalNorm,
    Unembed,
}

impl TensorKind {
    pub fn is_norm(self) -> bool {
        matches!(
            self,
            Self::AttnNorm | Self::QueryNorm | Self::KeyNorm | Self::MlpNorm | Self::FinalNorm
        )
    }

    pub fn transfer_group(self) -> TransferGroup {
        match self {
            Self::Embedding => TransferGroup::InputEmb,
            Self::AttnNorm | Self::MlpNorm => TransferGroup::HiddenBiasesNorms,
            Self::QueryNorm | Self::KeyNorm => TransferGroup::QkNorms,
            Self::FinalNorm => TransferGroup::UnembLn,
            Self::Unembed => TransferGroup::UnembWeights,
            _ => TransferGroup::HiddenWeights,
        }
    }

    pub fn module_group(self) -> ModuleGroup {
        match self {
            Self::Embedding => ModuleGroup::Embedding,
            Self::Router => ModuleGroup::Router,
            Self::Unembed => ModuleGroup::LmHead,
            _ => ModuleGroup::Hidden,
        }
    }

    /// Matrices inside the residual blocks.
    pub fn is_hidden_matrix(self) -> bool {
        self.transfer_group() == TransferGroup::HiddenWeights
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub kind: TensorKind,
    pub layer: Option<usize>,
    pub expert: Option<usize>,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
enum Ffn {
    Dense {
        up: usize,
        down: usize,
    },
    Moe {
        router: usize,
        experts: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone)]
struct LayerIdx {
    attn_norm: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    qk_norm: Option<(usize, usize)>,
    mlp_norm: usize,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    tensors: Vec<Tensor>,
    embed: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    unembed: usize,
    total: usize,
}

impl Layout {
    fn new(c: &NetConfig) -> Self {
        let (d, hd, ff, v) = (c.width, c.head_dim(), c.ff_dim(), c.vocab);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind, layer, expert, rows, cols| {
            tensors.push(Tensor {
                name,
                kind,
                layer,
                expert,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
            tensors.len() - 1
        };
        let embed = push(
            String::from("embed"),
            TensorKind::Embedding,
            None,
            None,
            v,
            d,
        );
        let mut layers = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let n = |s: &str| format!("layers.{l}.{s}");
            let attn_norm = push(n("attn_norm"), TensorKind::AttnNorm, Some(l), None, 1, d);
            let q = push(n("wq"), TensorKind::Query, Some(l), None, d, d);
            let k = push(n("wk"), TensorKind::Key, Some(l), None, d, d);
            let vv = push(n("wv"), TensorKind::Value, Some(l), None, d, d);
            let o = push(n("wo"), TensorKind::AttnOut, Some(l), None, d, d);
            let qk_norm = c.qk_norm.then(|| {
                (
                    push(n("q_norm"), TensorKind::QueryNorm, Some(l), None, 1, hd),
                    push(n("k_norm"), TensorKind::KeyNorm, Some(l), None, 1, hd),
                )
            });
            let mlp_norm = push(n("mlp_norm"), TensorKind::MlpNorm, Some(l), None, 1, d);
            let ffn = if c.moe_experts == 0 {
                Ffn::Dense {
                    up: push(n("w_up"), TensorKind::MlpUp, Some(l), None, d, ff),
                    down: push(n("w_down"), TensorKind::MlpDown, Some(l), None, ff, d),
                }
            } else {
                let router = push(
                    n("router"),
                    TensorKind::Router,
                    Some(l),
                    None,
                    d,
                    c.moe_experts,
                );
                let experts = (0..c.moe_experts)
                    .map(|e| {
                        (
                            push(
                                format!("layers.{l}.experts.{e}.w_up"),
                                TensorKind::MlpUp,
                                Some(l),
                                Some(e),
                                d,
                                ff,
                            ),
                            push(
                                format!("layers.{l}.experts.{e}.w_down"),
                                TensorKind::MlpDown,
                                Some(l),
                                Some(e),
                                ff,
                                d,
                            ),
                        )
                    })
                    .collect();
                Ffn::Moe { router, experts }
            };
            layers.push(LayerIdx {
                attn_norm,
                q,
                k,
                v: vv,
                o,
                qk_norm,
                mlp_norm,
                ffn,
            });
        }
        let final_norm = push(
            String::from("final_norm"),
            TensorKind::FinalNorm,
            None,
            None,
            1,
            d,
        );
        let unembed = push(
            String::from("unembed"),
            TensorKind::Unembed,
            None,
            None,
            d,
            v,
        );
        Self {
            tensors,
            embed,
            layers,
            final_norm,
            unembed,
            total: offset,
        }
    }
}

/// Expert choice per layer and row.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    Argmax,
    /// Reuse a previous pass's choices so the loss is smooth in the params.
    Fixed(&'a [Vec<usize>]),
}

#[derive(Debug, Clone)]
struct ExpertCache {
    rows: Vec<usize>,
    input: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
enum FfnCache {
    Dense {
        up: Vec<f64>,
        act: Vec<f64>,
    },
    Moe {
        probs: Vec<f64>,
        experts: Vec<ExpertCache>,
    },
}

#[derive(Debug, Clone)]
struct QkCache {
    q_hat: Vec<f64>,
    q_inv: Vec<f64>,
    k_hat: Vec<f64>,
    k_inv: Vec<f64>,
    q_out: Vec<f64>,
    k_out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x_in: Vec<f64>,
    hat1: Vec<f64>,
    inv1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    qk: Option<QkCache>,
    scores: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    hat2: Vec<f64>,
    inv2: Vec<f64>,
    h2: Vec<f64>,
    ffn: FfnCache,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    rows: usize,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    hat_f: Vec<f64>,
    inv_f: Vec<f64>,
    hf: Vec<f64>,
    pub logits: Vec<f64>,
    probs_out: Vec<f64>,
    pub routes: Vec<Vec<usize>>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub config: NetConfig,
    pub params: Vec<f64>,
    layout_tensors: Vec<Tensor>,
}

fn rms_fwd(x: &[f64], dim: usize, gain: &[f64], out: &mut [f64], hat: &mut [f64], inv: &mut [f64]) {
    for (r, row) in x.chunks_exact(dim).enumerate() {
        let ms = row.iter().map(|a| a * a).sum::<f64>() / dim as f64;
        let s = 1.0 / sqrt(ms + NORM_EPS);
        inv[r] = s;
        for j in 0..dim {
            let h = row[j] * s;
            hat[r * dim + j] = h;
            out[r * dim + j] = h * gain[j];
        }
    }
}

/// Accumulates into `dgain` and `dx`.
fn rms_bwd(
    dy: &[f64],
    hat: &[f64],
    inv: &[f64],
    dim: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dx: &mut [f64],
) {
    for (r, dyr) in dy.chunks_exact(dim).enumerate() {
        let hr = &hat[r * dim..(r + 1) * dim];
        let mut dot = 0.0;
        for j in 0..dim {
            dgain[j] += dyr[j] * hr[j];
            dot += dyr[j] * gain[j] * hr[j];
        }
        dot /= dim as f64;
        for j in 0..dim {
            dx[r * dim + j] += inv[r] * (dyr[j] * gain[j] - hr[j] * dot);
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + exp(-u))
}

fn silu_fwd(up: &[f64]) -> Vec<f64> {
    up.iter().map(|&u| u * sigmoid(u)).collect()
}

fn silu_bwd(up: &[f64], dact: &mut [f64]) {
    for (g, &u) in dact.iter_mut().zip(up) {
        let s = sigmoid(u);
        *g *= s * (1.0 + u * (1.0 - s));
    }
}

/// Row-wise softmax in place.
fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for a in row.iter_mut() {
            *a = exp(*a - top);
            s += *a;
        }
        for a in row.iter_mut() {
            *a /= s;
        }
    }
}

impl Net {
    /// Draws every non-norm tensor from `N(0, std_group)`; norm gains start at 1.
    pub fn build(config: &NetConfig) -> Result<Self, MicroError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            let slot = &mut params[t.range()];
            if t.kind.is_norm() {
                slot.fill(1.0);
            } else {
                let std = config.group(t.kind.transfer_group()).init_std;
                let dist = Normal::new(0.0, std)
                    .map_err(|_| MicroError::Config(format!("bad init std {std}")))?;
                for p in slot {
                    *p = dist.sample(&mut rng);
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            layout_tensors: layout.tensors,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.layout_tensors
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn digest(&self) -> String {
        params_digest(&self.params)
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn forward(&self, batch: &Batch) -> Result<Cache, MicroError> {
        self.forward_with(&self.params, batch, Routing::Argmax)
    }

    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>), MicroError> {
        let cache = self.forward(batch)?;
        let grad = self.backward(&self.params, batch, &cache);
        Ok((cache.loss, grad))
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), MicroError> {
        let n = batch.rows();
        if n == 0 || batch.inputs.len() != n || batch.targets.len() != n {
            return Err(MicroError::ShapeMismatch(String::from(
                "batch token counts",
            )));
        }
        if batch
            .inputs
            .iter()
            .chain(&batch.targets)
            .any(|&t| t >= self.config.vocab)
        {
            return Err(MicroError::ShapeMismatch(format!(
                "token id >= vocab {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Forward pass with explicit parameters (same layout as `self.params`).
    pub fn forward_with(
        &self,
        params: &[f64],
        batch: &Batch,
        routing: Routing<'_>,
    ) -> Result<Cache, MicroError> {
        self.check_batch(batch)?;
        if params.len() != self.params.len() {
            return Err(MicroError::ShapeMismatch(String::from(
                "parameter vector length",
            )));
        }
        let c = &self.config;
        let lay = self.layout();
        let p = |i: usize| &params[lay.tensors[i].range()];
        let (n, d, v, hd, heads, ff) = (
            batch.rows(),
            c.width,
            c.vocab,
            c.head_dim(),
            c.heads,
            c.ff_dim(),
        );
        let (b, t) = (batch.batch, batch.seq_len);
        let r = c.residual_mult;
        let scale = 1.0 / sqrt(hd as f64);

        let emb = p(lay.embed);
        let mut x = vec![0.0; n * d];
        for (i, &tok) in batch.inputs.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(&emb[tok * d..(tok + 1) * d]);
        }
        let mut layers = Vec::with_capacity(c.depth);
        let mut routes = Vec::new();
        for (li, l) in lay.layers.iter().enumerate() {
            let x_in = x.clone();
            let (mut h1, mut hat1, mut inv1) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n]);
            rms_fwd(&x, d, p(l.attn_norm), &mut h1, &mut hat1, &mut inv1);
            let (mut q, mut k, mut vv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
            mm(n, d, d, &h1, p(l.q), 0.0, &mut q);
            mm(n, d, d, &h1, p(l.k), 0.0, &mut k);
            mm(n, d, d, &h1, p(l.v), 0.0, &mut vv);
            let qk = l.qk_norm.map(|(qn, kn)| {
                let rows = n * heads;
                let mut cache = QkCache {
                    q_hat: vec![0.0; n * d],
                    q_inv: vec![0.0; rows],
                    k_hat: vec![0.0; n * d],
                    k_inv: vec![0.0; rows],
                    q_out: vec![0.0; n * d],
                    k_out: vec![0.0; n * d],
                };
                rms_fwd(
                    &q,
                    hd,
                    p(qn),
                    &mut cache.q_out,
                    &mut cache.q_hat,
                    &mut cache.q_inv,
                );
                rms_fwd(
                    &k,
                    hd,
                    p(kn),
                    &mut cache.k_out,
                    &mut cache.k_hat,
                    &mut cache.k_inv,
                );
                cache
            });
            let (qa, ka) = match &qk {
                Some(c) => (&c.q_out, &c.k_out),
                None => (&q, &k),
            };
            let mut scores = vec![0.0; b * heads * t * t];
            let mut probs = vec![0.0; b * heads * t * t];
            let mut o = vec![0.0; n * d];
            for bi in 0..b {
                for h in 0..heads {
                    let off = bi * t * d + h * hd;
                    let blk = (bi * heads + h) * t * t;
                    let s = &mut scores[blk..blk + t * t];
                    gemm(
                        t,
                        hd,
                        t,
                        scale,
                        &qa[off..],
                        View::rows(d),
                        &ka[off..],
                        View::trans(d),
                        0.0,
                        s,
                        View::rows(t),
                    );
                    let pr = &mut probs[blk..blk + t * t];
                    for i in 0..t {
                        let top = s[i * t..=i * t + i]
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for j in 0..=i {
                            let e = exp(s[i * t + j] - top);
                            pr[i * t + j] = e;
                            z += e;
                        }
                        for j in 0..=i {
                            pr[i * t + j] /= z;
                        }
                    }
                    gemm(
                        t,
                        t,
                        hd,
                        1.0,
                        pr,
                        View::rows(t),
                        &vv[off..],
                        View::rows(d),
                        0.0,
                        &mut o[off..],
                        View::rows(d),
                    );
                }
            }
            let mut a = vec![0.0; n * d];
            mm(n, d, d, &o, p(l.o), 0.0, &mut a);
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi += r * ai;
            }

            let (mut h2, mut hat2, mut inv2) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n]);
            rms_fwd(&x, d, p(l.mlp_norm), &mut h2, &mut hat2, &mut inv2);
            let ffn = match &l.ffn {
                Ffn::Dense { up, down } => {
                    let mut u = vec![0.0; n * ff];
                    mm(n, d, ff, &h2, p(*up), 0.0, &mut u);
                    let act = silu_fwd(&u);
                    let mut m = vec![0.0; n * d];
                    mm(n, ff, d, &act, p(*down), 0.0, &mut m);
                    for (xi, mi) in x.iter_mut().zip(&m) {
                        *xi += r * mi;
                    }
                    FfnCache::Dense { up: u, act }
                }
                Ffn::Moe { router, experts } => {
                    let ne = experts.len();
                    let mut probs_r = vec![0.0; n * ne];
                    mm(n, d, ne, &h2, p(*router), 0.0, &mut probs_r);
                    softmax_rows(&mut probs_r, ne);
                    let chosen: Vec<usize> = match routing {
                        Routing::Fixed(fixed) => fixed
                            .get(li)
                            .filter(|f| f.len() == n && f.iter().all(|&e| e < ne))
                            .cloned()
                            .ok_or_else(|| {
                                MicroError::ShapeMismatch(String::from("fixed routing"))
                            })?,
                        Routing::Argmax => (0..n)
                            .map(|i| {
                                let row = &probs_r[i * ne..(i + 1) * ne];
                                (1..ne).fold(0, |best, e| if row[e] > row[best] { e } else { best })
                            })
                            .collect(),
                    };
                    let mut caches = Vec::with_capacity(ne);
                    for (e, (up, down)) in experts.iter().enumerate() {
                        let rows: Vec<usize> = (0..n).filter(|&i| chosen[i] == e).collect();
                        let m = rows.len();
                        let mut input = vec![0.0; m * d];
                        for (ri, &i) in rows.iter().enumerate() {
                            input[ri * d..(ri + 1) * d].copy_from_slice(&h2[i * d..(i + 1) * d]);
                        }
                        let mut u = vec![0.0; m * ff];
                        mm(m, d, ff, &input, p(*up), 0.0, &mut u);
                        let act = silu_fwd(&u);
                        let mut out = vec![0.0; m * d];
                        mm(m, ff, d, &act, p(*down), 0.0, &mut out);
                        for (ri, &i) in rows.iter().enumerate() {
                            let g = probs_r[i * ne + e];
                            for j in 0..d {
                                x[i * d + j] += r * g * out[ri * d + j];
                            }
                        }
                        caches.push(ExpertCache {
                            rows,
                            input,
                            up: u,
                            act,
                            out,
                        });
                    }
                    routes.push(chosen);
                    FfnCache::Moe {
                        probs: probs_r,
                        experts: caches,
                    }
                }
            };
            layers.push(LayerCache {
                x_in,
                hat1,
                inv1,
                h1,
                q,
                k,
                v: vv,
                qk,
                scores,
                probs,
                o,
                hat2,
                inv2,
                h2,
                ffn,
            });
        }

        let (mut hf, mut hat_f, mut inv_f) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n]);
        rms_fwd(&x, d, p(lay.final_norm), &mut hf, &mut hat_f, &mut inv_f);
        let mut logits = vec![0.0; n * v];
        mm(n, d, v, &hf, p(lay.unembed), 0.0, &mut logits);
        let mut probs_out = logits.clone();
        softmax_rows(&mut probs_out, v);
        let loss = batch
            .targets
            .iter()
            .enumerate()
            .map(|(i, &tg)| -ln(probs_out[i * v + tg]))
            .sum::<f64>()
            / n as f64;
        Ok(Cache {
            rows: n,
            layers,
            x_final: x,
            hat_f,
            inv_f,
            hf,
            logits,
            probs_out,
            routes,
            loss,
        })
    }

    /// Gradient of the mean cross-entropy with respect to `params`.
    pub fn backward(&self, params: &[f64], batch: &Batch, cache: &Cache) -> Vec<f64> {
        let c = &self.config;
        let lay = self.layout();
        let tr = |i: usize| lay.tensors[i].range();
        let p = |i: usize| &params[tr(i)];
        let (n, d, v, hd, heads, ff) = (
            cache.rows,
            c.width,
            c.vocab,
            c.head_dim(),
            c.heads,
            c.ff_dim(),
        );
        let (b, t) = (batch.batch, batch.seq_len);
        let r = c.residual_mult;
        let scale = 1.0 / sqrt(hd as f64);
        let mut grad = vec![0.0; params.len()];

        let mut dlogits = cache.probs_out.clone();
        for (i, &tg) in batch.targets.iter().enumerate() {
            dlogits[i * v + tg] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        dlogits.iter_mut().for_each(|g| *g *= inv_n);
        mm_tn(
            d,
            n,
            v,
            &cache.hf,
            &dlogits,
            1.0,
            &mut grad[tr(lay.unembed)],
        );
        let mut dhf = vec![0.0; n * d];
        mm_nt(n, v, d, &dlogits, p(lay.unembed), 0.0, &mut dhf);
        let mut dx = vec![0.0; n * d];
        {
            let mut dg = vec![0.0; d];
            rms_bwd(
                &dhf,
                &cache.hat_f,
                &cache.inv_f,
                d,
                p(lay.final_norm),
                &mut dg,
                &mut dx,
            );
            add(&mut grad[tr(lay.final_norm)], &dg);
        }

        for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward branch: x_out = x_mid + r·ffn(norm(x_mid)).
            let dm: Vec<f64> = dx.iter().map(|g| r * g).collect();
            let mut dh2 = vec![0.0; n * d];
            match (&l.ffn, &lc.ffn) {
                (Ffn::Dense { up, down }, FfnCache::Dense { up: u, act }) => {
                    mm_tn(ff, n, d, act, &dm, 1.0, &mut grad[tr(*down)]);
                    let mut dact = vec![0.0; n * ff];
                    mm_nt(n, d, ff, &dm, p(*down), 0.0, &mut dact);
                    silu_bwd(u, &mut dact);
                    mm_tn(d, n, ff, &lc.h2, &dact, 1.0, &mut grad[tr(*up)]);
                    mm_nt(n, ff, d, &dact, p(*up), 0.0, &mut dh2);
                }
                (Ffn::Moe { router, experts }, FfnCache::Moe { probs, experts: ec }) => {
                    let ne = experts.len();
                    let mut dz = vec![0.0; n * ne];
                    for (e, ((up, down), x)) in experts.iter().zip(ec).enumerate() {
                        let m = x.rows.len();
                        let mut dy = vec![0.0; m * d];
                        for (ri, &i) in x.rows.iter().enumerate() {
                            let g = probs[i * ne + e];
                            let mut dp = 0.0;
                            for j in 0..d {
                                dy[ri * d + j] = g * dm[i * d + j];
                                dp += dm[i * d + j] * x.out[ri * d + j];
                            }
                            for f in 0..ne {
                                let delta = if f == e { 1.0 } else { 0.0 };
                                dz[i * ne + f] += dp * g * (delta - probs[i * ne + f]);
                            }
                        }
                        mm_tn(ff, m, d, &x.act, &dy, 1.0, &mut grad[tr(*down)]);
                        let mut dact = vec![0.0; m * ff];
                        mm_nt(m, d, ff, &dy, p(*down), 0.0, &mut dact);
                        silu_bwd(&x.up, &mut dact);
                        mm_tn(d, m, ff, &x.input, &dact, 1.0, &mut grad[tr(*up)]);
                        let mut din = vec![0.0; m * d];
                        mm_nt(m, ff, d, &dact, p(*up), 0.0, &mut din);
                        for (ri, &i) in x.rows.iter().enumerate() {
                            add(&mut dh2[i * d..(i + 1) * d], &din[ri * d..(ri + 1) * d]);
                        }
                    }
                    mm_tn(d, n, ne, &lc.h2, &dz, 1.0, &mut grad[tr(*router)]);
                    mm_nt(n, ne, d, &dz, p(*router), 1.0, &mut dh2);
                }
                _ => unreachable!("cache built from the same layout"),
            }
            {
                let mut dg = vec![0.0; d];
                rms_bwd(&dh2, &lc.hat2, &lc.inv2, d, p(l.mlp_norm), &mut dg, &mut dx);
                add(&mut grad[tr(l.mlp_norm)], &dg);
            }

            // Attention branch: x_mid = x_in + r·attn(norm(x_in)).
            let da: Vec<f64> = dx.iter().map(|g| r * g).collect();
            mm_tn(d, n, d, &lc.o, &da, 1.0, &mut grad[tr(l.o)]);
            let mut d_o = vec![0.0; n * d];
            mm_nt(n, d, d, &da, p(l.o), 0.0, &mut d_o);
            let (qa, ka) = match &lc.qk {
                Some(c) => (&c.q_out, &c.k_out),
                None => (&lc.q, &lc.k),
            };
            let (mut dqa, mut dka, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
            let mut dp = vec![0.0; t * t];
            for bi in 0..b {
                for h in 0..heads {
                    let off = bi * t * d + h * hd;
                    let blk = (bi * heads + h) * t * t;
                    let pr = &lc.probs[blk..blk + t * t];
                    gemm(
                        t,
                        hd,
                        t,
                        1.0,
                        &d_o[off..],
                        View::rows(d),
                        &lc.v[off..],
                        View::trans(d),
                        0.0,
                        &mut dp,
                        View::rows(t),
                    );
                    gemm(
                        t,
                        t,
                        hd,
                        1.0,
                        pr,
                        View::trans(t),
                        &d_o[off..],
                        View::rows(d),
                        1.0,
                        &mut dv[off..],
                        View::rows(d),
                    );
                    for i in 0..t {
                        let row = i * t;
                        let dot: f64 = (0..=i).map(|j| pr[row + j] * dp[row + j]).sum();
                        for j in 0..t {
                            dp[row + j] = if j <= i {
                                pr[row + j] * (dp[row + j] - dot)
                            } else {
                                0.0
                            };
                        }
                    }
                    gemm(
                        t,
                        t,
                        hd,
                        scale,
                        &dp,
                        View::rows(t),
                        &ka[off..],
                        View::rows(d),
                        1.0,
                        &mut dqa[off..],
                        View::rows(d),
                    );
                    gemm(
                        t,
                        t,
                        hd,
                        scale,
                        &dp,
                        View::trans(t),
                        &qa[off..],
                        View::rows(d),
                        1.0,
                        &mut dka[off..],
                        View::rows(d),
                    );
                }
            }
            let (dq, dk) = match (&lc.qk, l.qk_norm) {
                (Some(qc), Some((qn, kn))) => {
                    let (mut dq, mut dk) = (vec![0.0; n * d], vec![0.0; n * d]);
                    let mut dg = vec![0.0; hd];
                    rms_bwd(&dqa, &qc.q_hat, &qc.q_inv, hd, p(qn), &mut dg, &mut dq);
                    add(&mut grad[tr(qn)], &dg);
                    let mut dg = vec![0.0; hd];
                    rms_bwd(&dka, &qc.k_hat, &qc.k_inv, hd, p(kn), &mut dg, &mut dk);
                    add(&mut grad[tr(kn)], &dg);
                    (dq, dk)
                }
                _ => (dqa, dka),
            };
            mm_tn(d, n, d, &lc.h1, &dq, 1.0, &mut grad[tr(l.q)]);
            mm_tn(d, n, d, &lc.h1, &dk, 1.0, &mut grad[tr(l.k)]);
            mm_tn(d, n, d, &lc.h1, &dv, 1.0, &mut grad[tr(l.v)]);
            let mut dh1 = vec![0.0; n * d];
            mm_nt(n, d, d, &dq, p(l.q), 0.0, &mut dh1);
            mm_nt(n, d, d, &dk, p(l.k), 1.0, &mut dh1);
            mm_nt(n, d, d, &dv, p(l.v), 1.0, &mut dh1);
            let mut dg = vec![0.0; d];
            rms_bwd(
                &dh1,
                &lc.hat1,
                &lc.inv1,
                d,
                p(l.attn_norm),
                &mut dg,
                &mut dx,
            );
            add(&mut grad[tr(l.attn_norm)], &dg);
        }

        let ge = &mut grad[tr(lay.embed)];
        for (i, &tok) in batch.inputs.iter().enumerate() {
            add(&mut ge[tok * d..(tok + 1) * d], &dx[i * d..(i + 1) * d]);
        }
        grad
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn params_digest(params: &[f64]) -> String {
    let mut h = DigestBuilder::new();
    for p in params {
        h.f64(*p);
    }
    h.finish_hex(16)
}

impl Cache {
    /// Word-embedding outputs, `rows × width`.
    pub fn embeddings(&self) -> &[f64] {
        match self.layers.first() {
            Some(l) => &l.x_in,
            None => &self.x_final,
        }
    }

    /// Causal pre-softmax attention scores of every layer and head. With
    /// `bypass_qk_norm`, scores are recomputed from the raw projections.
    pub fn attention_logits(
        &self,
        config: &NetConfig,
        batch: &Batch,
        bypass_qk_norm: bool,
    ) -> Vec<f64> {
        let (d, hd, heads) = (config.width, config.head_dim(), config.heads);
        let (b, t) = (batch.batch, batch.seq_len);
        let scale = 1.0 / sqrt(hd as f64);
        let mut out = Vec::with_capacity(self.layers.len() * b * heads * t * (t + 1) / 2);
        let mut s = vec![0.0; t * t];
        for lc in &self.layers {
            for bi in 0..b {
                for h in 0..heads {
                    let blk = (bi * heads + h) * t * t;
                    let src: &[f64] = if bypass_qk_norm && lc.qk.is_some() {
                        let off = bi * t * d + h * hd;
                        gemm(
                            t,
                            hd,
                            t,
                            scale,
                            &lc.q[off..],
                            View::rows(d),
                            &lc.k[off..],
                            View::trans(d),
                            0.0,
                            &mut s,
                            View::rows(t),
                        );
                        &s
                    } else {
                        &lc.scores[blk..blk + t * t]
                    };
                    for i in 0..t {
                        out.extend_from_slice(&src[i * t..=i * t + i]);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro::task::MarkovTask;
    use crate::micro::Parametrization;

    fn cfg() -> NetConfig {
        NetConfig::uniform(16, 2, 2, 32, 1e-3, 5)
    }

    fn batch() -> Batch {
        let task = MarkovTask {
            vocab: 32,
            seq_len: 6,
            batch: 2,
            ..Default::default()
        };
        task.batch_at(&task.chain(), 0)
    }

    #[test]
    fn build_is_deterministic() {
        let a = Net::build(&cfg()).unwrap();
        let b = Net::build(&cfg()).unwrap();
        assert_eq!(
            a.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            b.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        let mut other = cfg();
        other.seed = 6;
        assert_ne!(Net::build(&other).unwrap().params, a.params);
    }

    #[test]
    fn sp_init_stds() {
        let net = Net::build(&NetConfig::uniform(64, 2, 4, 64, 1e-3, 1)).unwrap();
        for t in net.tensors() {
            let xs = &net.params[t.range()];
            if t.kind.is_norm() {
                assert!(xs.iter().all(|&x| x == 1.0));
            } else if t.len() >= 2048 {
                let s = crate::stats::std_dev(xs);
                assert!((s - 0.02).abs() < 0.002, "{} {s}", t.name);
            }
        }
    }

    #[test]
    fn mup_target_hidden_std() {
        let base = NetConfig::uniform(64, 2, 4, 64, 1e-3, 1)
            .with_parametrization(Parametrization::MupComplete);
        let target = base.resized(128, 2).unwrap();
        assert!(
            (target.group(TransferGroup::HiddenWeights).init_std - 0.02 / sqrt(2.0)).abs() < 1e-15
        );
        let net = Net::build(&target).unwrap();
        let wq = net
            .tensors()
            .iter()
            .find(|t| t.kind == TensorKind::Query)
            .unwrap();
        let s = crate::stats::std_dev(&net.params[wq.range()]);
        assert!((s / (0.02 / sqrt(2.0)) - 1.0).abs() < 0.02);
    }

    #[test]
    fn initial_loss_near_uniform() {
        let net = Net::build(&cfg()).unwrap();
        let cache = net.forward(&batch()).unwrap();
        assert!((cache.loss - ln(32.0)).abs() < 0.15, "{}", cache.loss);
    }

    #[test]
    fn moe_routes_every_token_once() {
        let net = Net::build(&cfg().with_moe(2)).unwrap();
        let bt = batch();
        let cache = net.forward(&bt).unwrap();
        assert_eq!(cache.routes.len(), 2);
        for (l, lc) in cache.layers.iter().enumerate() {
            let FfnCache::Moe { experts, .. } = &lc.ffn else {
                panic!()
            };
            let mut seen = vec![0; bt.rows()];
            for (e, x) in experts.iter().enumerate() {
                for &i in &x.rows {
                    seen[i] += 1;
                    assert_eq!(cache.routes[l][i], e);
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn unselected_expert_gets_no_gradient_from_row() {
        let mut c = cfg().with_moe(2);
        c.depth = 1;
        let net = Net::build(&c).unwrap();
        let task = MarkovTask {
            vocab: 32,
            seq_len: 1,
            batch: 1,
            ..Default::default()
        };
        let bt = task.batch_at(&task.chain(), 0);
        let cache = net.forward(&bt).unwrap();
        let grad = net.backward(&net.params, &bt, &cache);
        let chosen = cache.routes[0][0];
        for t in net.tensors().iter().filter(|t| t.expert.is_some()) {
            let g = &grad[t.range()];
            let nonzero = g.iter().any(|x| *x != 0.0);
            assert_eq!(nonzero, t.expert == Some(chosen), "{}", t.name);
        }
    }

    #[test]
    fn bypass_changes_logits_only_with_qk_norm() {
        let bt = batch();
        let plain = Net::build(&cfg()).unwrap();
        let c = plain.forward(&bt).unwrap();
        assert_eq!(
            c.attention_logits(&plain.config, &bt, true),
            c.attention_logits(&plain.config, &bt, false)
        );
        let normed = Net::build(&cfg().with_qk_norm(true)).unwrap();
        let c = normed.forward(&bt).unwrap();
        let a = c.attention_logits(&normed.config, &bt, false);
        assert_eq!(a.len(), 2 * 2 * 2 * 21);
        assert_ne!(a, c.attention_logits(&normed.config, &bt, true));
    }

    #[test]
    fn tensor_groups() {
        assert_eq!(
            TensorKind::QueryNorm.transfer_group(),
            TransferGroup::QkNorms
        );
        assert_eq!(TensorKind::Router.module_group(), ModuleGroup::Router);
        assert_eq!(TensorKind::Unembed.module_group(), ModuleGroup::LmHead);
        assert_eq!(
            TensorKind::FinalNorm.transfer_group(),
            TransferGroup::UnembLn
        );
        let net = Net::build(&cfg().with_moe(2).with_qk_norm(true)).unwrap();
        let total: usize = net.tensors().iter().map(Tensor::len).sum();
        assert_eq!(total, net.num_params());
    }
}
