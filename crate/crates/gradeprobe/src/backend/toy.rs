//! Deterministic toy decoder-only transformer.
//!
//! A small pre-norm transformer (RMSNorm, single-head causal attention, SiLU
//! MLP) with seeded weights, written in plain ndarray so that forward,
//! capture, input gradients, and parameter gradients are all explicit and
//! bit-reproducible on CPU. The residual stream at index 0 is the token
//! embedding plus positional term; index `i > 0` is the output of block `i`
//! after its final residual addition.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{
    ActivationProbePoint, BackendError, BlackBoxBackend, GenerationConfig, LossSpec,
    WhiteBoxBackend, WhiteBoxCapabilities,
};
use crate::token::{TokenSequence, Tokenizer, ToyTokenizer};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            hidden_dim: 64,
            depth: 4,
            max_seq_len: 256,
            mlp_hidden: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub g1: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub g2: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyParams {
    pub embed: Array2<f64>,
    pub pos: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub gf: Array1<f64>,
    pub unembed: Array2<f64>,
}

impl ToyParams {
    fn seeded(cfg: &ToyConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden_dim;
        let h = cfg.mlp_hidden;
        let v = cfg.vocab_size;
        let scale = 0.5 / (d as f64).sqrt();
        let mut mat = |r: usize, c: usize, s: f64| {
            Array2::from_shape_fn((r, c), |_| normal(&mut rng) * s)
        };
        let embed = mat(v, d, 0.5);
        let pos = mat(cfg.max_seq_len, d, 0.1);
        let mut layers = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            layers.push(LayerParams {
                g1: Array1::ones(d),
                wq: mat(d, d, scale),
                wk: mat(d, d, scale),
                wv: mat(d, d, scale),
                wo: mat(d, d, scale),
                g2: Array1::ones(d),
                w1: mat(d, h, scale),
                b1: Array1::zeros(h),
                w2: mat(h, d, 0.5 / (h as f64).sqrt()),
                b2: Array1::zeros(d),
            });
        }
        let gf = Array1::ones(d);
        let unembed = mat(d, v, scale);
        Self {
            embed,
            pos,
            layers,
            gf,
            unembed,
        }
    }

    fn zeros_like(&self) -> Self {
        let zl = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let zv = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Self {
            embed: zl(&self.embed),
            pos: zl(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    g1: zv(&l.g1),
                    wq: zl(&l.wq),
                    wk: zl(&l.wk),
                    wv: zl(&l.wv),
                    wo: zl(&l.wo),
                    g2: zv(&l.g2),
                    w1: zl(&l.w1),
                    b1: zv(&l.b1),
                    w2: zl(&l.w2),
                    b2: zv(&l.b2),
                })
                .collect(),
            gf: zv(&self.gf),
            unembed: zl(&self.unembed),
        }
    }

    /// Flat mutable views over every tensor, in a fixed order.
    fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.embed.as_slice_mut().unwrap());
        out.push(self.pos.as_slice_mut().unwrap());
        for l in &mut self.layers {
            out.push(l.g1.as_slice_mut().unwrap());
            out.push(l.wq.as_slice_mut().unwrap());
            out.push(l.wk.as_slice_mut().unwrap());
            out.push(l.wv.as_slice_mut().unwrap());
            out.push(l.wo.as_slice_mut().unwrap());
            out.push(l.g2.as_slice_mut().unwrap());
            out.push(l.w1.as_slice_mut().unwrap());
            out.push(l.b1.as_slice_mut().unwrap());
            out.push(l.w2.as_slice_mut().unwrap());
            out.push(l.b2.as_slice_mut().unwrap());
        }
        out.push(self.gf.as_slice_mut().unwrap());
        out.push(self.unembed.as_slice_mut().unwrap());
        out
    }

    fn tensors(&self) -> Vec<(&[f64], Vec<usize>)> {
        let mut out: Vec<(&[f64], Vec<usize>)> = Vec::new();
        let m = |a: &Array2<f64>| a.shape().to_vec();
        out.push((self.embed.as_slice().unwrap(), m(&self.embed)));
        out.push((self.pos.as_slice().unwrap(), m(&self.pos)));
        for l in &self.layers {
            out.push((l.g1.as_slice().unwrap(), vec![l.g1.len()]));
            out.push((l.wq.as_slice().unwrap(), m(&l.wq)));
            out.push((l.wk.as_slice().unwrap(), m(&l.wk)));
            out.push((l.wv.as_slice().unwrap(), m(&l.wv)));
            out.push((l.wo.as_slice().unwrap(), m(&l.wo)));
            out.push((l.g2.as_slice().unwrap(), vec![l.g2.len()]));
            out.push((l.w1.as_slice().unwrap(), m(&l.w1)));
            out.push((l.b1.as_slice().unwrap(), vec![l.b1.len()]));
            out.push((l.w2.as_slice().unwrap(), m(&l.w2)));
            out.push((l.b2.as_slice().unwrap(), vec![l.b2.len()]));
        }
        out.push((self.gf.as_slice().unwrap(), vec![self.gf.len()]));
        out.push((self.unembed.as_slice().unwrap(), m(&self.unembed)));
        out
    }
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple to reason about.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct LayerTrace {
    x_in: Array2<f64>,
    inv_r1: Array1<f64>,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    x_mid: Array2<f64>,
    inv_r2: Array1<f64>,
    n2: Array2<f64>,
    hpre: Array2<f64>,
    hact: Array2<f64>,
    x_out: Array2<f64>,
}

struct Trace {
    x0: Array2<f64>,
    layers: Vec<LayerTrace>,
    inv_rf: Array1<f64>,
    nf: Array2<f64>,
    logits: Array2<f64>,
}

fn rmsnorm(x: &Array2<f64>, g: &Array1<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = x.ncols() as f64;
    let inv_r: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|row| 1.0 / (row.dot(&row) / d + RMS_EPS).sqrt())
        .collect();
    let mut n = x.clone();
    for (t, mut row) in n.rows_mut().into_iter().enumerate() {
        let ir = inv_r[t];
        row.zip_mut_with(g, |v, gv| *v = *v * ir * gv);
    }
    (inv_r, n)
}

/// Backward through rmsnorm. Returns dX and accumulates dg.
fn rmsnorm_backward(
    x: &Array2<f64>,
    g: &Array1<f64>,
    inv_r: &Array1<f64>,
    dy: &Array2<f64>,
    dg: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    if let Some(dg) = dg {
        for t in 0..x.nrows() {
            let ir = inv_r[t];
            for j in 0..x.ncols() {
                dg[j] += dy[[t, j]] * x[[t, j]] * ir;
            }
        }
    }
    let mut dx = Array2::zeros(x.raw_dim());
    for t in 0..x.nrows() {
        let ir = inv_r[t];
        let mut dot = 0.0;
        for j in 0..x.ncols() {
            dot += dy[[t, j]] * g[j] * x[[t, j]];
        }
        let c = dot * ir.powi(3) / d;
        for j in 0..x.ncols() {
            dx[[t, j]] = g[j] * dy[[t, j]] * ir - x[[t, j]] * c;
        }
    }
    dx
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

/// One next-token training example: logits at position `t` are trained to
/// predict `targets[k].1` wherever `targets[k].0 == t`.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

#[derive(Clone)]
pub struct ToyTransformer {
    pub config: ToyConfig,
    pub params: ToyParams,
    pub tokenizer: ToyTokenizer,
    name: String,
    /// Generation halts after emitting this token, if set.
    pub stop_token: Option<u32>,
}

impl ToyTransformer {
    pub fn new(name: &str, config: ToyConfig, tokenizer: ToyTokenizer) -> Self {
        assert!(
            tokenizer.vocab_size() <= config.vocab_size,
            "tokenizer vocabulary larger than model vocabulary"
        );
        let params = ToyParams::seeded(&config);
        Self {
            config,
            params,
            tokenizer,
            name: name.to_string(),
            stop_token: None,
        }
    }

    pub fn with_stop_token(mut self, id: u32) -> Self {
        self.stop_token = Some(id);
        self
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), BackendError> {
        if ids.len() > self.config.max_seq_len {
            return Err(BackendError::ContextLengthExceeded {
                got: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(BackendError::TokenOutOfRange(id, self.config.vocab_size));
            }
        }
        Ok(())
    }

    fn embed_ids(&self, ids: &[u32]) -> Array2<f64> {
        let d = self.config.hidden_dim;
        let mut x0 = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            for j in 0..d {
                x0[[t, j]] = self.params.embed[[id as usize, j]] + self.params.pos[[t, j]];
            }
        }
        x0
    }

    fn forward_from_x0(&self, x0: Array2<f64>) -> Trace {
        let d = self.config.hidden_dim;
        let t_len = x0.nrows();
        let scale = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(self.config.depth);
        let mut x = x0.clone();
        for lp in &self.params.layers {
            let x_in = x;
            let (inv_r1, n1) = rmsnorm(&x_in, &lp.g1);
            let q = n1.dot(&lp.wq);
            let k = n1.dot(&lp.wk);
            let v = n1.dot(&lp.wv);
            let mut scores = q.dot(&k.t());
            scores.mapv_inplace(|s| s * scale);
            // causal softmax, row by row
            let mut attn = Array2::zeros((t_len, t_len));
            for i in 0..t_len {
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    max = max.max(scores[[i, j]]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (scores[[i, j]] - max).exp();
                    attn[[i, j]] = e;
                    sum += e;
                }
                for j in 0..=i {
                    attn[[i, j]] /= sum;
                }
            }
            let ctx = attn.dot(&v);
            let a_out = ctx.dot(&lp.wo);
            let x_mid = &x_in + &a_out;
            let (inv_r2, n2) = rmsnorm(&x_mid, &lp.g2);
            let mut hpre = n2.dot(&lp.w1);
            for mut row in hpre.rows_mut() {
                row += &lp.b1;
            }
            let hact = hpre.mapv(silu);
            let mut m = hact.dot(&lp.w2);
            for mut row in m.rows_mut() {
                row += &lp.b2;
            }
            let x_out = &x_mid + &m;
            x = x_out.clone();
            layers.push(LayerTrace {
                x_in,
                inv_r1,
                n1,
                q,
                k,
                v,
                attn,
                ctx,
                x_mid,
                inv_r2,
                n2,
                hpre,
                hact,
                x_out,
            });
        }
        let (inv_rf, nf) = rmsnorm(&x, &self.params.gf);
        let logits = nf.dot(&self.params.unembed);
        Trace {
            x0,
            layers,
            inv_rf,
            nf,
            logits,
        }
    }

    fn forward(&self, ids: &[u32]) -> Result<Trace, BackendError> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(BackendError::InvalidProbePoint("empty prompt".into()));
        }
        Ok(self.forward_from_x0(self.embed_ids(ids)))
    }

    fn stream(&self, trace: &Trace, layer_index: usize) -> Result<Array2<f64>, BackendError> {
        if layer_index >= self.config.depth {
            return Err(BackendError::InvalidProbePoint(format!(
                "layer {layer_index} out of range for depth {}",
                self.config.depth
            )));
        }
        Ok(if layer_index == 0 {
            trace.x0.clone()
        } else {
            trace.layers[layer_index - 1].x_out.clone()
        })
    }

    /// Reverse pass. `d_logits` seeds the output side, `stream_grad` injects
    /// a gradient directly into residual stream `s`. Returns the gradient at
    /// the embedding inputs; parameter gradients accumulate into `grads`.
    fn backward(
        &self,
        trace: &Trace,
        d_logits: Option<&Array2<f64>>,
        stream_grad: Option<(usize, &Array2<f64>)>,
        mut grads: Option<&mut ToyParams>,
    ) -> Array2<f64> {
        let d = self.config.hidden_dim;
        let t_len = trace.x0.nrows();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dx: Array2<f64> = Array2::zeros((t_len, d));
        if let Some(dl) = d_logits {
            let d_nf = dl.dot(&self.params.unembed.t());
            if let Some(g) = grads.as_deref_mut() {
                g.unembed = &g.unembed + &trace.nf.t().dot(dl);
            }
            let x_last = if self.config.depth == 0 {
                &trace.x0
            } else {
                &trace.layers[self.config.depth - 1].x_out
            };
            let dgf = grads.as_deref_mut().map(|g| &mut g.gf);
            dx = &dx + &rmsnorm_backward(x_last, &self.params.gf, &trace.inv_rf, &d_nf, dgf);
        }
        for i in (0..self.config.depth).rev() {
            if let Some((s, g)) = stream_grad {
                if s == i + 1 {
                    dx = &dx + g;
                }
            }
            let lt = &trace.layers[i];
            let lp = &self.params.layers[i];
            // MLP path: x_out = x_mid + silu(n2 w1 + b1) w2 + b2
            let d_m = dx.clone();
            let d_hact = d_m.dot(&lp.w2.t());
            let mut d_hpre = d_hact;
            for (dv, hv) in d_hpre.iter_mut().zip(lt.hpre.iter()) {
                *dv *= silu_grad(*hv);
            }
            let d_n2 = d_hpre.dot(&lp.w1.t());
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                gl.w2 = &gl.w2 + &lt.hact.t().dot(&d_m);
                gl.b2 = &gl.b2 + &d_m.sum_axis(Axis(0));
                gl.w1 = &gl.w1 + &lt.n2.t().dot(&d_hpre);
                gl.b1 = &gl.b1 + &d_hpre.sum_axis(Axis(0));
            }
            let dg2 = grads.as_deref_mut().map(|g| &mut g.layers[i].g2);
            let mut d_x_mid =
                &dx + &rmsnorm_backward(&lt.x_mid, &lp.g2, &lt.inv_r2, &d_n2, dg2);
            // attention path: x_mid = x_in + (attn(n1) wo)
            let d_ctx = d_x_mid.dot(&lp.wo.t());
            let d_attn = d_ctx.dot(&lt.v.t());
            let d_v = lt.attn.t().dot(&d_ctx);
            // softmax backward per row, honoring the causal mask
            let mut d_scores = Array2::zeros((t_len, t_len));
            for r in 0..t_len {
                let mut dot = 0.0;
                for c in 0..=r {
                    dot += d_attn[[r, c]] * lt.attn[[r, c]];
                }
                for c in 0..=r {
                    d_scores[[r, c]] = lt.attn[[r, c]] * (d_attn[[r, c]] - dot) * scale;
                }
            }
            let d_q = d_scores.dot(&lt.k);
            let d_k = d_scores.t().dot(&lt.q);
            let d_n1 =
                d_q.dot(&lp.wq.t()) + d_k.dot(&lp.wk.t()) + d_v.dot(&lp.wv.t());
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                gl.wo = &gl.wo + &lt.ctx.t().dot(&d_x_mid);
                gl.wq = &gl.wq + &lt.n1.t().dot(&d_q);
                gl.wk = &gl.wk + &lt.n1.t().dot(&d_k);
                gl.wv = &gl.wv + &lt.n1.t().dot(&d_v);
            }
            let dg1 = grads.as_deref_mut().map(|g| &mut g.layers[i].g1);
            let d_x_in = rmsnorm_backward(&lt.x_in, &lp.g1, &lt.inv_r1, &d_n1, dg1);
            d_x_mid = &d_x_mid + &d_x_in;
            dx = d_x_mid;
        }
        if let Some((0, g)) = stream_grad {
            dx = &dx + g;
        }
        dx
    }

    /// Loss value with a relaxed one-hot perturbation: the embedding at
    /// `position` is shifted by `eps * embed[token]`. Used as the
    /// finite-difference counterpart of `loss_gradient_at_onehot`.
    pub fn loss_with_onehot_perturbation(
        &self,
        prompt: &TokenSequence,
        position: usize,
        token: u32,
        eps: f64,
        loss: &LossSpec,
    ) -> Result<f64, BackendError> {
        self.check_ids(&prompt.ids)?;
        let mut x0 = self.embed_ids(&prompt.ids);
        for j in 0..self.config.hidden_dim {
            x0[[position, j]] += eps * self.params.embed[[token as usize, j]];
        }
        let trace = self.forward_from_x0(x0);
        self.loss_value(&trace, prompt.ids.len(), loss)
    }

    fn loss_value(&self, trace: &Trace, seq_len: usize, loss: &LossSpec) -> Result<f64, BackendError> {
        match loss {
            LossSpec::NegatedInnerProduct { point, target } => {
                if target.len() != self.config.hidden_dim {
                    return Err(BackendError::NonDifferentiableLoss(format!(
                        "target dimension {} != hidden dim {}",
                        target.len(),
                        self.config.hidden_dim
                    )));
                }
                let stream = self.stream(trace, point.layer_index)?;
                let pos = point.token_position.resolve(seq_len, None)?;
                let act = stream.row(pos);
                Ok(-act.dot(target))
            }
        }
    }

    /// Scalar loss for a full prompt, without exposing the trace.
    pub fn scalar_loss(&self, prompt: &TokenSequence, loss: &LossSpec) -> Result<f64, BackendError> {
        let trace = self.forward(&prompt.ids)?;
        self.loss_value(&trace, prompt.ids.len(), loss)
    }

    /// Adam training on next-token cross-entropy over the masked positions.
    /// Returns the per-step mean loss trace.
    pub fn train(&mut self, examples: &[TrainExample], cfg: &TrainConfig) -> Vec<f64> {
        assert!(!examples.is_empty());
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut m = self.params.zeros_like();
        let mut v = self.params.zeros_like();
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut trace_out = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let mut grads = self.params.zeros_like();
            let mut loss_sum = 0.0;
            let mut n_targets = 0usize;
            let batch: Vec<&TrainExample> = (0..cfg.batch_size)
                .map(|_| &examples[rng.gen_range(0..examples.len())])
                .collect();
            for ex in &batch {
                n_targets += ex.targets.len();
            }
            for ex in batch {
                let trace = self.forward_from_x0(self.embed_ids(&ex.ids));
                let mut d_logits = Array2::zeros(trace.logits.raw_dim());
                for &(pos, target) in &ex.targets {
                    let row = trace.logits.row(pos);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    loss_sum += -(exps[target as usize] / sum).ln();
                    for (j, &e) in exps.iter().enumerate() {
                        let p = e / sum;
                        d_logits[[pos, j]] +=
                            (p - if j == target as usize { 1.0 } else { 0.0 })
                                / n_targets as f64;
                    }
                }
                let dx0 = self.backward(&trace, Some(&d_logits), None, Some(&mut grads));
                for (t, &id) in ex.ids.iter().enumerate() {
                    for j in 0..self.config.hidden_dim {
                        grads.embed[[id as usize, j]] += dx0[[t, j]];
                        grads.pos[[t, j]] += dx0[[t, j]];
                    }
                }
            }
            // global-norm clip
            let mut gmuts = grads.flat_mut();
            let norm: f64 = gmuts
                .iter()
                .map(|s| s.iter().map(|g| g * g).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for slice in gmuts.iter_mut() {
                    for g in slice.iter_mut() {
                        *g *= s;
                    }
                }
            }
            let t = (step + 1) as f64;
            let bc1 = 1.0 - beta1.powf(t);
            let bc2 = 1.0 - beta2.powf(t);
            let mut pm = m.flat_mut();
            let mut pv = v.flat_mut();
            let mut pp = self.params.flat_mut();
            for ((ps, ms), (vs, gs)) in pp
                .iter_mut()
                .zip(pm.iter_mut())
                .zip(pv.iter_mut().zip(gmuts.iter()))
            {
                for i in 0..ps.len() {
                    let g = gs[i];
                    ms[i] = beta1 * ms[i] + (1.0 - beta1) * g;
                    vs[i] = beta2 * vs[i] + (1.0 - beta2) * g * g;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    ps[i] -= cfg.lr * mhat / (vhat.sqrt() + eps);
                }
            }
            trace_out.push(loss_sum / n_targets.max(1) as f64);
        }
        trace_out
    }

    /// Greedy / sampled continuation over raw token ids.
    pub fn generate_ids(
        &self,
        prompt_ids: &[u32],
        config: &GenerationConfig,
        sample_index: usize,
    ) -> Result<Vec<u32>, BackendError> {
        if prompt_ids.len() + config.max_new_tokens > self.config.max_seq_len {
            return Err(BackendError::ContextLengthExceeded {
                got: prompt_ids.len() + config.max_new_tokens,
                max: self.config.max_seq_len,
            });
        }
        self.check_ids(prompt_ids)?;
        let mut rng = ChaCha20Rng::seed_from_u64(
            config
                .random_seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(sample_index as u64),
        );
        let mut ids = prompt_ids.to_vec();
        let mut out = Vec::new();
        for _ in 0..config.max_new_tokens {
            let trace = self.forward(&ids)?;
            let row = trace.logits.row(trace.logits.nrows() - 1);
            let next = if config.temperature == 0.0 {
                let mut best = 0usize;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best as u32
            } else {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row
                    .iter()
                    .map(|&l| ((l - max) / config.temperature).exp())
                    .collect();
                let sum: f64 = exps.iter().sum();
                let mut u: f64 = rng.gen::<f64>() * sum;
                let mut pick = exps.len() - 1;
                for (j, &e) in exps.iter().enumerate() {
                    if u < e {
                        pick = j;
                        break;
                    }
                    u -= e;
                }
                pick as u32
            };
            out.push(next);
            ids.push(next);
            if Some(next) == self.stop_token {
                break;
            }
        }
        Ok(out)
    }

    pub fn save_weights<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"TOYW")?;
        w.write_u32::<LittleEndian>(1)?;
        for n in [
            self.config.vocab_size,
            self.config.hidden_dim,
            self.config.depth,
            self.config.max_seq_len,
            self.config.mlp_hidden,
        ] {
            w.write_u64::<LittleEndian>(n as u64)?;
        }
        w.write_u64::<LittleEndian>(self.config.seed)?;
        for (data, shape) in self.params.tensors() {
            w.write_u32::<LittleEndian>(shape.len() as u32)?;
            for s in &shape {
                w.write_u64::<LittleEndian>(*s as u64)?;
            }
            for &x in data {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn load_weights<R: Read>(&mut self, mut r: R) -> std::io::Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"TOYW" {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "bad magic",
            ));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "unsupported version",
            ));
        }
        let mut dims = [0u64; 5];
        for d in dims.iter_mut() {
            *d = r.read_u64::<LittleEndian>()?;
        }
        let expect = [
            self.config.vocab_size,
            self.config.hidden_dim,
            self.config.depth,
            self.config.max_seq_len,
            self.config.mlp_hidden,
        ];
        if dims.iter().zip(expect).any(|(&a, b)| a as usize != b) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "weight file shape does not match model config",
            ));
        }
        let _seed = r.read_u64::<LittleEndian>()?;
        let mut flats = self.params.flat_mut();
        for slice in flats.iter_mut() {
            let rank = r.read_u32::<LittleEndian>()? as usize;
            if rank > 4 {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "implausible tensor rank",
                ));
            }
            let mut n = 1usize;
            for _ in 0..rank {
                let s = r.read_u64::<LittleEndian>()? as usize;
                n = n.checked_mul(s).ok_or_else(|| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, "shape overflow")
                })?;
            }
            if n != slice.len() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "tensor size mismatch",
                ));
            }
            for x in slice.iter_mut() {
                *x = r.read_f64::<LittleEndian>()?;
            }
        }
        Ok(())
    }
}

impl BlackBoxBackend for ToyTransformer {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(
        &self,
        prompt: &str,
        config: &GenerationConfig,
    ) -> Result<Vec<String>, BackendError> {
        let seq = self.tokenizer.encode(prompt);
        let mut out = Vec::with_capacity(config.sample_count);
        for s in 0..config.sample_count {
            let ids = self.generate_ids(&seq.ids, config, s)?;
            out.push(self.tokenizer.decode(&ids));
        }
        Ok(out)
    }
}

impl WhiteBoxBackend for ToyTransformer {
    fn capabilities(&self) -> WhiteBoxCapabilities {
        WhiteBoxCapabilities {
            vocab_size: self.config.vocab_size,
            depth: self.config.depth,
            hidden_dim: self.config.hidden_dim,
            supports_gradients: true,
        }
    }

    fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (data, _) in self.params.tensors() {
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        format!("{}:{:x}", self.name, h.finalize())
    }

    fn forward_with_capture(
        &self,
        prompt: &TokenSequence,
        points: &[ActivationProbePoint],
    ) -> Result<BTreeMap<ActivationProbePoint, Array1<f64>>, BackendError> {
        self.forward_with_capture_at(prompt, None, points)
    }

    fn forward_with_capture_at(
        &self,
        prompt: &TokenSequence,
        essay_end: Option<usize>,
        points: &[ActivationProbePoint],
    ) -> Result<BTreeMap<ActivationProbePoint, Array1<f64>>, BackendError> {
        let trace = self.forward(&prompt.ids)?;
        let mut out = BTreeMap::new();
        for &p in points {
            let stream = self.stream(&trace, p.layer_index)?;
            let pos = p.token_position.resolve(prompt.ids.len(), essay_end)?;
            out.insert(p, stream.row(pos).to_owned());
        }
        Ok(out)
    }

    fn loss_gradient_at_onehot(
        &self,
        prompt: &TokenSequence,
        suffix_slice: std::ops::Range<usize>,
        loss: &LossSpec,
    ) -> Result<Array2<f64>, BackendError> {
        let len = prompt.ids.len();
        if suffix_slice.start >= suffix_slice.end || suffix_slice.end > len {
            return Err(BackendError::SuffixOutOfBounds(
                suffix_slice.start,
                suffix_slice.end,
                len,
            ));
        }
        let trace = self.forward(&prompt.ids)?;
        let LossSpec::NegatedInnerProduct { point, target } = loss;
        if target.len() != self.config.hidden_dim {
            return Err(BackendError::NonDifferentiableLoss(format!(
                "target dimension {} != hidden dim {}",
                target.len(),
                self.config.hidden_dim
            )));
        }
        // validate the point up front so errors are not silently zero grads
        self.stream(&trace, point.layer_index)?;
        let pos = point.token_position.resolve(len, None)?;
        let mut seed = Array2::zeros((len, self.config.hidden_dim));
        for j in 0..self.config.hidden_dim {
            seed[[pos, j]] = -target[j];
        }
        let dx0 = self.backward(&trace, None, Some((point.layer_index, &seed)), None);
        let rows = dx0.slice(ndarray::s![suffix_slice.start..suffix_slice.end, ..]);
        Ok(rows.dot(&self.params.embed.t()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TokenPosition;
    use crate::token::Tokenizer;

    fn small_model() -> ToyTransformer {
        let tok = ToyTokenizer::printable(64);
        ToyTransformer::new(
            "toy-test",
            ToyConfig {
                vocab_size: 64,
                hidden_dim: 16,
                depth: 3,
                max_seq_len: 32,
                mlp_hidden: 32,
                seed: 7,
            },
            tok,
        )
    }

    #[test]
    fn layer_zero_stream_is_embedding_plus_position() {
        let m = small_model();
        let prompt = m.tokenizer.encode("AB");
        let point = ActivationProbePoint {
            layer_index: 0,
            token_position: TokenPosition::Explicit(0),
        };
        let caps = m.forward_with_capture(&prompt, &[point]).unwrap();
        let got = &caps[&point];
        let id = prompt.ids[0] as usize;
        for j in 0..m.config.hidden_dim {
            let want = m.params.embed[[id, j]] + m.params.pos[[0, j]];
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn capture_is_deterministic_and_end_of_input_matches_explicit() {
        let m = small_model();
        let prompt = m.tokenizer.encode("HELLO WORLD");
        let p1 = ActivationProbePoint {
            layer_index: 1,
            token_position: TokenPosition::EndOfInput,
        };
        let p2 = ActivationProbePoint {
            layer_index: 1,
            token_position: TokenPosition::Explicit(prompt.ids.len() - 1),
        };
        let a = m.forward_with_capture(&prompt, &[p1, p2]).unwrap();
        let b = m.forward_with_capture(&prompt, &[p1, p2]).unwrap();
        assert_eq!(a[&p1], b[&p1]);
        assert_eq!(a[&p1], a[&p2]);
    }

    #[test]
    fn explicit_position_out_of_range_is_error() {
        let m = small_model();
        let prompt = m.tokenizer.encode("ABC");
        let p = ActivationProbePoint {
            layer_index: 0,
            token_position: TokenPosition::Explicit(prompt.ids.len()),
        };
        assert!(matches!(
            m.forward_with_capture(&prompt, &[p]),
            Err(BackendError::InvalidProbePoint(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = small_model();
        let prompt = m.tokenizer.encode("THE QUICK FOX");
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let target = Array1::from_shape_fn(m.config.hidden_dim, |_| normal(&mut rng));
        let loss = LossSpec::NegatedInnerProduct {
            point: ActivationProbePoint {
                layer_index: 2,
                token_position: TokenPosition::EndOfInput,
            },
            target,
        };
        let slice = 4..7;
        let grad = m
            .loss_gradient_at_onehot(&prompt, slice.clone(), &loss)
            .unwrap();
        let eps = 1e-5;
        let mut checked = 0;
        let mut ok = 0;
        for (i, pos) in slice.clone().enumerate() {
            for v in (0..m.config.vocab_size as u32).step_by(7) {
                let lp = m
                    .loss_with_onehot_perturbation(&prompt, pos, v, eps, &loss)
                    .unwrap();
                let lm = m
                    .loss_with_onehot_perturbation(&prompt, pos, v, -eps, &loss)
                    .unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let g = grad[[i, v as usize]];
                if g.abs() > 1e-6 {
                    checked += 1;
                    if ((fd - g) / g).abs() <= 1e-3 {
                        ok += 1;
                    }
                }
            }
        }
        assert!(checked > 10);
        assert!(ok as f64 >= 0.95 * checked as f64, "{ok}/{checked}");
    }

    #[test]
    fn suffix_slice_out_of_bounds() {
        let m = small_model();
        let prompt = m.tokenizer.encode("ABC");
        let loss = LossSpec::NegatedInnerProduct {
            point: ActivationProbePoint {
                layer_index: 0,
                token_position: TokenPosition::EndOfInput,
            },
            target: Array1::zeros(16),
        };
        assert!(matches!(
            m.loss_gradient_at_onehot(&prompt, 2..9, &loss),
            Err(BackendError::SuffixOutOfBounds(..))
        ));
    }

    #[test]
    fn temperature_zero_generation_is_deterministic() {
        let m = small_model();
        let cfg = GenerationConfig {
            temperature: 0.0,
            max_new_tokens: 5,
            sample_count: 3,
            random_seed: 11,
        };
        let a = m.generate("HI", &cfg).unwrap();
        let b = m.generate("HI", &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|s| s == &a[0]));
    }

    #[test]
    fn context_length_exceeded() {
        let m = small_model();
        let long: String = std::iter::repeat('A').take(40).collect();
        let cfg = GenerationConfig {
            temperature: 0.0,
            max_new_tokens: 4,
            sample_count: 1,
            random_seed: 0,
        };
        assert!(matches!(
            m.generate(&long, &cfg),
            Err(BackendError::ContextLengthExceeded { .. })
        ));
    }

    #[test]
    fn training_reduces_loss_on_constant_task() {
        // always predict token 5 after token 1
        let mut m = small_model();
        let examples = vec![TrainExample {
            ids: vec![1, 5, 5, 5],
            targets: vec![(0, 5), (1, 5), (2, 5)],
        }];
        let trace = m.train(
            &examples,
            &TrainConfig {
                steps: 80,
                batch_size: 2,
                lr: 1e-2,
                seed: 0,
                grad_clip: 1.0,
            },
        );
        assert!(trace.last().unwrap() < &0.1, "final loss {}", trace.last().unwrap());
    }

    #[test]
    fn weights_roundtrip() {
        let m = small_model();
        let mut buf = Vec::new();
        m.save_weights(&mut buf).unwrap();
        let mut m2 = small_model();
        m2.params.embed[[0, 0]] += 1.0;
        m2.load_weights(&buf[..]).unwrap();
        assert_eq!(m.fingerprint(), m2.fingerprint());
    }
}
