//! A small GPT-2 style decoder: pre-LayerNorm blocks, multi-head causal
//! attention, GELU feed-forward, learned position embeddings, hand-written
//! backward pass and Adam.
//!
//! Activations are stored row-per-position (`T x d_model`). Attention
//! patterns handed out to callers use the column convention shared with
//! the rest of the crate: column `i` is position `i`'s distribution over `j <= i`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics_diagnostics::AttentionModel;
use crate::numerics::{Matrix, RngStream};
use crate::parity_data::{BitSequence, Layout};

pub const VOCAB: usize = 2;
pub const GPT_CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GPTConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub ln_eps: f64,
    /// Reuse the token embedding as the output projection.
    pub tie_output: bool,
}

impl Default for GPTConfig {
    fn default() -> Self {
        GPTConfig { layers: 1, heads: 1, d_model: 128, d_ff: 512, max_len: 128, ln_eps: 1e-5, tie_output: false }
    }
}

impl GPTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(invalid!("all model dimensions must be >= 1: {self:?}"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if !(self.ln_eps > 0.0) {
            return Err(invalid!("ln_eps must be positive"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Offsets {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head: Option<usize>,
    total: usize,
}

fn layout(cfg: &GPTConfig) -> (Vec<TensorSpec>, Offsets) {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut specs = Vec::new();
    let mut off = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let o = off;
        off += shape.iter().product::<usize>();
        specs.push(TensorSpec { name, shape, offset: o });
        o
    };
    let tok = push("tok_emb".into(), vec![VOCAB, d]);
    let pos = push("pos_emb".into(), vec![cfg.max_len, d]);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerOffsets {
            ln1_g: push(p("ln1_gain"), vec![d]),
            ln1_b: push(p("ln1_bias"), vec![d]),
            wq: push(p("attn_q"), vec![d, d]),
            wk: push(p("attn_k"), vec![d, d]),
            wv: push(p("attn_v"), vec![d, d]),
            wo: push(p("attn_out"), vec![d, d]),
            ln2_g: push(p("ln2_gain"), vec![d]),
            ln2_b: push(p("ln2_bias"), vec![d]),
            w1: push(p("ffn_in"), vec![d, f]),
            b1: push(p("ffn_in_bias"), vec![f]),
            w2: push(p("ffn_out"), vec![f, d]),
            b2: push(p("ffn_out_bias"), vec![d]),
        });
    }
    let lnf_g = push("final_ln_gain".into(), vec![d]);
    let lnf_b = push("final_ln_bias".into(), vec![d]);
    let head = (!cfg.tie_output).then(|| push("output_head".into(), vec![d, VOCAB]));
    (specs, Offsets { tok, pos, layers, lnf_g, lnf_b, head, total: off })
}

/// All weights in one flat buffer; [`GPTParams::tensors`] lists the named
/// pieces. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct GPTParams {
    config: GPTConfig,
    specs: Vec<TensorSpec>,
    offsets: Offsets,
    data: Vec<f64>,
}

impl PartialEq for Offsets {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total
    }
}

impl GPTParams {
    pub fn zeros(config: &GPTConfig) -> Result<Self> {
        config.validate()?;
        let (specs, offsets) = layout(config);
        let data = vec![0.0; offsets.total];
        Ok(GPTParams { config: config.clone(), specs, offsets, data })
    }

    pub fn config(&self) -> &GPTConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let s = self.specs.iter().find(|s| s.name == name)?;
        Some(&self.data[s.offset..s.offset + s.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.specs.iter().find(|s| s.name == name)?;
        let (o, l) = (s.offset, s.len());
        Some(&mut self.data[o..o + l])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.data[off..off + len]
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("_gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with("_bias")
}

/// Normal(0, 0.02) weights, zero biases, unit LayerNorm gains.
pub fn gpt_init(config: &GPTConfig, rng: &mut RngStream) -> Result<GPTParams> {
    let mut p = GPTParams::zeros(config)?;
    for s in p.specs.clone() {
        let block = &mut p.data[s.offset..s.offset + s.len()];
        if is_gain(&s.name) {
            block.fill(1.0);
        } else if !is_bias(&s.name) {
            for x in block.iter_mut() {
                *x = 0.02 * rng.normal();
            }
        }
    }
    Ok(p)
}

// out[n x m] += a[n x k] * b[k x m]
fn mm(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_acc(a, (k, 1), b, (m, 1), out, n, k, m);
}

// out[n x m] += a[k x n]^T * b[k x m]
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize, m: usize) {
    gemm_acc(a, (1, n), b, (m, 1), out, n, k, m);
}

// out[n x m] += a[n x k] * b[m x k]^T
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_acc(a, (k, 1), b, (1, k), out, n, k, m);
}

/// `out += a * b` for strided row-major views; `out` is dense `n x m`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64], n: usize, k: usize, m: usize) {
    assert!(a.len() >= n * k && b.len() >= k * m && out.len() >= n * m);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh(u: f64) -> f64 {
    (GELU_C * (u + GELU_A * u * u * u)).tanh()
}

fn gelu_grad(u: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

struct LnOut {
    y: Vec<f64>,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], t: usize, d: usize, eps: f64) -> LnOut {
    let mut y = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            y[i * d + c] = g[c] * h + b[c];
        }
    }
    LnOut { y, xhat, rstd }
}

/// Adds the input gradient to `dx`, the gain/bias gradients to `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    ln: &LnOut,
    g: &[f64],
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    t: usize,
    d: usize,
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &ln.xhat[i * d..(i + 1) * d];
        let mut mean1 = 0.0;
        let mut mean2 = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean1 += dxhat[c];
            mean2 += dxhat[c] * xh[c];
        }
        mean1 /= d as f64;
        mean2 /= d as f64;
        let r = ln.rstd[i];
        for c in 0..d {
            dx[i * d + c] += r * (dxhat[c] - mean1 - xh[c] * mean2);
        }
    }
}

struct LayerCache {
    ln1: LnOut,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `(seq * heads + head) * T * T + i * T + j`: query `i` over keys `j <= i`.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnOut,
    u: Vec<f64>,
    /// `tanh` of the GELU argument, reused by the backward pass.
    th: Vec<f64>,
    g: Vec<f64>,
}

/// Activations of `tokens.len() / t` stacked sequences of length `t`.
struct Cache {
    tokens: Vec<u8>,
    t: usize,
    layers: Vec<LayerCache>,
    lnf: LnOut,
    /// `rows x 2`
    logits: Vec<f64>,
}

/// Output of [`gpt_forward`].
#[derive(Clone, Debug)]
pub struct GptForward {
    /// `2 x T`: entry `(c, i - 1)` is the logit of token `c` following position `i`.
    pub logits: Matrix,
    /// Column-convention patterns, `layer * heads + head`.
    pub patterns: Vec<Matrix>,
}

fn check_tokens(cfg: &GPTConfig, tokens: &[u8]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > cfg.max_len {
        return Err(invalid!("sequence length {} out of range 1..={}", tokens.len(), cfg.max_len));
    }
    if let Some(&bad) = tokens.iter().find(|&&b| b as usize >= VOCAB) {
        return Err(invalid!("token {bad} outside the vocabulary"));
    }
    Ok(())
}

fn forward_cached(p: &GPTParams, tokens: &[u8], t: usize) -> Cache {
    let cfg = &p.config;
    let (rows, d, f, nh, dh) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.heads, cfg.head_dim());
    let nseq = rows / t;
    let o = &p.offsets;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = vec![0.0; rows * d];
    for (r, &tok) in tokens.iter().enumerate() {
        let te = p.slice(o.tok + tok as usize * d, d);
        let pe = p.slice(o.pos + (r % t) * d, d);
        for c in 0..d {
            x[r * d + c] = te[c] + pe[c];
        }
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for lo in &o.layers {
        let ln1 = layer_norm(&x, p.slice(lo.ln1_g, d), p.slice(lo.ln1_b, d), rows, d, cfg.ln_eps);
        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        mm(&ln1.y, p.slice(lo.wq, d * d), &mut q, rows, d, d);
        mm(&ln1.y, p.slice(lo.wk, d * d), &mut k, rows, d, d);
        mm(&ln1.y, p.slice(lo.wv, d * d), &mut v, rows, d, d);
        let mut probs = vec![0.0; nseq * nh * t * t];
        let mut ctx = vec![0.0; rows * d];
        for sq in 0..nseq {
            let r0 = sq * t;
            for h in 0..nh {
                let hs = h * dh;
                let base = (sq * nh + h) * t * t;
                for i in 0..t {
                    let row = &mut probs[base + i * t..base + i * t + i + 1];
                    let qi = &q[(r0 + i) * d + hs..(r0 + i) * d + hs + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &k[(r0 + j) * d + hs..(r0 + j) * d + hs + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                    let out = &mut ctx[(r0 + i) * d + hs..(r0 + i) * d + hs + dh];
                    for (j, &pj) in row.iter().enumerate() {
                        for (c, &vv) in out.iter_mut().zip(&v[(r0 + j) * d + hs..(r0 + j) * d + hs + dh]) {
                            *c += pj * vv;
                        }
                    }
                }
            }
        }
        mm(&ctx, p.slice(lo.wo, d * d), &mut x, rows, d, d);
        let ln2 = layer_norm(&x, p.slice(lo.ln2_g, d), p.slice(lo.ln2_b, d), rows, d, cfg.ln_eps);
        let mut u = vec![0.0; rows * f];
        let b1 = p.slice(lo.b1, f);
        for r in 0..rows {
            u[r * f..(r + 1) * f].copy_from_slice(b1);
        }
        mm(&ln2.y, p.slice(lo.w1, d * f), &mut u, rows, d, f);
        let th: Vec<f64> = u.iter().map(|&z| gelu_tanh(z)).collect();
        let g: Vec<f64> = u.iter().zip(&th).map(|(&z, &tz)| 0.5 * z * (1.0 + tz)).collect();
        let b2 = p.slice(lo.b2, d);
        for r in 0..rows {
            for c in 0..d {
                x[r * d + c] += b2[c];
            }
        }
        mm(&g, p.slice(lo.w2, f * d), &mut x, rows, f, d);
        layers.push(LayerCache { ln1, q, k, v, probs, ctx, ln2, u, th, g });
    }
    let lnf = layer_norm(&x, p.slice(o.lnf_g, d), p.slice(o.lnf_b, d), rows, d, cfg.ln_eps);
    let mut logits = vec![0.0; rows * VOCAB];
    match o.head {
        Some(hoff) => mm(&lnf.y, p.slice(hoff, d * VOCAB), &mut logits, rows, d, VOCAB),
        None => mm_nt(&lnf.y, p.slice(o.tok, VOCAB * d), &mut logits, rows, d, VOCAB),
    }
    Cache { tokens: tokens.to_vec(), t, layers, lnf, logits }
}

fn patterns_of(cache: &Cache, nh: usize) -> Vec<Matrix> {
    let t = cache.tokens.len();
    let mut out = Vec::with_capacity(cache.layers.len() * nh);
    for lc in &cache.layers {
        for h in 0..nh {
            let base = h * t * t;
            out.push(Matrix::from_fn(t, t, |j, i| if j <= i { lc.probs[base + i * t + j] } else { 0.0 }));
        }
    }
    out
}

pub fn gpt_forward(params: &GPTParams, tokens: &[u8]) -> Result<GptForward> {
    check_tokens(&params.config, tokens)?;
    let t = tokens.len();
    let cache = forward_cached(params, tokens, t);
    let logits = Matrix::from_fn(VOCAB, t, |c, i| cache.logits[i * VOCAB + c]);
    Ok(GptForward { patterns: patterns_of(&cache, params.config.heads), logits })
}

/// Greedy next token: 1 iff its logit is strictly larger.
#[inline]
pub fn greedy_token(l0: f64, l1: f64) -> u8 {
    u8::from(l1 > l0)
}

fn backward_into(p: &GPTParams, cache: &Cache, dlogits: &[f64], grads: &mut [f64]) {
    let cfg = &p.config;
    let tokens = &cache.tokens;
    let (rows, t, d, f, nh, dh) = (tokens.len(), cache.t, cfg.d_model, cfg.d_ff, cfg.heads, cfg.head_dim());
    let nseq = rows / t;
    let o = &p.offsets;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dz = vec![0.0; rows * d];
    match o.head {
        Some(hoff) => {
            mm_nt(dlogits, p.slice(hoff, d * VOCAB), &mut dz, rows, VOCAB, d);
            mm_tn(&cache.lnf.y, dlogits, &mut grads[hoff..hoff + d * VOCAB], rows, d, VOCAB);
        }
        None => {
            mm(dlogits, p.slice(o.tok, VOCAB * d), &mut dz, rows, VOCAB, d);
            mm_tn(dlogits, &cache.lnf.y, &mut grads[o.tok..o.tok + VOCAB * d], rows, VOCAB, d);
        }
    }
    let mut dx = vec![0.0; rows * d];
    {
        let (dg, db) = split_pair(grads, o.lnf_g, o.lnf_b, d);
        layer_norm_backward(&dz, &cache.lnf, p.slice(o.lnf_g, d), &mut dx, dg, db, rows, d);
    }

    for (lo, lc) in o.layers.iter().zip(&cache.layers).rev() {
        // feed-forward half
        let mut dgelu = vec![0.0; rows * f];
        mm_nt(&dx, p.slice(lo.w2, f * d), &mut dgelu, rows, d, f);
        mm_tn(&lc.g, &dx, &mut grads[lo.w2..lo.w2 + f * d], rows, f, d);
        for r in 0..rows {
            for c in 0..d {
                grads[lo.b2 + c] += dx[r * d + c];
            }
        }
        let du: Vec<f64> = dgelu
            .iter()
            .zip(lc.u.iter().zip(&lc.th))
            .map(|(g, (&u, &th))| g * gelu_grad(u, th))
            .collect();
        mm_tn(&lc.ln2.y, &du, &mut grads[lo.w1..lo.w1 + d * f], rows, d, f);
        for r in 0..rows {
            for c in 0..f {
                grads[lo.b1 + c] += du[r * f + c];
            }
        }
        let mut dln2 = vec![0.0; rows * d];
        mm_nt(&du, p.slice(lo.w1, d * f), &mut dln2, rows, f, d);
        {
            let (dg, db) = split_pair(grads, lo.ln2_g, lo.ln2_b, d);
            layer_norm_backward(&dln2, &lc.ln2, p.slice(lo.ln2_g, d), &mut dx, dg, db, rows, d);
        }

        // attention half
        let mut dctx = vec![0.0; rows * d];
        mm_nt(&dx, p.slice(lo.wo, d * d), &mut dctx, rows, d, d);
        mm_tn(&lc.ctx, &dx, &mut grads[lo.wo..lo.wo + d * d], rows, d, d);
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; t];
        for sq in 0..nseq {
            let r0 = sq * t;
            for h in 0..nh {
                let hs = h * dh;
                let base = (sq * nh + h) * t * t;
                for i in 0..t {
                    let prow = &lc.probs[base + i * t..base + i * t + i + 1];
                    let qrow = (r0 + i) * d + hs;
                    let dci = &dctx[qrow..qrow + dh];
                    let mut inner = 0.0;
                    for j in 0..=i {
                        let krow = (r0 + j) * d + hs;
                        let vj = &lc.v[krow..krow + dh];
                        dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                        inner += prow[j] * dp[j];
                        for (dvv, &c) in dv[krow..krow + dh].iter_mut().zip(dci) {
                            *dvv += prow[j] * c;
                        }
                    }
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (r0 + j) * d + hs;
                        for c in 0..dh {
                            dq[qrow + c] += ds * lc.k[krow + c];
                            dk[krow + c] += ds * lc.q[qrow + c];
                        }
                    }
                }
            }
        }
        let mut dln1 = vec![0.0; rows * d];
        for (w, dw) in [(lo.wq, &dq), (lo.wk, &dk), (lo.wv, &dv)] {
            mm_tn(&lc.ln1.y, dw, &mut grads[w..w + d * d], rows, d, d);
            mm_nt(dw, p.slice(w, d * d), &mut dln1, rows, d, d);
        }
        {
            let (dg, db) = split_pair(grads, lo.ln1_g, lo.ln1_b, d);
            layer_norm_backward(&dln1, &lc.ln1, p.slice(lo.ln1_g, d), &mut dx, dg, db, rows, d);
        }
    }

    for (r, &tok) in tokens.iter().enumerate() {
        let pos = r % t;
        for c in 0..d {
            grads[o.tok + tok as usize * d + c] += dx[r * d + c];
            grads[o.pos + pos * d + c] += dx[r * d + c];
        }
    }
}

/// Disjoint mutable views of two `len`-long blocks at `a < b`.
fn split_pair(buf: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// Sum over `group` of each sequence's mean cross-entropy at its listed
/// 1-based positions; adds the gradient to `grads`. All sequences in the
/// group share one length.
fn loss_and_grad_into(p: &GPTParams, group: &[(&[u8], Vec<usize>)], grads: &mut [f64]) -> Result<f64> {
    let t = group.first().map_or(0, |(toks, _)| toks.len());
    let mut tokens = Vec::with_capacity(group.len() * t);
    for (toks, scored) in group {
        check_tokens(&p.config, toks)?;
        if toks.len() != t {
            return Err(invalid!("mixed sequence lengths in one group"));
        }
        if scored.is_empty() {
            return Err(invalid!("no scored positions"));
        }
        if let Some(&bad) = scored.iter().find(|&&s| s == 0 || s >= t) {
            return Err(invalid!("scored position {bad} has no next token (length {t})"));
        }
        tokens.extend_from_slice(toks);
    }
    let cache = forward_cached(p, &tokens, t);
    let mut dlogits = vec![0.0; tokens.len() * VOCAB];
    let mut loss = 0.0;
    for (sq, (toks, scored)) in group.iter().enumerate() {
        let w = 1.0 / scored.len() as f64;
        for &pos in scored {
            let r = sq * t + pos - 1;
            let l = &cache.logits[r * VOCAB..(r + 1) * VOCAB];
            let target = toks[pos] as usize;
            let max = l[0].max(l[1]);
            let z = (l[0] - max).exp() + (l[1] - max).exp();
            let lse = max + z.ln();
            loss += w * (lse - l[target]);
            for c in 0..VOCAB {
                let prob = (l[c] - lse).exp();
                dlogits[r * VOCAB + c] += w * (prob - if c == target { 1.0 } else { 0.0 });
            }
        }
    }
    backward_into(p, &cache, &dlogits, grads);
    Ok(loss)
}

pub fn gpt_loss_and_backward(params: &GPTParams, tokens: &[u8], scored_positions: &[usize]) -> Result<(f64, GPTParams)> {
    let mut grads = GPTParams::zeros(&params.config)?;
    let loss = loss_and_grad_into(params, &[(tokens, scored_positions.to_vec())], &mut grads.data)?;
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// The layout's answer/chain positions only.
    #[default]
    Scored,
    /// Every next-token prediction in the sequence.
    AllPositions,
}

pub fn loss_positions(seq: &BitSequence, mode: LossMode) -> Result<Vec<usize>> {
    match (mode, seq.layout()) {
        (_, Layout::InputOnly { .. }) => Err(invalid!("input-only sequences carry no labels")),
        (LossMode::AllPositions, _) => Ok((1..seq.len()).collect()),
        (LossMode::Scored, Layout::Cot { n, k }) => Ok((n + 1..=n + k).collect()),
        (LossMode::Scored, Layout::NoCot { n }) => Ok(vec![n + 1]),
    }
}

const GPT_CHUNK: usize = 8;

/// Batch-mean loss and gradient. Sequences are reduced in fixed chunks in
/// ascending order, so the result does not depend on the thread count.
pub fn gpt_batch_gradient(params: &GPTParams, batch: &[BitSequence], mode: LossMode) -> Result<(f64, GPTParams)> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(GPT_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; params.len()];
            let mut loss = 0.0;
            for run in chunk.chunk_by(|a, b| a.len() == b.len()) {
                let group = run
                    .iter()
                    .map(|seq| Ok((seq.bits(), loss_positions(seq, mode)?)))
                    .collect::<Result<Vec<_>>>()?;
                loss += loss_and_grad_into(params, &group, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut grads = GPTParams::zeros(&params.config)?;
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grads.data.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for x in grads.data.iter_mut() {
        *x *= scale;
    }
    Ok((loss * scale, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &GPTParams) -> Self {
        Self::with_len(params.len())
    }

    pub fn with_len(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adam_step(params: &mut GPTParams, grads: &GPTParams, state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    adam_update(&mut params.data, &grads.data, state, lr, hyper)
}

pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(invalid!("adam shape mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * (mhat / (vhat.sqrt() + hyper.eps) + hyper.weight_decay * *p);
    }
    Ok(())
}

impl AttentionModel for GPTParams {
    fn layers(&self) -> usize {
        self.config.layers
    }

    fn heads(&self) -> usize {
        self.config.heads
    }

    fn attention(&self, tokens: &[u8]) -> Result<Vec<Matrix>> {
        Ok(gpt_forward(self, tokens)?.patterns)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptCheckpoint {
    pub format_version: u32,
    pub config: GPTConfig,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
}

impl GptCheckpoint {
    pub fn new(params: &GPTParams, seed: u64) -> Self {
        let tensors = params
            .specs
            .iter()
            .map(|s| NamedTensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                data: params.data[s.offset..s.offset + s.len()].to_vec(),
            })
            .collect();
        GptCheckpoint { format_version: GPT_CHECKPOINT_VERSION, config: params.config.clone(), seed, tensors }
    }

    pub fn into_params(self) -> Result<GPTParams> {
        if self.format_version != GPT_CHECKPOINT_VERSION {
            return Err(invalid!("unsupported checkpoint version {}", self.format_version));
        }
        let mut p = GPTParams::zeros(&self.config)?;
        if self.tensors.len() != p.specs.len() {
            return Err(invalid!("checkpoint has {} tensors, config needs {}", self.tensors.len(), p.specs.len()));
        }
        for (t, s) in self.tensors.iter().zip(p.specs.clone()) {
            if t.name != s.name || t.shape != s.shape || t.data.len() != s.len() {
                return Err(invalid!("tensor {} ({:?}) does not match expected {} ({:?})", t.name, t.shape, s.name, s.shape));
            }
            p.data[s.offset..s.offset + s.len()].copy_from_slice(&t.data);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}
