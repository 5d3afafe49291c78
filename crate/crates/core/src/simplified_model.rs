//! The one-block simplified transformer: frozen hypercube embeddings, a full
//! `d x d` attention matrix under a causal column softmax, and a width-`2m`
//! ReLU FFN over `[embedding; attention output]` with a frozen readout `h`.
//!
//! Two evaluation routes exist. [`forward`]/[`backward`] follow the matrix
//! definitions literally and keep a full [`ForwardTrace`]. [`Projection`]
//! precomputes every inner product against the `2T` embedding vectors so a
//! batch costs `O(m T^2)` per sequence; it is the training path, and the
//! literal route is its test oracle.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, matmul, matmul_nt, matmul_tn, Matrix, RngStream};
use crate::parity_data::{BitSequence, Layout, ParityTask};

/// Frozen token-position embeddings `e[i][b]`, `i` in `1..=T`, `b` in {0,1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    t: usize,
    d: usize,
    /// Row `2(i-1) + b` holds `e[i][b]`.
    table: Matrix,
}

impl EmbeddingTable {
    pub fn from_matrix(table: Matrix) -> Result<Self> {
        let (rows, d) = table.shape();
        if rows == 0 || rows % 2 != 0 || d == 0 {
            return Err(invalid!("embedding table must be 2T x d, got {rows}x{d}"));
        }
        Ok(EmbeddingTable { t: rows / 2, d, table })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &Matrix {
        &self.table
    }

    #[inline]
    pub fn slot(position: usize, bit: u8) -> usize {
        2 * (position - 1) + bit as usize
    }

    /// `e[position][bit]`, 1-based position.
    pub fn vector(&self, position: usize, bit: u8) -> &[f64] {
        self.table.row(Self::slot(position, bit))
    }

    /// `E(b)`: column `i` is `e[i][b[i]]`.
    pub fn embed(&self, tokens: &[u8]) -> Matrix {
        let mut e = Matrix::zeros(self.d, tokens.len());
        for (i, &b) in tokens.iter().enumerate() {
            for (r, &v) in self.vector(i + 1, b).iter().enumerate() {
                e[(r, i)] = v;
            }
        }
        e
    }
}

pub fn init_embeddings(t: usize, d: usize, rng: &mut RngStream) -> Result<EmbeddingTable> {
    if t == 0 || d == 0 {
        return Err(invalid!("embedding needs T >= 1 and d >= 1"));
    }
    let c = 1.0 / (d as f64).sqrt();
    let table = Matrix::from_fn(2 * t, d, |_, _| rng.rademacher(c));
    EmbeddingTable::from_matrix(table)
}

/// The `+-eps` coefficients drawn at initialization, indexed by neuron,
/// CoT position and bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuTable {
    n: usize,
    k: usize,
    width: usize,
    values: Vec<f64>,
}

impl NuTable {
    /// `nu[r][position][bit]` with `r` 0-based and `position` in `n+1..=n+k`.
    pub fn get(&self, r: usize, position: usize, bit: u8) -> f64 {
        let i = position - self.n - 1;
        self.values[(r * self.k + i) * 2 + bit as usize]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedParams {
    pub a: Matrix,
    pub w: Matrix,
    h: Vec<f64>,
    m: usize,
    eps: f64,
    nu: Option<NuTable>,
}

impl SimplifiedParams {
    /// Assembles parameters from explicit weights. `w` must be `2m x 2d`,
    /// `a` must be `d x d` and `h` has `2m` entries.
    pub fn from_parts(a: Matrix, w: Matrix, h: Vec<f64>, eps: f64, nu: Option<NuTable>) -> Result<Self> {
        let d = a.rows();
        if a.cols() != d || w.cols() != 2 * d || w.rows() % 2 != 0 || w.rows() != h.len() {
            return Err(invalid!(
                "inconsistent shapes: A {:?}, W {:?}, h {}",
                a.shape(),
                w.shape(),
                h.len()
            ));
        }
        let m = w.rows() / 2;
        Ok(SimplifiedParams { a, w, h, m, eps, nu })
    }

    pub fn d(&self) -> usize {
        self.a.rows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn nu(&self) -> Option<&NuTable> {
        self.nu.as_ref()
    }

    pub fn apply(&mut self, grads: &SimplifiedGrads, lr: f64) {
        self.a.add_scaled(&grads.da, -lr);
        self.w.add_scaled(&grads.dw, -lr);
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.w.is_finite()
    }
}

/// Initialization with `A = 0`, zero attention-output FFN weights, and
/// `W[r, 1..d] = sum_{i=n+1}^{n+k} sum_b nu[r][i][b] e[i][b]`.
pub fn init_params_structured(
    task: &ParityTask,
    emb: &EmbeddingTable,
    m: usize,
    eps: f64,
    rng: &mut RngStream,
) -> Result<SimplifiedParams> {
    let (n, k) = (task.n(), task.k());
    if emb.t() < n + k + 1 {
        return Err(invalid!("embedding length {} < n + k + 1 = {}", emb.t(), n + k + 1));
    }
    if m == 0 || !(eps > 0.0) {
        return Err(invalid!("need m >= 1 and eps > 0"));
    }
    let d = emb.d();
    let width = 2 * m;
    let mut values = Vec::with_capacity(width * k * 2);
    for _ in 0..width * k * 2 {
        values.push(rng.rademacher(eps));
    }
    let nu = NuTable { n, k, width, values };
    let mut w = Matrix::zeros(width, 2 * d);
    for r in 0..width {
        let row = w.row_mut(r);
        for pos in n + 1..=n + k {
            for b in 0..2u8 {
                let c = nu.get(r, pos, b);
                for (x, &e) in row[..d].iter_mut().zip(emb.vector(pos, b)) {
                    *x += c * e;
                }
            }
        }
    }
    let h = (0..width)
        .map(|r| if r < m { 1.0 / width as f64 } else { -1.0 / width as f64 })
        .collect();
    SimplifiedParams::from_parts(Matrix::zeros(d, d), w, h, eps, Some(nu))
}

/// Everything computed by [`forward`], column `i - 1` holding position `i`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: Vec<u8>,
    /// `E(b)`, `d x T`.
    pub embedded: Matrix,
    /// `E^T A E`, `T x T`; only entries on or above the diagonal are used.
    pub scores: Matrix,
    /// Causal column softmax of `scores`.
    pub pattern: Matrix,
    /// `E P`, `d x T`.
    pub attn_out: Matrix,
    /// `[E; E P]`, `2d x T`.
    pub ffn_input: Matrix,
    /// `W [E; E P]`, `2m x T`.
    pub preact: Matrix,
    /// 1.0 where `preact > 0`, else 0.0.
    pub gate: Matrix,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplifiedGrads {
    pub da: Matrix,
    pub dw: Matrix,
}

impl SimplifiedGrads {
    pub fn zeros(d: usize, m: usize) -> Self {
        SimplifiedGrads { da: Matrix::zeros(d, d), dw: Matrix::zeros(2 * m, 2 * d) }
    }
}

fn check_tokens(params: &SimplifiedParams, emb: &EmbeddingTable, tokens: &[u8]) -> Result<()> {
    if emb.d() != params.d() {
        return Err(invalid!("embedding dim {} != model dim {}", emb.d(), params.d()));
    }
    if tokens.is_empty() || tokens.len() > emb.t() {
        return Err(invalid!("sequence length {} outside 1..={}", tokens.len(), emb.t()));
    }
    if tokens.iter().any(|&b| b > 1) {
        return Err(invalid!("tokens must be binary"));
    }
    Ok(())
}

pub fn forward(params: &SimplifiedParams, emb: &EmbeddingTable, tokens: &[u8]) -> Result<ForwardTrace> {
    check_tokens(params, emb, tokens)?;
    let d = params.d();
    let t = tokens.len();
    let e = emb.embed(tokens);
    let ae = matmul(&params.a, &e)?;
    let scores = matmul_tn(&e, &ae);
    let pattern = numerics::masked_softmax_columns(&scores)?;
    let attn_out = matmul(&e, &pattern)?;
    let mut x = Matrix::zeros(2 * d, t);
    for r in 0..d {
        x.row_mut(r).copy_from_slice(e.row(r));
        x.row_mut(d + r).copy_from_slice(attn_out.row(r));
    }
    let preact = matmul(&params.w, &x)?;
    let gate = Matrix::from_fn(preact.rows(), t, |r, c| if preact[(r, c)] > 0.0 { 1.0 } else { 0.0 });
    let y = (0..t)
        .map(|i| {
            let mut s = 0.0;
            for (r, &hr) in params.h.iter().enumerate() {
                s += hr * preact[(r, i)].max(0.0);
            }
            s
        })
        .collect();
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        embedded: e,
        scores,
        pattern,
        attn_out,
        ffn_input: x,
        preact,
        gate,
        y,
    })
}

/// Hinge loss `max((-1)^y * yhat + 1, 0)` and its subgradient in `yhat`
/// (0 at the kink).
pub fn hinge_loss(yhat: f64, y: u8) -> (f64, f64) {
    let sign = if y == 1 { -1.0 } else { 1.0 };
    let arg = sign * yhat + 1.0;
    if arg > 0.0 {
        (arg, sign)
    } else {
        (0.0, 0.0)
    }
}

/// `(position, target)` pairs scored by the layout, 1-based.
pub fn scored_targets(seq: &BitSequence) -> Result<Vec<(usize, u8)>> {
    let n = seq.layout().n();
    let positions: Vec<usize> = match seq.layout() {
        Layout::Cot { k, .. } => (n + 1..=n + k).collect(),
        Layout::NoCot { .. } => vec![n + 1],
        Layout::InputOnly { .. } => return Err(invalid!("input-only sequences carry no labels")),
    };
    Ok(positions.into_iter().map(|p| (p, seq.bit(p + 1))).collect())
}

fn check_layout(seq: &BitSequence, cot: bool) -> Result<()> {
    match (seq.layout(), cot) {
        (Layout::Cot { .. }, true) | (Layout::NoCot { .. }, false) => Ok(()),
        (l, _) => Err(invalid!("layout {l:?} does not match cot = {cot}")),
    }
}

pub fn sequence_loss(trace: &ForwardTrace, seq: &BitSequence, cot: bool) -> Result<f64> {
    check_layout(seq, cot)?;
    if trace.tokens != seq.bits() {
        return Err(invalid!("trace was computed on a different sequence"));
    }
    Ok(scored_targets(seq)?
        .into_iter()
        .map(|(p, target)| hinge_loss(trace.y[p - 1], target).0)
        .sum())
}

/// Gradients of [`sequence_loss`] with respect to `A` and `W`.
pub fn backward(
    params: &SimplifiedParams,
    trace: &ForwardTrace,
    seq: &BitSequence,
    cot: bool,
) -> Result<SimplifiedGrads> {
    check_layout(seq, cot)?;
    let d = params.d();
    let t = trace.tokens.len();
    let width = 2 * params.m;
    let mut dz = Matrix::zeros(width, t);
    for (p, target) in scored_targets(seq)? {
        let (_, dy) = hinge_loss(trace.y[p - 1], target);
        if dy == 0.0 {
            continue;
        }
        for r in 0..width {
            dz[(r, p - 1)] = dy * params.h[r] * trace.gate[(r, p - 1)];
        }
    }
    let dw = matmul_nt(&dz, &trace.ffn_input);

    // Attention-output half of W^T dZ.
    let mut w_attn = Matrix::zeros(width, d);
    for r in 0..width {
        w_attn.row_mut(r).copy_from_slice(&params.w.row(r)[d..]);
    }
    let d_attn = matmul_tn(&w_attn, &dz);
    let dp = matmul_tn(&trace.embedded, &d_attn);
    let ds = softmax_columns_backward(&trace.pattern, &dp);
    let da = matmul_nt(&matmul(&trace.embedded, &ds)?, &trace.embedded);
    Ok(SimplifiedGrads { da, dw })
}

/// Pulls a gradient on the causal column softmax back to its scores.
pub(crate) fn softmax_columns_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let t = p.rows();
    let mut ds = Matrix::zeros(t, t);
    for i in 0..t {
        let mut inner = 0.0;
        for j in 0..=i {
            inner += p[(j, i)] * dp[(j, i)];
        }
        for j in 0..=i {
            ds[(j, i)] = p[(j, i)] * (dp[(j, i)] - inner);
        }
    }
    ds
}

/// Greedy decision for the token after `position`: 1 iff the output is
/// strictly positive.
pub fn predict(trace: &ForwardTrace, position: usize) -> u8 {
    predict_value(trace.y[position - 1])
}

#[inline]
pub fn predict_value(y: f64) -> u8 {
    u8::from(y > 0.0)
}

/// Appends the separator then greedily generates `k` chain tokens (CoT) or
/// one answer token, re-running the forward pass each step.
pub fn autoregressive_complete(
    params: &SimplifiedParams,
    emb: &EmbeddingTable,
    task: &ParityTask,
    input: &[u8],
    cot: bool,
) -> Result<(BitSequence, u8)> {
    if input.len() != task.n() {
        return Err(invalid!("input has {} bits, expected {}", input.len(), task.n()));
    }
    let mut tokens = input.to_vec();
    tokens.push(0);
    let steps = if cot { task.k() } else { 1 };
    for _ in 0..steps {
        let trace = forward(params, emb, &tokens)?;
        tokens.push(predict(&trace, tokens.len()));
    }
    let layout = if cot {
        Layout::Cot { n: task.n(), k: task.k() }
    } else {
        Layout::NoCot { n: task.n() }
    };
    let seq = BitSequence::new(tokens, layout)?;
    let answer = seq.answer();
    Ok((seq, answer))
}

/// Inner products of the current weights against every embedding vector.
///
/// With slots `p = 2(i-1) + b`: `scores[p][q] = e_p^T A e_q`,
/// `direct[r][p] = W[r, 1..d] . e_p` and `through_attn[r][p] = W[r, d+1..2d] . e_p`.
#[derive(Clone, Debug)]
pub struct Projection {
    scores: Matrix,
    direct: Matrix,
    through_attn: Matrix,
    h: Vec<f64>,
}

/// Per-sequence results of the projected forward pass.
#[derive(Clone, Debug)]
pub struct LiteTrace {
    pub slots: Vec<usize>,
    pub pattern: Matrix,
    pub preact: Matrix,
    pub y: Vec<f64>,
}

/// Gradient coefficients in embedding-slot space, mapped back to `dA`, `dW`
/// by [`GradAccumulator::finish`].
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    ca: Matrix,
    cw_direct: Matrix,
    cw_attn: Matrix,
}

impl GradAccumulator {
    pub fn new(slots: usize, width: usize) -> Self {
        GradAccumulator {
            ca: Matrix::zeros(slots, slots),
            cw_direct: Matrix::zeros(width, slots),
            cw_attn: Matrix::zeros(width, slots),
        }
    }

    pub fn merge(&mut self, other: &GradAccumulator) {
        self.ca.add_scaled(&other.ca, 1.0);
        self.cw_direct.add_scaled(&other.cw_direct, 1.0);
        self.cw_attn.add_scaled(&other.cw_attn, 1.0);
    }

    /// Maps coefficients to parameter gradients and multiplies by `scale`.
    pub fn finish(&self, emb: &EmbeddingTable, scale: f64) -> SimplifiedGrads {
        let table = emb.matrix();
        let d = emb.d();
        let width = self.cw_direct.rows();
        let mut da = matmul_tn(table, &matmul(&self.ca, table).expect("slot shapes"));
        let w1 = matmul(&self.cw_direct, table).expect("slot shapes");
        let w2 = matmul(&self.cw_attn, table).expect("slot shapes");
        let mut dw = Matrix::zeros(width, 2 * d);
        for r in 0..width {
            dw.row_mut(r)[..d].copy_from_slice(w1.row(r));
            dw.row_mut(r)[d..].copy_from_slice(w2.row(r));
        }
        da.scale(scale);
        dw.scale(scale);
        SimplifiedGrads { da, dw }
    }
}

/// Sequences per reduction chunk. Fixed so the summation order does not
/// depend on the thread count.
const CHUNK: usize = 32;

impl Projection {
    pub fn new(params: &SimplifiedParams, emb: &EmbeddingTable) -> Result<Self> {
        if emb.d() != params.d() {
            return Err(invalid!("embedding dim {} != model dim {}", emb.d(), params.d()));
        }
        let table = emb.matrix();
        let d = params.d();
        let width = 2 * params.m;
        let ea = matmul(table, &params.a)?;
        let scores = matmul_nt(&ea, table);
        let mut w1 = Matrix::zeros(width, d);
        let mut w2 = Matrix::zeros(width, d);
        for r in 0..width {
            w1.row_mut(r).copy_from_slice(&params.w.row(r)[..d]);
            w2.row_mut(r).copy_from_slice(&params.w.row(r)[d..]);
        }
        Ok(Projection {
            scores,
            direct: matmul_nt(&w1, table),
            through_attn: matmul_nt(&w2, table),
            h: params.h.clone(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.scores.rows() / 2
    }

    fn width(&self) -> usize {
        self.h.len()
    }

    pub fn forward(&self, tokens: &[u8]) -> LiteTrace {
        let t = tokens.len();
        assert!(t >= 1 && t <= self.max_len(), "sequence length {t} out of range");
        let slots: Vec<usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, &b)| EmbeddingTable::slot(i + 1, b))
            .collect();
        let mut pattern = Matrix::zeros(t, t);
        let mut col = vec![0.0; t];
        for i in 0..t {
            for j in 0..=i {
                col[j] = self.scores[(slots[j], slots[i])];
            }
            numerics::softmax_in_place(&mut col[..=i]);
            for j in 0..=i {
                pattern[(j, i)] = col[j];
            }
        }
        let width = self.width();
        let mut preact = Matrix::zeros(width, t);
        let mut y = vec![0.0; t];
        for i in 0..t {
            for r in 0..width {
                let through = self.through_attn.row(r);
                let mut z = self.direct[(r, slots[i])];
                for j in 0..=i {
                    z += pattern[(j, i)] * through[slots[j]];
                }
                preact[(r, i)] = z;
                y[i] += self.h[r] * z.max(0.0);
            }
        }
        LiteTrace { slots, pattern, preact, y }
    }

    /// Adds the gradient coefficients of one sequence's hinge loss and
    /// returns that loss.
    pub fn accumulate(&self, trace: &LiteTrace, targets: &[(usize, u8)], acc: &mut GradAccumulator) -> f64 {
        let width = self.width();
        let mut loss = 0.0;
        let mut dz = vec![0.0; width];
        for &(p, target) in targets {
            let i = p - 1;
            let (l, dy) = hinge_loss(trace.y[i], target);
            loss += l;
            if dy == 0.0 {
                continue;
            }
            for r in 0..width {
                dz[r] = if trace.preact[(r, i)] > 0.0 { dy * self.h[r] } else { 0.0 };
            }
            let si = trace.slots[i];
            let mut dp = vec![0.0; i + 1];
            for r in 0..width {
                let g = dz[r];
                if g == 0.0 {
                    continue;
                }
                acc.cw_direct[(r, si)] += g;
                let through = self.through_attn.row(r);
                for j in 0..=i {
                    let sj = trace.slots[j];
                    acc.cw_attn[(r, sj)] += g * trace.pattern[(j, i)];
                    dp[j] += g * through[sj];
                }
            }
            let mut inner = 0.0;
            for j in 0..=i {
                inner += trace.pattern[(j, i)] * dp[j];
            }
            for j in 0..=i {
                acc.ca[(trace.slots[j], si)] += trace.pattern[(j, i)] * (dp[j] - inner);
            }
        }
        loss
    }

    /// Batch-mean loss and gradient over labelled sequences.
    pub fn batch_gradient(&self, emb: &EmbeddingTable, batch: &[BitSequence]) -> Result<(f64, SimplifiedGrads)> {
        if batch.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let slots = 2 * self.max_len();
        let width = self.width();
        let partials: Vec<Result<(f64, GradAccumulator)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = GradAccumulator::new(slots, width);
                let mut loss = 0.0;
                for seq in chunk {
                    let targets = scored_targets(seq)?;
                    let trace = self.forward(seq.bits());
                    loss += self.accumulate(&trace, &targets, &mut acc);
                }
                Ok((loss, acc))
            })
            .collect();
        let mut total = GradAccumulator::new(slots, width);
        let mut loss = 0.0;
        for part in partials {
            let (l, acc) = part?;
            loss += l;
            total.merge(&acc);
        }
        let scale = 1.0 / batch.len() as f64;
        Ok((loss * scale, total.finish(emb, scale)))
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk form of a simplified model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimplifiedCheckpoint {
    pub format_version: u32,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub m: usize,
    pub eps: f64,
    pub seed: u64,
    pub a: Matrix,
    pub w: Matrix,
    pub h: Vec<f64>,
    pub embeddings: Matrix,
    pub nu: Option<NuTable>,
}

impl SimplifiedCheckpoint {
    pub fn new(task: &ParityTask, params: &SimplifiedParams, emb: &EmbeddingTable, seed: u64) -> Self {
        SimplifiedCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            n: task.n(),
            k: task.k(),
            d: params.d(),
            m: params.m,
            eps: params.eps,
            seed,
            a: params.a.clone(),
            w: params.w.clone(),
            h: params.h.clone(),
            embeddings: emb.matrix().clone(),
            nu: params.nu.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(SimplifiedParams, EmbeddingTable)> {
        let emb = EmbeddingTable::from_matrix(self.embeddings)?;
        let params = SimplifiedParams::from_parts(self.a, self.w, self.h, self.eps, self.nu)?;
        if params.d() != self.d || params.m != self.m || emb.d() != self.d {
            return Err(invalid!("checkpoint header disagrees with tensor shapes"));
        }
        Ok((params, emb))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(path, format!("unsupported format_version {}", ck.format_version)));
        }
        Ok(ck)
    }
}
