//! Attention sparsity (normalized entropy), attention dumps, and the
//! FFN-side diagnostics of the simplified model.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, dot, entropy_unchecked, Matrix};
use crate::parity_data::{BitSequence, ParityTask};
use crate::simplified_model::{EmbeddingTable, Projection, SimplifiedParams};

/// One head's attention on one input. Column `i` is the distribution of
/// position `i` over `j <= i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub input_id: usize,
    pub pattern: Matrix,
}

impl AttentionRecord {
    pub fn new(layer: usize, head: usize, input_id: usize, pattern: Matrix) -> Result<Self> {
        check_pattern(&pattern)?;
        Ok(AttentionRecord { layer, head, input_id, pattern })
    }
}

fn check_pattern(p: &Matrix) -> Result<()> {
    let (t, c) = p.shape();
    if t != c {
        return Err(invalid!("attention pattern must be square, got {t}x{c}"));
    }
    for i in 0..t {
        let mut sum = 0.0;
        for j in 0..t {
            let x = p[(j, i)];
            if j > i && x != 0.0 {
                return Err(invalid!("nonzero entry above the causal boundary at ({}, {})", j + 1, i + 1));
            }
            if !(x >= 0.0) || !x.is_finite() {
                return Err(invalid!("invalid probability {x} at ({}, {})", j + 1, i + 1));
            }
            sum += x;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid!("column {} sums to {sum}", i + 1));
        }
    }
    Ok(())
}

/// Entropy of the uniform distribution on `i` points, summed the same way
/// as any other column so that uniform columns normalize to exactly 1.
fn uniform_entropy(i: usize) -> f64 {
    let p = 1.0 / i as f64;
    let mut h = 0.0;
    for _ in 0..i {
        h -= p * p.ln();
    }
    h
}

/// `min_{i >= 2} H(column i) / log i`.
pub fn normalized_attention_entropy(pattern: &Matrix) -> Result<f64> {
    if pattern.rows() < 2 {
        return Err(invalid!("normalized entropy needs T >= 2, got {}", pattern.rows()));
    }
    check_pattern(pattern)?;
    Ok(entropy_of_valid(pattern))
}

pub(crate) fn entropy_of_valid(pattern: &Matrix) -> f64 {
    let t = pattern.rows();
    let mut col = Vec::with_capacity(t);
    let mut best = f64::INFINITY;
    for i in 2..=t {
        col.clear();
        col.extend((0..i).map(|j| pattern[(j, i - 1)]));
        let v = entropy_unchecked(&col) / uniform_entropy(i);
        best = best.min(v);
    }
    best.clamp(0.0, 1.0)
}

/// Anything that exposes per-head causal attention patterns.
pub trait AttentionModel {
    fn layers(&self) -> usize;
    fn heads(&self) -> usize;
    /// Patterns in `layer * heads + head` order.
    fn attention(&self, tokens: &[u8]) -> Result<Vec<Matrix>>;
}

impl AttentionModel for Projection {
    fn layers(&self) -> usize {
        1
    }

    fn heads(&self) -> usize {
        1
    }

    fn attention(&self, tokens: &[u8]) -> Result<Vec<Matrix>> {
        if tokens.is_empty() || tokens.len() > self.max_len() {
            return Err(invalid!("sequence length {} out of range 1..={}", tokens.len(), self.max_len()));
        }
        Ok(vec![self.forward(tokens).pattern])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub layers: usize,
    pub heads: usize,
    pub inputs: usize,
    /// Mean normalized entropy, `layer * heads + head`.
    pub values: Vec<f64>,
}

impl EntropyReport {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.heads + head]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,mean_normalized_entropy\n");
        for l in 0..self.layers {
            for h in 0..self.heads {
                s.push_str(&format!("{l},{h},{}\n", numerics::fmt_f64(self.get(l, h))));
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

const ENTROPY_CHUNK: usize = 64;

/// Per-head mean normalized entropy over a dataset of full sequences.
pub fn average_entropy<M: AttentionModel + Sync>(model: &M, dataset: &[BitSequence]) -> Result<EntropyReport> {
    if dataset.is_empty() {
        return Err(invalid!("entropy over an empty dataset"));
    }
    if dataset.iter().any(|s| s.len() < 2) {
        return Err(invalid!("normalized entropy needs sequences of length >= 2"));
    }
    let slots = model.layers() * model.heads();
    let partial: Vec<Result<Vec<f64>>> = dataset
        .par_chunks(ENTROPY_CHUNK)
        .map(|chunk| {
            let mut sums = vec![0.0; slots];
            for seq in chunk {
                for (s, p) in sums.iter_mut().zip(model.attention(seq.bits())?) {
                    *s += entropy_of_valid(&p);
                }
            }
            Ok(sums)
        })
        .collect();
    let mut totals = vec![0.0; slots];
    for part in partial {
        for (t, v) in totals.iter_mut().zip(part?) {
            *t += v;
        }
    }
    let count = dataset.len() as f64;
    Ok(EntropyReport {
        layers: model.layers(),
        heads: model.heads(),
        inputs: dataset.len(),
        values: totals.into_iter().map(|t| t / count).collect(),
    })
}

/// `kappa[i][b] = -sum_r 1(nu[r][i][b] > 0) h_r W[r, d+1..2d]` for the CoT
/// positions, and its inner products with every token embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagnostics {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// `(t * 2 + b) * d`, `t` the 0-based CoT step.
    pub kappa: Vec<f64>,
    /// `((t * 2 + b) * (n + k) + (j - 1)) * 2 + b1`.
    pub delta: Vec<f64>,
}

impl PhaseDiagnostics {
    pub fn kappa(&self, position: usize, bit: u8) -> &[f64] {
        let t = position - self.n - 1;
        let start = (t * 2 + bit as usize) * self.d;
        &self.kappa[start..start + self.d]
    }

    pub fn delta(&self, position: usize, bit: u8, j: usize, bit1: u8) -> f64 {
        let t = position - self.n - 1;
        let len = self.n + self.k;
        self.delta[((t * 2 + bit as usize) * len + (j - 1)) * 2 + bit1 as usize]
    }

    /// Double contrast over the current bit and the retrieved bit. Components
    /// shared by both values of the current bit cancel.
    pub fn contrast(&self, position: usize, j: usize) -> f64 {
        self.delta(position, 0, j, 0) - self.delta(position, 0, j, 1) - self.delta(position, 1, j, 0)
            + self.delta(position, 1, j, 1)
    }

    /// `argmax_j |contrast(position, j)|`, 1-based.
    pub fn strongest_index(&self, position: usize) -> usize {
        let mut best = (1, f64::NEG_INFINITY);
        for j in 1..=self.n + self.k {
            let v = self.contrast(position, j).abs();
            if v > best.1 {
                best = (j, v);
            }
        }
        best.0
    }
}

pub fn phase_diagnostics(params: &SimplifiedParams, emb: &EmbeddingTable, task: &ParityTask) -> Result<PhaseDiagnostics> {
    let nu = params
        .nu()
        .ok_or_else(|| Error::Unsupported("phase diagnostics need the initialization coefficients".into()))?;
    let (n, k, d) = (task.n(), task.k(), params.d());
    if nu.n() != n || nu.k() != k {
        return Err(invalid!("task (n={n}, k={k}) does not match the model (n={}, k={})", nu.n(), nu.k()));
    }
    if emb.d() != d || emb.t() < n + k {
        return Err(invalid!("embedding table does not match the model"));
    }
    let width = 2 * params.m();
    let h = params.h();
    let mut kappa = vec![0.0; k * 2 * d];
    for t in 0..k {
        for b in 0..2u8 {
            let out = &mut kappa[(t * 2 + b as usize) * d..][..d];
            for r in 0..width {
                if nu.get(r, n + 1 + t, b) > 0.0 {
                    for (o, &x) in out.iter_mut().zip(&params.w.row(r)[d..]) {
                        *o -= h[r] * x;
                    }
                }
            }
        }
    }
    let len = n + k;
    let mut delta = Vec::with_capacity(k * 2 * len * 2);
    for tb in 0..k * 2 {
        let kv = &kappa[tb * d..][..d];
        for j in 1..=len {
            for b1 in 0..2u8 {
                delta.push(dot(kv, emb.vector(j, b1)));
            }
        }
    }
    Ok(PhaseDiagnostics { n, k, d, kappa, delta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSidecar {
    pub layer: usize,
    pub head: usize,
    pub input_id: usize,
    pub t: usize,
    pub secret_rows: Vec<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the pattern as CSV and a JSON sidecar naming the secret rows.
pub fn export_attention(record: &AttentionRecord, task: &ParityTask, path: &Path) -> Result<()> {
    record.pattern.write_csv(path)?;
    let side = AttentionSidecar {
        layer: record.layer,
        head: record.head,
        input_id: record.input_id,
        t: record.pattern.rows(),
        secret_rows: task.secret().to_vec(),
    };
    let side_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::parse(&side_path, e))?;
    std::fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
}

pub fn import_attention(path: &Path) -> Result<(AttentionRecord, AttentionSidecar)> {
    let pattern = Matrix::read_csv(path)?;
    let side_path = sidecar_path(path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: AttentionSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&side_path, e))?;
    if side.t != pattern.rows() {
        return Err(Error::parse(path, format!("sidecar says T = {}, CSV has {}", side.t, pattern.rows())));
    }
    let record = AttentionRecord::new(side.layer, side.head, side.input_id, pattern)?;
    Ok((record, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{masked_softmax_columns, RngStream};
    use crate::parity_data::{gen_batch, sample_secret_set, OrderPolicy};
    use crate::simplified_model::{init_embeddings, init_params_structured};
    use proptest::prelude::*;

    fn uniform(t: usize) -> Matrix {
        masked_softmax_columns(&Matrix::zeros(t, t)).unwrap()
    }

    #[test]
    fn uniform_is_one() {
        for t in 2..200 {
            assert_eq!(normalized_attention_entropy(&uniform(t)).unwrap(), 1.0, "T = {t}");
        }
    }

    #[test]
    fn one_hot_column_is_zero() {
        let mut p = uniform(6);
        for j in 0..4 {
            p[(j, 3)] = if j == 2 { 1.0 } else { 0.0 };
        }
        assert_eq!(normalized_attention_entropy(&p).unwrap(), 0.0);
    }

    #[test]
    fn half_half_column() {
        let mut p = uniform(6);
        for j in 0..4 {
            p[(j, 3)] = if j < 2 { 0.5 } else { 0.0 };
        }
        let v = normalized_attention_entropy(&p).unwrap();
        assert!((v - 0.5).abs() <= 1e-15, "{v}");
    }

    #[test]
    fn errors() {
        assert!(normalized_attention_entropy(&Matrix::from_vec(1, 1, vec![1.0]).unwrap()).is_err());
        let mut p = uniform(3);
        p[(2, 0)] = 0.1;
        assert!(normalized_attention_entropy(&p).is_err());
    }

    fn random_pattern(t: usize, rng: &mut RngStream) -> Matrix {
        let scores = Matrix::from_fn(t, t, |_, _| 4.0 * rng.normal());
        masked_softmax_columns(&scores).unwrap()
    }

    #[test]
    fn bounded_on_random_patterns() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..10_000 {
            let t = 2 + rng.index(12);
            let v = normalized_attention_entropy(&random_pattern(t, &mut rng)).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    proptest! {
        #[test]
        fn permutation_within_column(seed in any::<u64>(), t in 2usize..10, col in 1usize..10) {
            let col = col.min(t - 1);
            let mut rng = RngStream::new(seed, 0);
            let p = random_pattern(t, &mut rng);
            let mut q = p.clone();
            let mut vals: Vec<f64> = (0..=col).map(|j| p[(j, col)]).collect();
            rng.shuffle(&mut vals);
            for (j, v) in vals.into_iter().enumerate() {
                q[(j, col)] = v;
            }
            let a = normalized_attention_entropy(&p).unwrap();
            let b = normalized_attention_entropy(&q).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    fn small_model() -> (ParityTask, EmbeddingTable, SimplifiedParams) {
        let mut rng = RngStream::new(3, 0);
        let task = sample_secret_set(8, 3, OrderPolicy::Ascending, &mut rng).unwrap();
        let emb = init_embeddings(12, 32, &mut rng).unwrap();
        let params = init_params_structured(&task, &emb, 4, 0.1, &mut rng).unwrap();
        (task, emb, params)
    }

    #[test]
    fn zero_attention_model_entropy_is_one() {
        let (task, emb, params) = small_model();
        let proj = Projection::new(&params, &emb).unwrap();
        let data = gen_batch(&task, true, 20, &mut RngStream::new(9, 0));
        let rep = average_entropy(&proj, &data).unwrap();
        assert_eq!(rep.values, vec![1.0]);
        assert_eq!(rep.to_csv(), "layer,head,mean_normalized_entropy\n0,0,1.0\n");
    }

    #[test]
    fn single_input_average() {
        let (task, emb, mut params) = small_model();
        let mut rng = RngStream::new(4, 0);
        params.a = Matrix::from_fn(32, 32, |_, _| rng.normal());
        let proj = Projection::new(&params, &emb).unwrap();
        let data = gen_batch(&task, true, 1, &mut rng);
        let rep = average_entropy(&proj, &data).unwrap();
        let direct = normalized_attention_entropy(&proj.forward(data[0].bits()).pattern).unwrap();
        assert_eq!(rep.values[0], direct);
    }

    #[test]
    fn kappa_zero_at_init_and_linear() {
        let (task, emb, mut params) = small_model();
        let diag = phase_diagnostics(&params, &emb, &task).unwrap();
        assert!(diag.kappa.iter().all(|&x| x == 0.0));
        assert_eq!(diag.delta.len(), 3 * 2 * 11 * 2);
        let mut rng = RngStream::new(8, 0);
        let d = params.d();
        for r in 0..params.w.rows() {
            for c in d..2 * d {
                params.w[(r, c)] = rng.normal();
            }
        }
        let before = phase_diagnostics(&params, &emb, &task).unwrap();
        for r in 0..params.w.rows() {
            for c in d..2 * d {
                params.w[(r, c)] *= 2.0;
            }
        }
        let after = phase_diagnostics(&params, &emb, &task).unwrap();
        for (a, b) in before.delta.iter().zip(&after.delta) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn diagnostics_need_nu() {
        let (task, emb, params) = small_model();
        let bare = SimplifiedParams::from_parts(params.a.clone(), params.w.clone(), params.h().to_vec(), 0.1, None).unwrap();
        assert!(matches!(phase_diagnostics(&bare, &emb, &task), Err(Error::Unsupported(_))));
    }

    #[test]
    fn export_round_trip() {
        let (task, _, _) = small_model();
        let mut rng = RngStream::new(1, 0);
        let rec = AttentionRecord::new(0, 0, 7, random_pattern(12, &mut rng)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.csv");
        export_attention(&rec, &task, &path).unwrap();
        let (back, side) = import_attention(&path).unwrap();
        assert_eq!(back, rec);
        assert_eq!(side.secret_rows, task.secret());
        assert_eq!(back.pattern.shape(), (12, 12));
    }
}
