//! Explicit one-block weights that compute parity without chain-of-thought,
//! plus verifiers for perfect accuracy and one-hot attention.
//!
//! The construction at the separator position `n+1`:
//!
//! * attention `A = margin * V e[n+1][0]^T`, where `V` has inner product 1
//!   with both embeddings of every secret index, so the column softmax puts
//!   mass `~1/k` on each secret position;
//! * FFN rows `W[r] = [a_r e[n+1][0]; 2k U]` with `U` the indicator of
//!   "secret index holding a 1", so the pre-activation is `a_r + 2 s` with
//!   `s` the number of ones among the secret bits;
//! * readout `h_r = +1` for `r <= m`, `-1` above, with `m = k + 1`, turning
//!   `s` into `(-1)^(s+1)` (a triangle wave).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, lu_solve, matmul, matmul_nt, norm1, Matrix, RngStream};
use crate::parity_data::{input_from_index, parity_eval, BitSequence, Layout, ParityTask};
use crate::simplified_model::{predict_value, EmbeddingTable, Projection, SimplifiedParams};

/// Largest `n` for exhaustive verification.
pub const MAX_EXHAUSTIVE_N: usize = 20;

/// Condition number of `M M^T` above which the construction is refused.
pub const MAX_CONDITION: f64 = 1e8;

pub fn default_margin(n: usize) -> f64 {
    40.0 * (n as f64).ln()
}

/// Offsets `a_r`, `r = 1..=2m` with `m = k + 1`.
pub fn readout_offsets(k: usize) -> Vec<f64> {
    let m = k + 1;
    (1..=2 * m)
        .map(|r| {
            let a = if r <= m {
                -4 * r.div_ceil(2) as i64 + 4
            } else if r == m + 1 {
                1
            } else {
                -4 * ((r - m) / 2) as i64 + 2
            };
            a as f64
        })
        .collect()
}

/// `sum_{r<=m} ReLU(a_r + 2s) - sum_{r>m} ReLU(a_r + 2s)`.
pub fn triangle_readout(s: usize, k: usize) -> Result<f64> {
    if k == 0 || s > k {
        return Err(invalid!("need 0 <= s <= k and k >= 1, got s = {s}, k = {k}"));
    }
    let m = k + 1;
    let offsets = readout_offsets(k);
    let two_s = 2.0 * s as f64;
    let mut total = 0.0;
    for (r, a) in offsets.iter().enumerate() {
        let v = (a + two_s).max(0.0);
        if r < m {
            total += v;
        } else {
            total -= v;
        }
    }
    Ok(total)
}

/// Rows of `M^T (M M^T)^{-1}` transposed: row `p` is the vector with inner
/// product `1{p = q}` against row `q` of `vectors`. Also returns the 1-norm
/// condition number of `M M^T`.
pub fn dual_basis(vectors: &Matrix) -> Result<(Matrix, f64)> {
    let gram = matmul_nt(vectors, vectors);
    let inv = lu_solve(&gram, &Matrix::identity(gram.rows())).map_err(|e| match e {
        Error::IllConditioned { .. } => Error::IllConditioned { cond: f64::INFINITY },
        other => other,
    })?;
    let cond = norm1(&gram) * norm1(&inv);
    if !cond.is_finite() || cond >= MAX_CONDITION {
        return Err(Error::IllConditioned { cond });
    }
    // (M^T G^{-1})^T = G^{-1} M since G is symmetric.
    Ok((matmul(&inv, vectors)?, cond))
}

/// The intermediate objects of the construction.
#[derive(Clone, Debug)]
pub struct ConstructionParts {
    pub d: usize,
    pub m: usize,
    pub margin: f64,
    /// `2k x d`; row `2(t-1) + b` is `e[j_t][b]` for the `t`-th secret index.
    pub secret_embeddings: Matrix,
    /// Same row layout as `secret_embeddings`: `u[j][b]`.
    pub u: Matrix,
    /// Row `t - 1` is `v[j_t] = u[j_t][0] + u[j_t][1]`.
    pub v: Matrix,
    pub big_u: Vec<f64>,
    pub big_v: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
    pub condition: f64,
}

pub fn build_construction(task: &ParityTask, emb: &EmbeddingTable, margin: f64) -> Result<ConstructionParts> {
    let (n, k, d) = (task.n(), task.k(), emb.d());
    if emb.t() < n + 1 {
        return Err(invalid!("embedding length {} < n + 1", emb.t()));
    }
    if 2 * k > d {
        return Err(Error::IllConditioned { cond: f64::INFINITY });
    }
    let mut rows = Vec::with_capacity(2 * k);
    for &j in task.secret() {
        for b in 0..2 {
            rows.push(emb.vector(j, b).to_vec());
        }
    }
    let secret_embeddings = Matrix::from_rows(&rows)?;
    let (u, condition) = dual_basis(&secret_embeddings)?;
    let mut v = Matrix::zeros(k, d);
    let mut big_u = vec![0.0; d];
    let mut big_v = vec![0.0; d];
    for t in 0..k {
        for c in 0..d {
            let (u0, u1) = (u[(2 * t, c)], u[(2 * t + 1, c)]);
            v[(t, c)] = u0 + u1;
            big_u[c] += u1;
            big_v[c] += u0 + u1;
        }
    }
    let m = k + 1;
    let h = (0..2 * m).map(|r| if r < m { 1.0 } else { -1.0 }).collect();
    Ok(ConstructionParts {
        d,
        m,
        margin,
        secret_embeddings,
        u,
        v,
        big_u,
        big_v,
        a: readout_offsets(k),
        b: vec![2.0 * k as f64; 2 * m],
        h,
        condition,
    })
}

/// Weights whose output at position `n+1` has the sign of `(-1)^(parity+1)`.
pub fn build_construction_weights(
    task: &ParityTask,
    emb: &EmbeddingTable,
    margin: f64,
) -> Result<(SimplifiedParams, ConstructionParts)> {
    let parts = build_construction(task, emb, margin)?;
    let d = parts.d;
    let anchor = emb.vector(task.n() + 1, 0);
    let a = Matrix::from_fn(d, d, |r, c| margin * parts.big_v[r] * anchor[c]);
    let width = 2 * parts.m;
    let mut w = Matrix::zeros(width, 2 * d);
    for r in 0..width {
        let row = w.row_mut(r);
        for c in 0..d {
            row[c] = parts.a[r] * anchor[c];
            row[d + c] = parts.b[r] * parts.big_u[c];
        }
    }
    let params = SimplifiedParams::from_parts(a, w, parts.h.clone(), 0.0, None)?;
    Ok((params, parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "samples")]
pub enum VerifyMode {
    Exhaustive,
    Sampled(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub inputs_tested: u64,
    pub accuracy: f64,
    /// Smallest `|y[n+1]|` seen.
    pub min_margin: f64,
    /// Largest softmax mass outside the secret set at the inspected column(s).
    pub max_leak: f64,
    /// Largest `|P[j,i] - 1{j = S[i]}|`, for the one-hot check.
    pub max_deviation: Option<f64>,
    pub claims: Vec<Claim>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.claims.iter().all(|c| c.pass)
    }
}

#[derive(Clone, Copy)]
struct BlockStats {
    tested: u64,
    correct: u64,
    min_margin: f64,
    max_leak: f64,
}

impl BlockStats {
    fn empty() -> Self {
        BlockStats { tested: 0, correct: 0, min_margin: f64::INFINITY, max_leak: 0.0 }
    }

    fn merge(self, o: BlockStats) -> Self {
        BlockStats {
            tested: self.tested + o.tested,
            correct: self.correct + o.correct,
            min_margin: self.min_margin.min(o.min_margin),
            max_leak: self.max_leak.max(o.max_leak),
        }
    }
}

const VERIFY_BLOCK: usize = 1024;

/// Runs the model on no-CoT inputs and compares its prediction after the
/// separator with the parity.
pub fn verify_perfect_accuracy(
    params: &SimplifiedParams,
    emb: &EmbeddingTable,
    task: &ParityTask,
    mode: VerifyMode,
    rng: &mut RngStream,
) -> Result<VerificationReport> {
    let n = task.n();
    if emb.t() < n + 1 {
        return Err(invalid!("embedding length {} < n + 1", emb.t()));
    }
    let inputs: Vec<Vec<u8>> = match mode {
        VerifyMode::Exhaustive => {
            if n > MAX_EXHAUSTIVE_N {
                return Err(invalid!(
                    "exhaustive verification refused for n = {n} > {MAX_EXHAUSTIVE_N}; use sampled mode"
                ));
            }
            (0..1u64 << n).map(|x| input_from_index(x, n)).collect()
        }
        VerifyMode::Sampled(count) => {
            if count == 0 {
                return Err(invalid!("sampled verification needs at least one sample"));
            }
            (0..count).map(|_| (0..n).map(|_| rng.bit()).collect()).collect()
        }
    };
    let proj = Projection::new(params, emb)?;
    let blocks: Vec<BlockStats> = inputs
        .par_chunks(VERIFY_BLOCK)
        .map(|block| {
            let mut st = BlockStats::empty();
            for input in block {
                let seq = BitSequence::from_input(input).expect("binary input");
                let tr = proj.forward(seq.bits());
                let y = tr.y[n];
                let target = parity_eval(task, input).expect("input length matches");
                st.tested += 1;
                st.correct += u64::from(predict_value(y) == target);
                st.min_margin = st.min_margin.min(y.abs());
                let leak: f64 = (1..=n + 1)
                    .filter(|&j| !task.is_secret(j))
                    .map(|j| tr.pattern[(j - 1, n)])
                    .sum();
                st.max_leak = st.max_leak.max(leak);
            }
            st
        })
        .collect();
    let st = blocks.into_iter().fold(BlockStats::empty(), BlockStats::merge);
    let accuracy = st.correct as f64 / st.tested as f64;
    Ok(VerificationReport {
        inputs_tested: st.tested,
        accuracy,
        min_margin: st.min_margin,
        max_leak: st.max_leak,
        max_deviation: None,
        claims: vec![Claim { name: "perfect_accuracy".into(), pass: accuracy == 1.0 }],
    })
}

/// Largest deviation of the CoT attention columns from the one-hot pattern
/// on the processed secret index, over a batch of CoT sequences.
pub fn check_one_hot_attention(
    params: &SimplifiedParams,
    emb: &EmbeddingTable,
    task: &ParityTask,
    batch: &[BitSequence],
    tol: f64,
) -> Result<VerificationReport> {
    let (n, k) = (task.n(), task.k());
    if batch.is_empty() {
        return Err(invalid!("empty validation batch"));
    }
    if let Some(bad) = batch.iter().find(|s| s.layout() != (Layout::Cot { n, k })) {
        return Err(invalid!("one-hot check needs CoT sequences, got {:?}", bad.layout()));
    }
    let proj = Projection::new(params, emb)?;
    let mut max_dev: f64 = 0.0;
    let mut max_leak: f64 = 0.0;
    let mut correct = 0u64;
    let mut scored = 0u64;
    let mut min_margin = f64::INFINITY;
    for seq in batch {
        let tr = proj.forward(seq.bits());
        for i in n + 1..=n + k {
            let target = task.secret_at(i);
            let mut leak = 0.0;
            for j in 1..=i {
                let p = tr.pattern[(j - 1, i - 1)];
                let ideal = if j == target { 1.0 } else { 0.0 };
                max_dev = max_dev.max((p - ideal).abs());
                if j != target {
                    leak += p;
                }
            }
            max_leak = max_leak.max(leak);
            let y = tr.y[i - 1];
            min_margin = min_margin.min(y.abs());
            correct += u64::from(predict_value(y) == seq.bit(i + 1));
            scored += 1;
        }
    }
    Ok(VerificationReport {
        inputs_tested: batch.len() as u64,
        accuracy: correct as f64 / scored as f64,
        min_margin,
        max_leak,
        max_deviation: Some(max_dev),
        claims: vec![Claim { name: "one_hot_attention".into(), pass: max_dev <= tol }],
    })
}

/// Output at the separator for one input, via the literal forward pass.
pub fn separator_output(params: &SimplifiedParams, emb: &EmbeddingTable, input: &[u8]) -> Result<f64> {
    let seq = BitSequence::from_input(input)?;
    let tr = crate::simplified_model::forward(params, emb, seq.bits())?;
    Ok(tr.y[input.len()])
}

/// Inner products `<U, e>` over every embedding vector, for diagnostics.
pub fn max_abs_projection(vec: &[f64], emb: &EmbeddingTable, skip: impl Fn(usize) -> bool) -> f64 {
    let mut best: f64 = 0.0;
    for pos in 1..=emb.t() {
        if skip(pos) {
            continue;
        }
        for b in 0..2 {
            best = best.max(numerics::dot(vec, emb.vector(pos, b)).abs());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parity_data::{gen_batch, sample_secret_set, OrderPolicy};
    use crate::simplified_model::{init_embeddings, init_params_structured};

    fn setup(n: usize, k: usize, d: usize, seed: u64) -> (ParityTask, EmbeddingTable) {
        let mut rng = RngStream::new(seed, 0);
        let task = sample_secret_set(n, k, OrderPolicy::Ascending, &mut rng).unwrap();
        let emb = init_embeddings(n + k + 1, d, &mut rng).unwrap();
        (task, emb)
    }

    #[test]
    fn readout_offsets_formula() {
        assert_eq!(readout_offsets(3), vec![0.0, 0.0, -4.0, -4.0, 1.0, -2.0, -2.0, -6.0]);
        assert_eq!(readout_offsets(1), vec![0.0, 0.0, 1.0, -2.0]);
    }

    #[test]
    fn triangle_examples() {
        let got: Vec<f64> = (0..=3).map(|s| triangle_readout(s, 3).unwrap()).collect();
        assert_eq!(got, vec![-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(triangle_readout(0, 1).unwrap(), -1.0);
        assert_eq!(triangle_readout(1, 1).unwrap(), 1.0);
        assert!(triangle_readout(4, 3).is_err());
    }

    #[test]
    fn triangle_identity_exhaustive() {
        for k in 1..=64 {
            for s in 0..=k {
                let expect = if s % 2 == 1 { 1.0 } else { -1.0 };
                assert_eq!(triangle_readout(s, k).unwrap(), expect, "k={k} s={s}");
            }
        }
    }

    #[test]
    fn indicator_vectors() {
        let (task, emb) = setup(12, 4, 64, 1);
        let parts = build_construction(&task, &emb, default_margin(12)).unwrap();
        for (t, &j) in task.secret().iter().enumerate() {
            for b in 0..2u8 {
                let row = parts.u.row(2 * t + b as usize);
                for &j2 in task.secret() {
                    for b2 in 0..2u8 {
                        let ip = numerics::dot(row, emb.vector(j2, b2));
                        let expect = if (j, b) == (j2, b2) { 1.0 } else { 0.0 };
                        assert!((ip - expect).abs() < 1e-8);
                    }
                }
            }
            for b in 0..2 {
                assert!((numerics::dot(parts.v.row(t), emb.vector(j, b)) - 1.0).abs() < 1e-8);
            }
            let u1 = numerics::dot(&parts.big_u, emb.vector(j, 1));
            assert!((u1 - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn construction_perfect_on_n10() {
        let (task, emb) = setup(10, 3, 64, 2);
        let (params, _) = build_construction_weights(&task, &emb, default_margin(10)).unwrap();
        let rep = verify_perfect_accuracy(&params, &emb, &task, VerifyMode::Exhaustive, &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(rep.inputs_tested, 1024);
        assert_eq!(rep.accuracy, 1.0);
        assert!(rep.passed());
        let rep = verify_perfect_accuracy(&params, &emb, &task, VerifyMode::Sampled(4096), &mut RngStream::new(1, 0))
            .unwrap();
        assert_eq!(rep.accuracy, 1.0);
    }

    #[test]
    fn zero_sum_inputs_give_minus_one() {
        let (task, emb) = setup(10, 3, 64, 2);
        let (params, _) = build_construction_weights(&task, &emb, default_margin(10)).unwrap();
        let input = vec![0u8; 10];
        let y = separator_output(&params, &emb, &input).unwrap();
        assert!((y + 1.0).abs() < 1e-6, "y = {y}");
        let mut input = vec![1u8; 10];
        for &j in task.secret() {
            input[j - 1] = 0;
        }
        let y = separator_output(&params, &emb, &input).unwrap();
        assert!((y + 1.0).abs() < 1e-6, "y = {y}");
    }

    #[test]
    fn leak_shrinks_with_margin() {
        let (task, emb) = setup(10, 3, 64, 2);
        let mut leaks = Vec::new();
        for mult in [10.0, 20.0, 40.0] {
            let margin = mult * (10f64).ln();
            let (params, _) = build_construction_weights(&task, &emb, margin).unwrap();
            let rep = verify_perfect_accuracy(&params, &emb, &task, VerifyMode::Exhaustive, &mut RngStream::new(0, 0))
                .unwrap();
            leaks.push(rep.max_leak);
            // secret rows share the remaining mass
            let proj = Projection::new(&params, &emb).unwrap();
            let tr = proj.forward(BitSequence::from_input(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]).unwrap().bits());
            for &j in task.secret() {
                assert!((tr.pattern[(j - 1, 10)] - 1.0 / 3.0).abs() <= rep.max_leak + 1e-12);
            }
        }
        assert!(leaks[0] > leaks[1] && leaks[1] > leaks[2], "{leaks:?}");
    }

    #[test]
    fn zero_w_accuracy_is_half() {
        let (task, emb) = setup(10, 3, 64, 2);
        let (mut params, _) = build_construction_weights(&task, &emb, default_margin(10)).unwrap();
        params.w.fill(0.0);
        let rep = verify_perfect_accuracy(&params, &emb, &task, VerifyMode::Exhaustive, &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(rep.accuracy, 0.5);
    }

    #[test]
    fn exhaustive_guard() {
        let (task, emb) = setup(21, 2, 64, 3);
        let (params, _) = build_construction_weights(&task, &emb, default_margin(21)).unwrap();
        let err = verify_perfect_accuracy(&params, &emb, &task, VerifyMode::Exhaustive, &mut RngStream::new(0, 0));
        assert!(err.is_err());
    }

    #[test]
    fn ill_conditioned_embeddings_rejected() {
        let (task, emb) = setup(10, 3, 64, 2);
        let mut table = emb.matrix().clone();
        // make two secret embeddings identical
        let j = task.secret()[0];
        let src = table.row(2 * (j - 1)).to_vec();
        table.row_mut(2 * (j - 1) + 1).copy_from_slice(&src);
        let bad = EmbeddingTable::from_matrix(table).unwrap();
        assert!(matches!(
            build_construction_weights(&task, &bad, 10.0),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn uniform_attention_fails_one_hot() {
        let (task, emb) = setup(8, 3, 32, 4);
        let params = init_params_structured(&task, &emb, 4, 0.1, &mut RngStream::new(1, 0)).unwrap();
        let batch = gen_batch(&task, true, 16, &mut RngStream::new(2, 0));
        let rep = check_one_hot_attention(&params, &emb, &task, &batch, 0.5).unwrap();
        // widest CoT column has n + k entries
        let expect = 1.0 - 1.0 / 11.0;
        assert!((rep.max_deviation.unwrap() - expect).abs() < 1e-12);
        assert!(!rep.passed());
    }

    #[test]
    fn hand_built_attention_deviation_bound() {
        let (task, emb) = setup(8, 3, 64, 5);
        let (dual, _) = dual_basis(emb.matrix()).unwrap();
        let d = emb.d();
        let delta = 6.0;
        let mut a = Matrix::zeros(d, d);
        for i in task.n() + 1..=task.n() + task.k() {
            let s = task.secret_at(i);
            for b in 0..2 {
                for b2 in 0..2 {
                    let ur = dual.row(EmbeddingTable::slot(s, b));
                    let uc = dual.row(EmbeddingTable::slot(i, b2));
                    for r in 0..d {
                        for c in 0..d {
                            a[(r, c)] += delta * ur[r] * uc[c];
                        }
                    }
                }
            }
        }
        let base = init_params_structured(&task, &emb, 2, 0.1, &mut RngStream::new(0, 0)).unwrap();
        let params = SimplifiedParams::from_parts(a, base.w.clone(), base.h().to_vec(), 0.1, None).unwrap();
        let batch = gen_batch(&task, true, 8, &mut RngStream::new(3, 0));
        let rep = check_one_hot_attention(&params, &emb, &task, &batch, 1.0).unwrap();
        let t = (task.n() + task.k() + 1) as f64;
        assert!(rep.max_deviation.unwrap() <= (t - 1.0) * (-delta as f64).exp());
        assert!(rep.max_deviation.unwrap() > 0.0);
    }
}
