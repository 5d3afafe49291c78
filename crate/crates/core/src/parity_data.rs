//! Parity tasks and the sequence distributions with and without
//! chain-of-thought.
//!
//! Positions are 1-based in every public accessor and file format: a
//! sequence `b` has input bits `b[1..=n]`, the constant-0 separator `b[n+1]`,
//! then either the answer `b[n+2]` or the CoT chain `b[n+2..=n+k+1]`.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::RngStream;

/// Largest `n` accepted by [`enumerate_inputs`].
pub const MAX_ENUMERATION_N: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    #[default]
    Ascending,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityTask {
    n: usize,
    k: usize,
    secret: Vec<usize>,
    order: Vec<usize>,
}

impl ParityTask {
    /// Validates and builds a task. `secret` may be given in any order and is
    /// stored sorted; `order` must be a permutation of it.
    pub fn new(n: usize, secret: Vec<usize>, order: Vec<usize>) -> Result<Self> {
        let k = secret.len();
        if k == 0 || k > n {
            return Err(invalid!("secret size {k} must be in 1..={n}"));
        }
        let mut sorted = secret;
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid!("secret indices must be distinct"));
        }
        if sorted.iter().any(|&j| j == 0 || j > n) {
            return Err(invalid!("secret indices must lie in 1..={n}"));
        }
        let mut o = order.clone();
        o.sort_unstable();
        if o != sorted {
            return Err(invalid!("order {order:?} is not a permutation of the secret set"));
        }
        Ok(ParityTask { n, k, secret: sorted, order })
    }

    pub fn with_ascending_order(n: usize, secret: Vec<usize>) -> Result<Self> {
        let mut s = secret;
        s.sort_unstable();
        Self::new(n, s.clone(), s)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Sorted 1-based secret indices.
    pub fn secret(&self) -> &[usize] {
        &self.secret
    }

    /// CoT processing order: `order()[t]` is the secret index consumed at
    /// sequence position `n + 1 + t`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `S[i]` for a CoT position `i` in `n+1..=n+k`.
    pub fn secret_at(&self, position: usize) -> usize {
        self.order[position - self.n - 1]
    }

    pub fn is_secret(&self, j: usize) -> bool {
        self.secret.binary_search(&j).is_ok()
    }

    /// Sequence length for the given layout.
    pub fn seq_len(&self, cot: bool) -> usize {
        if cot {
            self.n + self.k + 1
        } else {
            self.n + 2
        }
    }

    /// 1-based positions whose next-token prediction is scored.
    pub fn scored_positions(&self, cot: bool) -> Vec<usize> {
        if cot {
            (self.n + 1..=self.n + self.k).collect()
        } else {
            vec![self.n + 1]
        }
    }
}

/// Draws a uniformly random `k`-subset of `1..=n`.
pub fn sample_secret_set(
    n: usize,
    k: usize,
    policy: OrderPolicy,
    rng: &mut RngStream,
) -> Result<ParityTask> {
    if k < 1 || k > n {
        return Err(invalid!("k = {k} must satisfy 1 <= k <= n = {n}"));
    }
    // Partial Fisher-Yates over 1..=n.
    let mut pool: Vec<usize> = (1..=n).collect();
    for t in 0..k {
        let j = t + rng.index(n - t);
        pool.swap(t, j);
    }
    let mut secret = pool[..k].to_vec();
    secret.sort_unstable();
    let mut order = secret.clone();
    if policy == OrderPolicy::Random {
        rng.shuffle(&mut order);
    }
    ParityTask::new(n, secret, order)
}

/// XOR of `input[j]` over the secret set. `input` holds `b[1..=n]`.
pub fn parity_eval(task: &ParityTask, input: &[u8]) -> Result<u8> {
    if input.len() != task.n {
        return Err(invalid!("input has {} bits, expected {}", input.len(), task.n));
    }
    Ok(task.secret.iter().fold(0, |acc, &j| acc ^ input[j - 1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `n` inputs, separator, answer: length `n + 2`.
    NoCot { n: usize },
    /// `n` inputs, separator, `k` chain tokens: length `n + k + 1`.
    Cot { n: usize, k: usize },
    /// `n` inputs and the separator: length `n + 1`.
    InputOnly { n: usize },
}

impl Layout {
    pub fn n(&self) -> usize {
        match *self {
            Layout::NoCot { n } | Layout::Cot { n, .. } | Layout::InputOnly { n } => n,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            Layout::NoCot { n } => n + 2,
            Layout::Cot { n, k } => n + k + 1,
            Layout::InputOnly { n } => n + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitSequence {
    bits: Vec<u8>,
    layout: Layout,
}

impl BitSequence {
    pub fn new(bits: Vec<u8>, layout: Layout) -> Result<Self> {
        if bits.len() != layout.len() {
            return Err(invalid!(
                "sequence has {} tokens, layout {layout:?} needs {}",
                bits.len(),
                layout.len()
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(invalid!("tokens must be 0 or 1"));
        }
        if bits[layout.n()] != 0 {
            return Err(invalid!("separator b[{}] must be 0", layout.n() + 1));
        }
        Ok(BitSequence { bits, layout })
    }

    /// Input prefix plus separator.
    pub fn from_input(input: &[u8]) -> Result<Self> {
        let mut bits = input.to_vec();
        bits.push(0);
        Self::new(bits, Layout::InputOnly { n: input.len() })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// 1-based token access.
    pub fn bit(&self, position: usize) -> u8 {
        self.bits[position - 1]
    }

    pub fn input(&self) -> &[u8] {
        &self.bits[..self.layout.n()]
    }

    /// The last token: the answer for both labelled layouts.
    pub fn answer(&self) -> u8 {
        *self.bits.last().expect("nonempty sequence")
    }

    pub fn to_line(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }
}

/// Appends the separator and the labelled suffix to an input prefix.
pub fn complete_sequence(task: &ParityTask, input: &[u8], cot: bool) -> Result<BitSequence> {
    if input.len() != task.n {
        return Err(invalid!("input has {} bits, expected {}", input.len(), task.n));
    }
    let mut bits = Vec::with_capacity(task.seq_len(cot));
    bits.extend_from_slice(input);
    bits.push(0);
    let layout = if cot {
        for &s in &task.order {
            let prev = *bits.last().unwrap();
            bits.push(prev ^ input[s - 1]);
        }
        Layout::Cot { n: task.n, k: task.k }
    } else {
        bits.push(parity_eval(task, input)?);
        Layout::NoCot { n: task.n }
    };
    BitSequence::new(bits, layout)
}

pub fn gen_sequence(task: &ParityTask, cot: bool, rng: &mut RngStream) -> BitSequence {
    let input: Vec<u8> = (0..task.n).map(|_| rng.bit()).collect();
    complete_sequence(task, &input, cot).expect("input length matches task")
}

pub fn gen_batch(task: &ParityTask, cot: bool, count: usize, rng: &mut RngStream) -> Vec<BitSequence> {
    (0..count).map(|_| gen_sequence(task, cot, rng)).collect()
}

/// True iff the separator is 0 and the labelled suffix is consistent with the
/// task.
pub fn verify_sequence(task: &ParityTask, seq: &BitSequence) -> bool {
    let n = task.n;
    let cot = match seq.layout {
        Layout::Cot { n: ln, k } if ln == n && k == task.k => true,
        Layout::NoCot { n: ln } if ln == n => false,
        _ => return false,
    };
    if seq.bits.len() != task.seq_len(cot) || seq.bits[n] != 0 {
        return false;
    }
    match complete_sequence(task, seq.input(), cot) {
        Ok(expected) => expected.bits == seq.bits,
        Err(_) => false,
    }
}

/// Every binary input prefix of length `n`, in lexicographic order
/// (`b[1]` most significant).
pub fn enumerate_inputs(n: usize) -> Result<impl Iterator<Item = Vec<u8>>> {
    if n > MAX_ENUMERATION_N {
        return Err(invalid!(
            "refusing to enumerate 2^{n} inputs; limit is n <= {MAX_ENUMERATION_N}"
        ));
    }
    Ok((0u64..1u64 << n).map(move |x| input_from_index(x, n)))
}

/// The `x`-th prefix in lexicographic order.
pub fn input_from_index(x: u64, n: usize) -> Vec<u8> {
    (0..n).map(|p| ((x >> (n - 1 - p)) & 1) as u8).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n: usize,
    pub k: usize,
    pub secret: Vec<usize>,
    pub order: Vec<usize>,
    pub cot: bool,
    pub count: usize,
    pub seed: u64,
    pub format_version: u32,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Sidecar path for a sequence file: `<path>.meta.json`.
pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// Writes one sequence per line plus the metadata sidecar.
pub fn write_dataset(path: &Path, meta: &DatasetMeta, seqs: &[BitSequence]) -> Result<()> {
    if meta.count == 0 || meta.count != seqs.len() {
        return Err(invalid!("dataset count {} does not match {} sequences", meta.count, seqs.len()));
    }
    let mut text = String::with_capacity(seqs.len() * (seqs[0].len() + 1));
    for s in seqs {
        text.push_str(&s.to_line());
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetMeta, ParityTask, Vec<BitSequence>)> {
    let mp = meta_path(path);
    let meta_text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::parse(&mp, e))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::parse(&mp, format!("unsupported format_version {}", meta.format_version)));
    }
    let task = ParityTask::new(meta.n, meta.secret.clone(), meta.order.clone())
        .map_err(|e| Error::parse(&mp, e))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let layout = if meta.cot {
        Layout::Cot { n: meta.n, k: meta.k }
    } else {
        Layout::NoCot { n: meta.n }
    };
    let mut seqs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let bits = line
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::parse(path, format!("line {}: bad token {other:?}", lineno + 1))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let seq = BitSequence::new(bits, layout)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        if !verify_sequence(&task, &seq) {
            return Err(Error::parse(path, format!("line {}: inconsistent with task", lineno + 1)));
        }
        seqs.push(seq);
    }
    if seqs.len() != meta.count {
        return Err(Error::parse(path, format!("{} sequences, metadata says {}", seqs.len(), meta.count)));
    }
    Ok((meta, task, seqs))
}
