//! Training loops: one-pass and multi-pass SGD/Adam for both model
//! families, evaluation, the three-phase schedule for the simplified model,
//! sample-complexity measurement and grid sweeps.

use std::fmt;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Error, Result};
use crate::metrics_diagnostics::{entropy_of_valid, phase_diagnostics, PhaseDiagnostics};
use crate::numerics::{derive_seed, fmt_f64, Matrix, RngStream};
use crate::parity_data::{gen_batch, sample_secret_set, BitSequence, OrderPolicy, ParityTask};
use crate::simplified_model::{
    init_embeddings, init_params_structured, predict_value, scored_targets, EmbeddingTable, Projection,
    SimplifiedCheckpoint, SimplifiedParams,
};
use crate::standard_model::{
    adam_step, adam_update, gpt_batch_gradient, gpt_forward, gpt_init, greedy_token, AdamHyper, AdamState,
    GPTConfig, GPTParams, GptCheckpoint, LossMode,
};
use crate::theory_construct::{check_one_hot_attention, VerificationReport};

/// Random stream ids, one per consumer, all keyed by the run seed.
pub mod streams {
    pub const TASK: u64 = 1;
    pub const EMBEDDING: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Simplified,
    #[default]
    Standard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    #[default]
    LinearDecay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Flat run configuration. Every field has a default; files and `--set`
/// overrides may name any subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub n: usize,
    pub k: usize,
    pub order: OrderPolicy,
    /// Fixed secret set; drawn from the task stream when absent.
    pub secret: Option<Vec<usize>>,
    pub cot: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    /// One-pass sample budget.
    pub budget_samples: u64,
    /// 1 = fresh samples every batch; more = epochs over a fixed dataset.
    pub passes: u64,
    pub dataset_size: usize,
    pub shuffle: bool,
    pub eval_every: u64,
    pub val_size: usize,
    pub seed: u64,
    pub halt_on_perfect: bool,
    pub loss: LossMode,
    pub attn_snapshot_steps: Vec<u64>,
    // simplified model
    pub embed_dim: usize,
    pub ffn_half_width: usize,
    pub init_scale: f64,
    // standard model
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub ln_eps: f64,
    pub tie_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GPTConfig::default();
        TrainConfig {
            model: ModelKind::Standard,
            n: 16,
            k: 3,
            order: OrderPolicy::Ascending,
            secret: None,
            cot: true,
            batch_size: 64,
            lr: 1e-3,
            lr_schedule: LrSchedule::LinearDecay,
            optimizer: OptimizerKind::Adam,
            budget_samples: 1_000_000,
            passes: 1,
            dataset_size: 10_000,
            shuffle: true,
            eval_every: 50,
            val_size: 2048,
            seed: 0,
            halt_on_perfect: true,
            loss: LossMode::Scored,
            attn_snapshot_steps: Vec::new(),
            embed_dim: 256,
            ffn_half_width: 16,
            init_scale: 0.1,
            layers: g.layers,
            heads: g.heads,
            d_model: g.d_model,
            d_ff: g.d_ff,
            max_len: g.max_len,
            ln_eps: g.ln_eps,
            tie_output: g.tie_output,
        }
    }
}

impl TrainConfig {
    pub fn gpt_config(&self) -> GPTConfig {
        GPTConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            ln_eps: self.ln_eps,
            tie_output: self.tie_output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.k > self.n {
            return bad(format!("k = {} must satisfy 1 <= k <= n = {}", self.k, self.n));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.val_size == 0 {
            return bad("val_size must be >= 1".into());
        }
        if self.passes == 0 {
            return bad("passes must be >= 1".into());
        }
        if self.passes > 1 && self.dataset_size == 0 {
            return bad("dataset_size must be >= 1 for multi-pass runs".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be a finite nonnegative number, got {}", self.lr));
        }
        let len = if self.cot { self.n + self.k + 1 } else { self.n + 2 };
        match self.model {
            ModelKind::Simplified => {
                if self.loss == LossMode::AllPositions {
                    return bad("loss = all-positions is only available for the standard model".into());
                }
                if self.embed_dim == 0 || self.ffn_half_width == 0 || !(self.init_scale > 0.0) {
                    return bad("embed_dim, ffn_half_width and init_scale must be positive".into());
                }
            }
            ModelKind::Standard => {
                self.gpt_config().validate().map_err(|e| Error::Config(e.to_string()))?;
                if len > self.max_len {
                    return bad(format!("sequence length {len} exceeds max_len {}", self.max_len));
                }
            }
        }
        Ok(())
    }

    /// Steps a run performs when it never halts early.
    pub fn total_steps(&self) -> u64 {
        if self.passes > 1 {
            self.passes * (self.dataset_size as u64).div_ceil(self.batch_size as u64)
        } else {
            self.budget_samples / self.batch_size as u64
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("key `{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let slot = obj.get_mut(*part).expect("checked above");
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Applies `key=value` overrides. Values are parsed as JSON when possible,
/// otherwise taken as strings. Unknown keys are rejected by name.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(config: &T, overrides: &[String]) -> Result<T> {
    let mut v = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_dotted(&mut v, key.trim(), parsed)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<T: DeserializeOwned + Default>(path: Option<&std::path::Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub fn build_task(config: &TrainConfig) -> Result<ParityTask> {
    let mut rng = RngStream::new(config.seed, streams::TASK);
    match &config.secret {
        None => sample_secret_set(config.n, config.k, config.order, &mut rng),
        Some(secret) => {
            let mut sorted = secret.clone();
            sorted.sort_unstable();
            let mut order = sorted.clone();
            if config.order == OrderPolicy::Random {
                rng.shuffle(&mut order);
            }
            if sorted.len() != config.k {
                return Err(Error::Config(format!("secret has {} entries but k = {}", sorted.len(), config.k)));
            }
            ParityTask::new(config.n, sorted, order)
        }
    }
}

pub fn validation_set(config: &TrainConfig, task: &ParityTask) -> Vec<BitSequence> {
    gen_batch(task, config.cot, config.val_size, &mut RngStream::new(config.seed, streams::VALIDATION))
}

/// The fixed dataset of a multi-pass run: the first `dataset_size` draws of
/// the training stream.
pub fn training_dataset(config: &TrainConfig, task: &ParityTask) -> Vec<BitSequence> {
    gen_batch(task, config.cot, config.dataset_size, &mut RngStream::new(config.seed, streams::TRAIN))
}

/// A model plus its optimizer state.
#[derive(Clone, Debug)]
pub enum Learner {
    Simplified {
        params: SimplifiedParams,
        emb: EmbeddingTable,
        adam: Option<(AdamState, AdamState)>,
    },
    Standard {
        params: GPTParams,
        adam: Option<AdamState>,
        loss: LossMode,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    All,
    Attention,
    Ffn,
    /// Only the FFN columns reading the attention output.
    FfnReadout,
}

impl Learner {
    pub fn new(config: &TrainConfig, task: &ParityTask) -> Result<Self> {
        match config.model {
            ModelKind::Simplified => {
                let emb = init_embeddings(
                    task.n() + task.k() + 1,
                    config.embed_dim,
                    &mut RngStream::new(config.seed, streams::EMBEDDING),
                )?;
                let params = init_params_structured(
                    task,
                    &emb,
                    config.ffn_half_width,
                    config.init_scale,
                    &mut RngStream::new(config.seed, streams::INIT),
                )?;
                let adam = (config.optimizer == OptimizerKind::Adam).then(|| {
                    (AdamState::with_len(params.a.data().len()), AdamState::with_len(params.w.data().len()))
                });
                Ok(Learner::Simplified { params, emb, adam })
            }
            ModelKind::Standard => {
                let params = gpt_init(&config.gpt_config(), &mut RngStream::new(config.seed, streams::INIT))?;
                let adam = (config.optimizer == OptimizerKind::Adam).then(|| AdamState::new(&params));
                Ok(Learner::Standard { params, adam, loss: config.loss })
            }
        }
    }

    pub fn layers_heads(&self) -> (usize, usize) {
        match self {
            Learner::Simplified { .. } => (1, 1),
            Learner::Standard { params, .. } => (params.config().layers, params.config().heads),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Learner::Simplified { params, .. } => params.is_finite(),
            Learner::Standard { params, .. } => params.is_finite(),
        }
    }

    /// One optimizer step on the batch mean loss; returns that loss.
    pub fn step(&mut self, batch: &[BitSequence], lr: f64) -> Result<f64> {
        self.step_scoped(batch, lr, UpdateScope::All)
    }

    pub fn step_scoped(&mut self, batch: &[BitSequence], lr: f64, scope: UpdateScope) -> Result<f64> {
        match self {
            Learner::Simplified { params, emb, adam } => {
                let proj = Projection::new(params, emb)?;
                let (loss, mut g) = proj.batch_gradient(emb, batch)?;
                match scope {
                    UpdateScope::All => {}
                    UpdateScope::Attention => g.dw.fill(0.0),
                    UpdateScope::Ffn => g.da.fill(0.0),
                    UpdateScope::FfnReadout => {
                        g.da.fill(0.0);
                        let d = params.d();
                        for r in 0..g.dw.rows() {
                            g.dw.row_mut(r)[..d].fill(0.0);
                        }
                    }
                }
                match adam {
                    None => params.apply(&g, lr),
                    Some((sa, sw)) => {
                        adam_update(params.a.data_mut(), g.da.data(), sa, lr, AdamHyper::default())?;
                        adam_update(params.w.data_mut(), g.dw.data(), sw, lr, AdamHyper::default())?;
                    }
                }
                Ok(loss)
            }
            Learner::Standard { params, adam, loss } => {
                if scope != UpdateScope::All {
                    return Err(Error::Unsupported("scoped updates need the simplified model".into()));
                }
                let (l, g) = gpt_batch_gradient(params, batch, *loss)?;
                match adam {
                    None => {
                        for (p, gv) in params.data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * gv;
                        }
                    }
                    Some(st) => adam_step(params, &g, st, lr, AdamHyper::default())?,
                }
                Ok(l)
            }
        }
    }

    /// Per-head attention on one sequence.
    pub fn attention(&self, tokens: &[u8]) -> Result<Vec<Matrix>> {
        match self {
            Learner::Simplified { params, emb, .. } => {
                if tokens.is_empty() || tokens.len() > emb.t() {
                    return Err(invalid!("sequence length {} out of range", tokens.len()));
                }
                Ok(vec![Projection::new(params, emb)?.forward(tokens).pattern])
            }
            Learner::Standard { params, .. } => Ok(gpt_forward(params, tokens)?.patterns),
        }
    }

    pub fn evaluate(&self, task: &ParityTask, val: &[BitSequence]) -> Result<EvalStats> {
        match self {
            Learner::Simplified { params, emb, .. } => {
                let proj = Projection::new(params, emb)?;
                evaluate_with(val, 1, |seq| simplified_eval_one(&proj, task, seq))
            }
            Learner::Standard { params, .. } => {
                let heads = params.config().layers * params.config().heads;
                evaluate_with(val, heads, |seq| standard_eval_one(params, task, seq))
            }
        }
    }

    /// JSON checkpoint text.
    pub fn checkpoint_json(&self, task: &ParityTask, seed: u64) -> Result<String> {
        let text = match self {
            Learner::Simplified { params, emb, .. } => {
                serde_json::to_string(&SimplifiedCheckpoint::new(task, params, emb, seed))
            }
            Learner::Standard { params, .. } => serde_json::to_string(&GptCheckpoint::new(params, seed)),
        };
        text.map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Fraction of scored positions right under teacher forcing.
    pub tf_acc: f64,
    /// Fraction of inputs whose greedy completion ends in the right answer.
    pub ar_acc: f64,
    /// Mean normalized entropy per head, `layer * heads + head`.
    pub entropies: Vec<f64>,
}

impl EvalStats {
    pub fn min_entropy(&self) -> f64 {
        self.entropies.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

struct OneEval {
    tf_correct: usize,
    tf_total: usize,
    ar_ok: bool,
    entropies: Vec<f64>,
}

const EVAL_CHUNK: usize = 64;

fn evaluate_with<F>(val: &[BitSequence], heads: usize, f: F) -> Result<EvalStats>
where
    F: Fn(&BitSequence) -> Result<OneEval> + Sync,
{
    if val.is_empty() {
        return Err(invalid!("empty validation set"));
    }
    let parts: Vec<Result<(usize, usize, usize, Vec<f64>)>> = val
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (mut c, mut t, mut a) = (0, 0, 0);
            let mut ent = vec![0.0; heads];
            for seq in chunk {
                let one = f(seq)?;
                c += one.tf_correct;
                t += one.tf_total;
                a += usize::from(one.ar_ok);
                for (e, v) in ent.iter_mut().zip(&one.entropies) {
                    *e += v;
                }
            }
            Ok((c, t, a, ent))
        })
        .collect();
    let (mut c, mut t, mut a) = (0, 0, 0);
    let mut ent = vec![0.0; heads];
    for p in parts {
        let (pc, pt, pa, pe) = p?;
        c += pc;
        t += pt;
        a += pa;
        for (e, v) in ent.iter_mut().zip(pe) {
            *e += v;
        }
    }
    let count = val.len() as f64;
    Ok(EvalStats {
        tf_acc: c as f64 / t as f64,
        ar_acc: a as f64 / count,
        entropies: ent.into_iter().map(|e| e / count).collect(),
    })
}

/// Greedy completion: separator, then `k` chain tokens or one answer.
fn greedy_answer(task: &ParityTask, input: &[u8], cot: bool, mut next: impl FnMut(&[u8]) -> Result<u8>) -> Result<u8> {
    let mut tokens = input.to_vec();
    tokens.push(0);
    let steps = if cot { task.k() } else { 1 };
    for _ in 0..steps {
        let t = next(&tokens)?;
        tokens.push(t);
    }
    Ok(*tokens.last().expect("nonempty"))
}

fn is_cot(seq: &BitSequence) -> bool {
    matches!(seq.layout(), crate::parity_data::Layout::Cot { .. })
}

fn simplified_eval_one(proj: &Projection, task: &ParityTask, seq: &BitSequence) -> Result<OneEval> {
    let tr = proj.forward(seq.bits());
    let targets = scored_targets(seq)?;
    let tf_correct = targets.iter().filter(|&&(p, t)| predict_value(tr.y[p - 1]) == t).count();
    let all = tf_correct == targets.len();
    let ar_ok = all || {
        let cot = is_cot(seq);
        let ans = greedy_answer(task, seq.input(), cot, |toks| {
            Ok(predict_value(*proj.forward(toks).y.last().expect("nonempty")))
        })?;
        cot && ans == seq.answer()
    };
    Ok(OneEval { tf_correct, tf_total: targets.len(), ar_ok, entropies: vec![entropy_of_valid(&tr.pattern)] })
}

fn standard_eval_one(params: &GPTParams, task: &ParityTask, seq: &BitSequence) -> Result<OneEval> {
    let out = gpt_forward(params, seq.bits())?;
    let targets = scored_targets(seq)?;
    let tf_correct = targets
        .iter()
        .filter(|&&(p, t)| greedy_token(out.logits[(0, p - 1)], out.logits[(1, p - 1)]) == t)
        .count();
    let all = tf_correct == targets.len();
    let ar_ok = all || {
        let cot = is_cot(seq);
        let ans = greedy_answer(task, seq.input(), cot, |toks| {
            let o = gpt_forward(params, toks)?;
            let last = toks.len() - 1;
            Ok(greedy_token(o.logits[(0, last)], o.logits[(1, last)]))
        })?;
        cot && ans == seq.answer()
    };
    Ok(OneEval {
        tf_correct,
        tf_total: targets.len(),
        ar_ok,
        entropies: out.patterns.iter().map(entropy_of_valid).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaltReason {
    Perfect,
    BudgetExceeded,
    Diverged,
}

impl fmt::Display for HaltReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HaltReason::Perfect => "perfect",
            HaltReason::BudgetExceeded => "budget-exceeded",
            HaltReason::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub samples_seen: u64,
    /// Mean training loss over the steps since the previous row.
    pub loss: Option<f64>,
    pub tf_acc: f64,
    pub ar_acc: f64,
    pub entropies: Vec<f64>,
}

impl EvalRow {
    pub fn min_entropy(&self) -> f64 {
        self.entropies.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot {
    pub step: u64,
    pub patterns: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub layers: usize,
    pub heads: usize,
    pub rows: Vec<EvalRow>,
    pub halt: HaltReason,
    pub samples_at_perfect: Option<u64>,
    pub steps: u64,
    pub samples_seen: u64,
    pub snapshots: Vec<AttentionSnapshot>,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,samples_seen,loss,tf_acc,ar_acc,min_entropy");
        for l in 0..self.layers {
            for h in 0..self.heads {
                s.push_str(&format!(",ent_L{l}H{h}"));
            }
        }
        s.push('\n');
        for r in &self.rows {
            let loss = r.loss.map(fmt_f64).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}",
                r.step,
                r.samples_seen,
                loss,
                fmt_f64(r.tf_acc),
                fmt_f64(r.ar_acc),
                fmt_f64(r.min_entropy())
            ));
            for e in &r.entropies {
                s.push(',');
                s.push_str(&fmt_f64(*e));
            }
            s.push('\n');
        }
        s
    }

    /// First row whose autoregressive accuracy is 1.
    pub fn first_perfect(&self) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.ar_acc == 1.0)
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub task: ParityTask,
    pub learner: Learner,
    pub record: RunRecord,
}

fn learning_rate(config: &TrainConfig, step_index: u64, total: u64) -> f64 {
    match config.lr_schedule {
        LrSchedule::Constant => config.lr,
        LrSchedule::LinearDecay => {
            if total == 0 {
                config.lr
            } else {
                config.lr * (1.0 - step_index as f64 / total as f64)
            }
        }
    }
}

fn train_loop(
    config: &TrainConfig,
    task: &ParityTask,
    learner: &mut Learner,
    val: &[BitSequence],
    total_steps: u64,
    mut next_batch: impl FnMut() -> Vec<BitSequence>,
) -> Result<RunRecord> {
    let (layers, heads) = learner.layers_heads();
    let mut rec = RunRecord {
        layers,
        heads,
        rows: Vec::new(),
        halt: HaltReason::BudgetExceeded,
        samples_at_perfect: None,
        steps: 0,
        samples_seen: 0,
        snapshots: Vec::new(),
    };
    let snapshot = |rec: &mut RunRecord, learner: &Learner, step: u64| -> Result<()> {
        if config.attn_snapshot_steps.contains(&step) {
            rec.snapshots.push(AttentionSnapshot { step, patterns: learner.attention(val[0].bits())? });
        }
        Ok(())
    };
    let eval_row = |rec: &mut RunRecord, learner: &Learner, loss: Option<f64>| -> Result<bool> {
        let st = learner.evaluate(task, val)?;
        let perfect = st.ar_acc == 1.0;
        if perfect && rec.samples_at_perfect.is_none() {
            rec.samples_at_perfect = Some(rec.samples_seen);
        }
        rec.rows.push(EvalRow {
            step: rec.steps,
            samples_seen: rec.samples_seen,
            loss,
            tf_acc: st.tf_acc,
            ar_acc: st.ar_acc,
            entropies: st.entropies,
        });
        Ok(perfect)
    };

    snapshot(&mut rec, learner, 0)?;
    if eval_row(&mut rec, learner, None)? && config.halt_on_perfect {
        rec.halt = HaltReason::Perfect;
        return Ok(rec);
    }
    let (mut loss_sum, mut loss_count) = (0.0, 0u64);
    for step_index in 0..total_steps {
        let batch = next_batch();
        let lr = learning_rate(config, step_index, total_steps);
        let loss = learner.step(&batch, lr)?;
        rec.steps += 1;
        rec.samples_seen += batch.len() as u64;
        if !loss.is_finite() || !learner.is_finite() {
            rec.halt = HaltReason::Diverged;
            return Ok(rec);
        }
        loss_sum += loss;
        loss_count += 1;
        let step = rec.steps;
        snapshot(&mut rec, learner, step)?;
        if rec.steps % config.eval_every == 0 || rec.steps == total_steps {
            let mean = loss_sum / loss_count as f64;
            (loss_sum, loss_count) = (0.0, 0);
            if eval_row(&mut rec, learner, Some(mean))? && config.halt_on_perfect {
                rec.halt = HaltReason::Perfect;
                return Ok(rec);
            }
        }
    }
    rec.halt = if rec.samples_at_perfect.is_some() { HaltReason::Perfect } else { HaltReason::BudgetExceeded };
    Ok(rec)
}

/// One-pass training: every step draws a fresh batch from the training stream.
pub fn run_online_sgd(config: &TrainConfig) -> Result<RunOutcome> {
    config.validate()?;
    if config.passes != 1 {
        return Err(Error::Config(format!("online training needs passes = 1, got {}", config.passes)));
    }
    let task = build_task(config)?;
    let mut learner = Learner::new(config, &task)?;
    let val = validation_set(config, &task);
    let mut rng = RngStream::new(config.seed, streams::TRAIN);
    let record = train_loop(config, &task, &mut learner, &val, config.total_steps(), || {
        gen_batch(&task, config.cot, config.batch_size, &mut rng)
    })?;
    Ok(RunOutcome { task, learner, record })
}

/// Per-epoch visiting order of a multi-pass run.
pub fn epoch_order(seed: u64, epoch: u64, len: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        RngStream::new(derive_seed(seed, &[epoch]), streams::SHUFFLE).shuffle(&mut order);
    }
    order
}

/// Multi-pass training over a fixed dataset, `config.passes` epochs.
pub fn run_multipass(config: &TrainConfig, dataset: &[BitSequence]) -> Result<RunOutcome> {
    let mut cfg = config.clone();
    cfg.dataset_size = dataset.len();
    let passes_ok = cfg.passes >= 1;
    if !passes_ok {
        return Err(Error::Config("passes must be >= 1".into()));
    }
    let mut check = cfg.clone();
    check.passes = check.passes.max(2);
    check.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("empty training dataset"));
    }
    let task = build_task(&cfg)?;
    if let Some(bad) = dataset.iter().position(|s| !crate::parity_data::verify_sequence(&task, s)) {
        return Err(invalid!("dataset sequence {bad} does not belong to the run's task"));
    }
    let mut learner = Learner::new(&cfg, &task)?;
    let val = validation_set(&cfg, &task);
    let per_epoch = dataset.len().div_ceil(cfg.batch_size) as u64;
    let total = cfg.passes * per_epoch;
    let (mut epoch, mut cursor) = (0u64, 0usize);
    let mut order = epoch_order(cfg.seed, 0, dataset.len(), cfg.shuffle);
    let record = train_loop(&cfg, &task, &mut learner, &val, total, || {
        if cursor >= dataset.len() {
            epoch += 1;
            cursor = 0;
            order = epoch_order(cfg.seed, epoch, dataset.len(), cfg.shuffle);
        }
        let end = (cursor + cfg.batch_size).min(dataset.len());
        let batch = order[cursor..end].iter().map(|&i| dataset[i].clone()).collect();
        cursor = end;
        batch
    })?;
    Ok(RunOutcome { task, learner, record })
}

/// Runs the configured protocol: one-pass when `passes == 1`, otherwise
/// multi-pass over the training stream's first `dataset_size` draws.
pub fn run(config: &TrainConfig) -> Result<RunOutcome> {
    if config.passes == 1 {
        run_online_sgd(config)
    } else {
        config.validate()?;
        let task = build_task(config)?;
        let data = training_dataset(config, &task);
        run_multipass(config, &data)
    }
}

/// Samples seen at the first perfect evaluation of a one-pass run.
pub fn measure_sample_complexity(config: &TrainConfig) -> Result<(Option<u64>, HaltReason)> {
    let mut cfg = config.clone();
    cfg.halt_on_perfect = true;
    let out = run_online_sgd(&cfg)?;
    Ok((out.record.samples_at_perfect, out.record.halt))
}

// ---------------------------------------------------------------------------
// three-phase schedule for the simplified model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySchedule {
    pub delta: f64,
    pub eps: f64,
    pub batch: usize,
    pub lr0: f64,
    pub lr1: f64,
    pub lr2: f64,
    pub scale: f64,
}

/// `C2 n log^20(n / delta)` with `C2 = 1.28e7 / eps^2`.
pub fn theory_batch_literal(n: usize, delta: f64, eps: f64) -> f64 {
    let c2 = 1.28e7 / (eps * eps);
    c2 * n as f64 * (n as f64 / delta).ln().powi(20)
}

/// Scale that turns the literal batch at `n = 30` into 4096.
pub fn default_theory_scale(delta: f64, eps: f64) -> f64 {
    4096.0 / theory_batch_literal(30, delta, eps)
}

pub fn compute_theory_schedule(n: usize, k: usize, m: usize, delta: f64, eps: f64, scale: f64) -> Result<TheorySchedule> {
    if n < 2 || k == 0 || m == 0 || !(delta > 0.0) || !(eps > 0.0) || !(scale > 0.0 && scale <= 1.0) {
        return Err(invalid!("need n >= 2, k, m >= 1, delta, eps > 0 and scale in (0, 1]"));
    }
    let batch = (theory_batch_literal(n, delta, eps) * scale).round().max(64.0);
    if !batch.is_finite() || batch > 1e9 {
        return Err(invalid!("scaled batch {batch} is not feasible; lower the scale"));
    }
    let (lr0, lr2) = theory_rates(n, k, m, delta, eps, batch);
    Ok(TheorySchedule { delta, eps, batch: batch as usize, lr0, lr1: lr0, lr2, scale })
}

/// `(lr0 = lr1, lr2)` for a given batch size.
pub fn theory_rates(n: usize, k: usize, m: usize, delta: f64, eps: f64, batch: f64) -> (f64, f64) {
    let lr0 = m as f64 * eps * batch.sqrt() / (100.0 * (n as f64 / delta).ln());
    (lr0, 4.0 * k as f64 * eps / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryPhase {
    pub steps: u64,
    pub lr: f64,
    pub update: UpdateScope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub n: usize,
    pub k: usize,
    pub order: OrderPolicy,
    pub embed_dim: usize,
    pub ffn_half_width: usize,
    pub delta: f64,
    pub init_scale: f64,
    /// Multiplier on the literal batch; the `n = 30 -> 4096` value when absent.
    pub scale: Option<f64>,
    /// Phased multi-step variant instead of exactly three steps.
    pub relaxed: bool,
    pub batch_size: usize,
    pub phases: Vec<TheoryPhase>,
    pub eval_every: u64,
    pub val_size: usize,
    pub seed: u64,
    pub one_hot_tol: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            n: 20,
            k: 5,
            order: OrderPolicy::Ascending,
            embed_dim: 256,
            ffn_half_width: 32,
            delta: 0.1,
            init_scale: 0.1,
            scale: None,
            relaxed: true,
            batch_size: 512,
            phases: default_relaxed_phases(),
            eval_every: 100,
            val_size: 2048,
            seed: 0,
            one_hot_tol: 0.1,
        }
    }
}

/// Phase lengths and rates of the relaxed variant.
pub fn default_relaxed_phases() -> Vec<TheoryPhase> {
    vec![
        TheoryPhase { steps: 10, lr: 10.0, update: UpdateScope::FfnReadout },
        TheoryPhase { steps: 20, lr: 1e5, update: UpdateScope::Attention },
        TheoryPhase { steps: 200, lr: 0.5, update: UpdateScope::Ffn },
    ]
}

#[derive(Clone, Debug)]
pub struct TheoryOutcome {
    pub relaxed: bool,
    pub schedule: TheorySchedule,
    pub task: ParityTask,
    pub emb: EmbeddingTable,
    pub params: SimplifiedParams,
    pub record: RunRecord,
    /// `dA` of the first step was exactly zero.
    pub first_step_attention_grad_zero: bool,
    /// FFN diagnostics after the first step.
    pub phase: PhaseDiagnostics,
    /// For every CoT position and bit, the strongest `Delta` row is `S[i]`.
    pub phase_points_to_secret: bool,
    /// One-hot check after the attention step (phase).
    pub one_hot_after_attention: VerificationReport,
    pub one_hot_final: VerificationReport,
    pub final_eval: EvalStats,
    pub h_unchanged: bool,
}

impl TheoryOutcome {
    pub fn report(&self) -> TheoryReport {
        TheoryReport {
            mode: if self.relaxed { "relaxed".into() } else { "three-step".into() },
            schedule: self.schedule.clone(),
            secret: self.task.secret().to_vec(),
            steps: self.record.steps,
            samples_seen: self.record.samples_seen,
            first_step_attention_grad_zero: self.first_step_attention_grad_zero,
            phase_points_to_secret: self.phase_points_to_secret,
            one_hot_after_attention: self.one_hot_after_attention.clone(),
            one_hot_final: self.one_hot_final.clone(),
            final_tf_acc: self.final_eval.tf_acc,
            final_ar_acc: self.final_eval.ar_acc,
            final_entropy: self.final_eval.min_entropy(),
            h_unchanged: self.h_unchanged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub mode: String,
    pub schedule: TheorySchedule,
    pub secret: Vec<usize>,
    pub steps: u64,
    pub samples_seen: u64,
    pub first_step_attention_grad_zero: bool,
    pub phase_points_to_secret: bool,
    pub one_hot_after_attention: VerificationReport,
    pub one_hot_final: VerificationReport,
    pub final_tf_acc: f64,
    pub final_ar_acc: f64,
    pub final_entropy: f64,
    pub h_unchanged: bool,
}

fn phase_points_to_secret(diag: &PhaseDiagnostics, task: &ParityTask) -> bool {
    (task.n() + 1..=task.n() + task.k())
        .all(|i| diag.strongest_index(i) == task.secret_at(i))
}

/// Runs the three-phase schedule. In the literal mode: exactly three
/// full-batch SGD steps with `(lr0, lr1, lr2)` on fresh CoT batches of the
/// scheduled size. In the relaxed mode: the configured phases.
pub fn run_theory(cfg: &TheoryConfig) -> Result<TheoryOutcome> {
    let mut rng_task = RngStream::new(cfg.seed, streams::TASK);
    let task = sample_secret_set(cfg.n, cfg.k, cfg.order, &mut rng_task)?;
    let emb = init_embeddings(cfg.n + cfg.k + 1, cfg.embed_dim, &mut RngStream::new(cfg.seed, streams::EMBEDDING))?;
    let scale = cfg.scale.unwrap_or_else(|| default_theory_scale(cfg.delta, cfg.init_scale));
    let schedule = compute_theory_schedule(cfg.n, cfg.k, cfg.ffn_half_width, cfg.delta, cfg.init_scale, scale)?;
    let params =
        init_params_structured(&task, &emb, cfg.ffn_half_width, cfg.init_scale, &mut RngStream::new(cfg.seed, streams::INIT))?;
    let val = gen_batch(&task, true, cfg.val_size, &mut RngStream::new(cfg.seed, streams::VALIDATION));
    let phases = if cfg.relaxed {
        if cfg.phases.len() != 3 || cfg.phases.iter().any(|p| p.steps == 0) {
            return Err(Error::Config("relaxed mode needs exactly three phases with at least one step each".into()));
        }
        cfg.phases.clone()
    } else {
        vec![
            TheoryPhase { steps: 1, lr: schedule.lr0, update: UpdateScope::All },
            TheoryPhase { steps: 1, lr: schedule.lr1, update: UpdateScope::All },
            TheoryPhase { steps: 1, lr: schedule.lr2, update: UpdateScope::All },
        ]
    };
    let batch_size = if cfg.relaxed { cfg.batch_size } else { schedule.batch };
    if batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be >= 1".into()));
    }
    run_phases(cfg, task, emb, params, schedule, &phases, batch_size, &val)
}

#[allow(clippy::too_many_arguments)]
fn run_phases(
    cfg: &TheoryConfig,
    task: ParityTask,
    emb: EmbeddingTable,
    params: SimplifiedParams,
    schedule: TheorySchedule,
    phases: &[TheoryPhase],
    batch_size: usize,
    val: &[BitSequence],
) -> Result<TheoryOutcome> {
    let h0 = params.h().to_vec();
    let mut learner = Learner::Simplified { params, emb, adam: None };
    let mut rng = RngStream::new(cfg.seed, streams::TRAIN);
    let mut rec = RunRecord {
        layers: 1,
        heads: 1,
        rows: Vec::new(),
        halt: HaltReason::BudgetExceeded,
        samples_at_perfect: None,
        steps: 0,
        samples_seen: 0,
        snapshots: Vec::new(),
    };
    let push_row = |rec: &mut RunRecord, learner: &Learner, loss: Option<f64>| -> Result<EvalStats> {
        let st = learner.evaluate(&task, val)?;
        if st.ar_acc == 1.0 && rec.samples_at_perfect.is_none() {
            rec.samples_at_perfect = Some(rec.samples_seen);
        }
        rec.rows.push(EvalRow {
            step: rec.steps,
            samples_seen: rec.samples_seen,
            loss,
            tf_acc: st.tf_acc,
            ar_acc: st.ar_acc,
            entropies: st.entropies.clone(),
        });
        Ok(st)
    };
    push_row(&mut rec, &learner, None)?;

    let mut first_zero = None;
    let mut phase_diag = None;
    let mut one_hot_attn = None;
    let mut last_stats = None;
    for (pi, phase) in phases.iter().enumerate() {
        let (mut loss_sum, mut loss_n) = (0.0, 0u64);
        for s in 0..phase.steps {
            let batch = gen_batch(&task, true, batch_size, &mut rng);
            if first_zero.is_none() {
                let Learner::Simplified { params, emb, .. } = &learner else { unreachable!() };
                let (_, g) = Projection::new(params, emb)?.batch_gradient(emb, &batch)?;
                first_zero = Some(g.da.data().iter().all(|&x| x == 0.0));
            }
            let loss = learner.step_scoped(&batch, phase.lr, phase.update)?;
            rec.steps += 1;
            rec.samples_seen += batch.len() as u64;
            if !loss.is_finite() || !learner.is_finite() {
                rec.halt = HaltReason::Diverged;
                return Err(Error::Config(format!("training diverged at step {}", rec.steps)));
            }
            loss_sum += loss;
            loss_n += 1;
            let last = s + 1 == phase.steps;
            if last || rec.steps % cfg.eval_every == 0 {
                let st = push_row(&mut rec, &learner, Some(loss_sum / loss_n as f64))?;
                (loss_sum, loss_n) = (0.0, 0);
                if last {
                    last_stats = Some(st);
                }
            }
        }
        let Learner::Simplified { params, emb, .. } = &learner else { unreachable!() };
        if pi == 0 {
            phase_diag = Some(phase_diagnostics(params, emb, &task)?);
        }
        if pi == 1 {
            one_hot_attn = Some(check_one_hot_attention(params, emb, &task, val, cfg.one_hot_tol)?);
        }
    }
    let Learner::Simplified { params, emb, .. } = learner else { unreachable!() };
    let one_hot_final = check_one_hot_attention(&params, &emb, &task, val, cfg.one_hot_tol)?;
    let phase = phase_diag.expect("three phases ran");
    rec.halt = if rec.samples_at_perfect.is_some() { HaltReason::Perfect } else { HaltReason::BudgetExceeded };
    Ok(TheoryOutcome {
        relaxed: cfg.relaxed,
        schedule,
        phase_points_to_secret: phase_points_to_secret(&phase, &task),
        phase,
        h_unchanged: params.h() == h0.as_slice(),
        first_step_attention_grad_zero: first_zero.unwrap_or(false),
        one_hot_after_attention: one_hot_attn.expect("three phases ran"),
        one_hot_final,
        final_eval: last_stats.expect("three phases ran"),
        task,
        emb,
        params,
        record: rec,
    })
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub base: TrainConfig,
    pub k_values: Vec<usize>,
    pub lrs: Vec<f64>,
    /// Seeds per cell.
    pub seeds: u64,
    pub cot_values: Vec<bool>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base: TrainConfig::default(),
            k_values: vec![1, 2, 3],
            lrs: vec![3e-4, 1e-3],
            seeds: 3,
            cot_values: vec![true, false],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub k: usize,
    pub cot: bool,
    pub lr: f64,
    pub seed: u64,
    pub samples_at_perfect: Option<u64>,
    /// `perfect`, `budget-exceeded` or `error: ...`.
    pub halt_reason: String,
}

/// Seed of the run for grid cell `(k, lr index, seed index)`; shared by the
/// CoT and no-CoT variants of the cell.
pub fn cell_seed(base: u64, k: usize, lr_index: usize, seed_index: u64) -> u64 {
    derive_seed(base, &[k as u64, lr_index as u64, seed_index])
}

pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    sweep_with_progress(cfg, |_| {})
}

/// [`sweep`], calling `on_row` as each run finishes (in completion order).
pub fn sweep_with_progress(cfg: &SweepConfig, on_row: impl Fn(&SweepRow) + Sync) -> Result<Vec<SweepRow>> {
    if cfg.k_values.is_empty() || cfg.lrs.is_empty() || cfg.seeds == 0 || cfg.cot_values.is_empty() {
        return Err(Error::Config("sweep grids must be nonempty".into()));
    }
    let mut cells = Vec::new();
    for &k in &cfg.k_values {
        for &cot in &cfg.cot_values {
            for (li, &lr) in cfg.lrs.iter().enumerate() {
                for si in 0..cfg.seeds {
                    cells.push((k, cot, lr, cell_seed(cfg.base.seed, k, li, si)));
                }
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(k, cot, lr, seed)| {
            let mut c = cfg.base.clone();
            c.k = k;
            c.cot = cot;
            c.lr = lr;
            c.seed = seed;
            c.passes = 1;
            let (samples, halt) = match measure_sample_complexity(&c) {
                Ok((s, HaltReason::Perfect)) => (s, HaltReason::Perfect.to_string()),
                Ok(_) => (None, HaltReason::BudgetExceeded.to_string()),
                Err(e) => (None, format!("error: {e}")),
            };
            let row = SweepRow { n: c.n, k, cot, lr, seed, samples_at_perfect: samples, halt_reason: halt };
            on_row(&row);
            row
        })
        .collect();
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n,k,cot,lr,seed,samples_at_perfect,halt_reason\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.n,
            r.k,
            r.cot,
            fmt_f64(r.lr),
            r.seed,
            r.samples_at_perfect.map(|v| v.to_string()).unwrap_or_default(),
            csv_field(&r.halt_reason)
        ));
    }
    s
}

/// Median with unfinished runs counted as infinitely large.
pub fn censored_median(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.map_or(f64::INFINITY, |s| s as f64)).collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mid = v.len() / 2;
    let m = if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) };
    m.is_finite().then_some(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub cot: bool,
    pub best_lr: Option<f64>,
    /// Best-over-lr median; `None` when every lr's median is unfinished.
    pub median_samples: Option<f64>,
}

/// Per `(k, cot)`: the smallest over learning rates of the median over seeds.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepCell> {
    let mut keys: Vec<(usize, bool)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.k, r.cot)) {
            keys.push((r.k, r.cot));
        }
    }
    keys.into_iter()
        .map(|(k, cot)| {
            let mut lrs: Vec<f64> = Vec::new();
            for r in rows.iter().filter(|r| r.k == k && r.cot == cot) {
                if !lrs.contains(&r.lr) {
                    lrs.push(r.lr);
                }
            }
            let mut best: (Option<f64>, Option<f64>) = (None, None);
            for lr in lrs {
                let vals: Vec<Option<u64>> = rows
                    .iter()
                    .filter(|r| r.k == k && r.cot == cot && r.lr == lr)
                    .map(|r| r.samples_at_perfect)
                    .collect();
                if let Some(m) = censored_median(&vals) {
                    if best.1.is_none_or(|b| m < b) {
                        best = (Some(lr), Some(m));
                    }
                }
            }
            SweepCell { k, cot, best_lr: best.0, median_samples: best.1 }
        })
        .collect()
}

pub fn summary_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("k,cot,best_lr,median_samples_at_perfect\n");
    for c in cells {
        s.push_str(&format!(
            "{},{},{},{}\n",
            c.k,
            c.cot,
            c.best_lr.map(fmt_f64).unwrap_or_default(),
            c.median_samples.map(fmt_f64).unwrap_or_default()
        ));
    }
    s
}
