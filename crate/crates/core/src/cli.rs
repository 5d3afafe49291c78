//! Command-line front end: config merging, run directories, exit codes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics_diagnostics::{average_entropy, export_attention, AttentionRecord};
use crate::numerics::RngStream;
use crate::parity_data::{
    gen_batch, read_dataset, sample_secret_set, write_dataset, DatasetMeta, OrderPolicy, DATASET_FORMAT_VERSION,
};
use crate::simplified_model::{init_embeddings, Projection, SimplifiedCheckpoint};
use crate::standard_model::GptCheckpoint;
use crate::theory_construct::{build_construction_weights, default_margin, verify_perfect_accuracy, VerifyMode};
use crate::training_harness::{
    apply_overrides, run, run_multipass, run_theory, streams, summarize_sweep, summary_csv, sweep_with_progress,
    sweep_csv, HaltReason, SweepConfig, TheoryConfig, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "paritylab", version, about = "Parity learning with and without chain-of-thought")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Seed; overrides the config's `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output root.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` override, value parsed as JSON when possible. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory name under the output root.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write sampled sequences and their metadata sidecar.
    Gen(GenArgs),
    /// Train a model from a config; exit 0 on perfect accuracy, 2 on budget.
    Train(TrainArgs),
    /// Build the explicit no-CoT weights and verify them.
    VerifyConstruction(VerifyArgs),
    /// Three-phase schedule of the simplified model.
    ThreeStep(ThreeStepArgs),
    /// Grid over k, learning rate, seeds and CoT.
    Sweep,
    /// Mean normalized attention entropy of a checkpoint on a dataset.
    Entropy(EntropyArgs),
    /// Summary of a finished run directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub cot: bool,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = OrderArg::Ascending)]
    pub order: OrderArg,
    /// File name inside the output root.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OrderArg {
    Ascending,
    Random,
}

impl From<OrderArg> for OrderPolicy {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Ascending => OrderPolicy::Ascending,
            OrderArg::Random => OrderPolicy::Random,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Train multi-pass over this dataset file instead of sampling one.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Exhaustive,
    Sampled,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Exhaustive)]
    pub mode: ModeArg,
    /// Inputs drawn in sampled mode.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Multiplier on the default attention margin `40 ln n`.
    #[arg(long, default_value_t = 1.0)]
    pub margin_mult: f64,
}

#[derive(Args, Debug)]
pub struct ThreeStepArgs {
    /// Literal three single steps with the scheduled batch instead of the
    /// relaxed phases.
    #[arg(long)]
    pub literal: bool,
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directory.
    #[arg(long)]
    pub run: PathBuf,
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::IllConditioned { .. } = e {
                eprintln!("hint: increase --d or try another --seed");
            }
            EXIT_ERROR
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let threads = cli.global.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => cmd_gen(g, a),
        Command::Train(a) => cmd_train(g, a),
        Command::VerifyConstruction(a) => cmd_verify_construction(g, a),
        Command::ThreeStep(a) => cmd_three_step(g, a),
        Command::Sweep => cmd_sweep(g),
        Command::Entropy(a) => cmd_entropy(g, a),
        Command::Report(a) => cmd_report(a),
    }
}

/// File values, then `--set`, then `--seed` at `seed_key`.
pub fn merged_config<T: Serialize + DeserializeOwned + Default>(g: &GlobalOpts, seed_key: &str) -> Result<T> {
    let base: T = crate::training_harness::load_config(g.config.as_deref())?;
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("{seed_key}={s}"));
    }
    apply_overrides(&base, &overrides)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_pretty_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn run_dir(g: &GlobalOpts, default_id: String) -> Result<PathBuf> {
    let id = g.run_id.clone().unwrap_or(default_id);
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Config(format!("invalid run id `{id}`")));
    }
    let dir = g.out_dir.join(id);
    create_dir(&dir)?;
    Ok(dir)
}

pub fn cmd_gen(g: &GlobalOpts, a: &GenArgs) -> Result<i32> {
    if a.count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    let seed = g.seed.unwrap_or(0);
    let task = sample_secret_set(a.n, a.k, a.order.into(), &mut RngStream::new(seed, streams::TASK))?;
    let seqs = gen_batch(&task, a.cot, a.count, &mut RngStream::new(seed, streams::TRAIN));
    let name = a.name.clone().unwrap_or_else(|| {
        format!("gen_n{}_k{}_{}_s{seed}.txt", a.n, a.k, if a.cot { "cot" } else { "nocot" })
    });
    if name.contains(['/', '\\']) {
        return Err(Error::Config(format!("--name `{name}` must be a plain file name")));
    }
    create_dir(&g.out_dir)?;
    let path = g.out_dir.join(name);
    let meta = DatasetMeta {
        n: a.n,
        k: a.k,
        secret: task.secret().to_vec(),
        order: task.order().to_vec(),
        cot: a.cot,
        count: a.count,
        seed,
        format_version: DATASET_FORMAT_VERSION,
    };
    write_dataset(&path, &meta, &seqs)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn default_train_id(c: &TrainConfig) -> String {
    let model = serde_json::to_value(c.model).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    format!("train_{model}_n{}_k{}_{}_s{}", c.n, c.k, if c.cot { "cot" } else { "nocot" }, c.seed)
}

pub fn cmd_train(g: &GlobalOpts, a: &TrainArgs) -> Result<i32> {
    let mut config: TrainConfig = merged_config(g, "seed")?;
    let dataset = match &a.data {
        None => None,
        Some(p) => {
            let (meta, _, seqs) = read_dataset(p)?;
            if meta.n != config.n || meta.k != config.k || meta.cot != config.cot {
                return Err(Error::Config(format!(
                    "dataset (n={}, k={}, cot={}) does not match the config (n={}, k={}, cot={})",
                    meta.n, meta.k, meta.cot, config.n, config.k, config.cot
                )));
            }
            config.secret = Some(meta.secret.clone());
            config.dataset_size = seqs.len();
            Some(seqs)
        }
    };
    config.validate()?;
    let dir = run_dir(g, default_train_id(&config))?;
    write_text(&dir.join("config.json"), &to_pretty_json(&config))?;
    let outcome = match &dataset {
        Some(d) => {
            if config.passes < 2 {
                return Err(Error::Config("training from --data needs passes >= 2".into()));
            }
            run_multipass(&config, d)?
        }
        None => run(&config)?,
    };
    write_text(&dir.join("metrics.csv"), &outcome.record.metrics_csv())?;
    write_text(&dir.join("checkpoint.final"), &outcome.learner.checkpoint_json(&outcome.task, config.seed)?)?;
    if !outcome.record.snapshots.is_empty() {
        let attn = dir.join("attn");
        create_dir(&attn)?;
        let heads = outcome.record.heads;
        for snap in &outcome.record.snapshots {
            for (idx, pattern) in snap.patterns.iter().enumerate() {
                let (l, h) = (idx / heads, idx % heads);
                let rec = AttentionRecord::new(l, h, 0, pattern.clone())?;
                export_attention(&rec, &outcome.task, &attn.join(format!("step_{}_L{l}H{h}.csv", snap.step)))?;
            }
        }
    }
    let rec = &outcome.record;
    println!(
        "{}: halt={} steps={} samples={} samples_at_perfect={}",
        dir.display(),
        rec.halt,
        rec.steps,
        rec.samples_seen,
        rec.samples_at_perfect.map(|s| s.to_string()).unwrap_or_else(|| "-".into())
    );
    Ok(match rec.halt {
        HaltReason::Perfect => EXIT_OK,
        HaltReason::BudgetExceeded => EXIT_BUDGET,
        HaltReason::Diverged => EXIT_ERROR,
    })
}

pub fn cmd_verify_construction(g: &GlobalOpts, a: &VerifyArgs) -> Result<i32> {
    if !(a.margin_mult > 0.0 && a.margin_mult.is_finite()) {
        return Err(Error::Config("--margin-mult must be positive".into()));
    }
    let seed = g.seed.unwrap_or(0);
    let task = sample_secret_set(a.n, a.k, OrderPolicy::Ascending, &mut RngStream::new(seed, streams::TASK))?;
    let emb = init_embeddings(a.n + 1, a.d, &mut RngStream::new(seed, streams::EMBEDDING))?;
    let margin = a.margin_mult * default_margin(a.n);
    let (params, parts) = build_construction_weights(&task, &emb, margin)?;
    let mode = match a.mode {
        ModeArg::Exhaustive => VerifyMode::Exhaustive,
        ModeArg::Sampled => VerifyMode::Sampled(a.samples),
    };
    let report =
        verify_perfect_accuracy(&params, &emb, &task, mode, &mut RngStream::new(seed, streams::VALIDATION))?;
    create_dir(&g.out_dir)?;
    let path = g.out_dir.join(format!("verify_n{}_k{}_d{}_s{seed}.json", a.n, a.k, a.d));
    let doc = serde_json::json!({
        "n": a.n,
        "k": a.k,
        "d": a.d,
        "seed": seed,
        "secret": task.secret(),
        "margin": margin,
        "ffn_half_width": parts.m,
        "condition_number": parts.condition,
        "report": report,
    });
    write_text(&path, &to_pretty_json(&doc))?;
    println!(
        "accuracy={} inputs={} min_margin={:.6e} max_leak={:.6e} -> {}",
        report.accuracy,
        report.inputs_tested,
        report.min_margin,
        report.max_leak,
        path.display()
    );
    Ok(if report.accuracy == 1.0 { EXIT_OK } else { EXIT_BUDGET })
}

pub fn cmd_three_step(g: &GlobalOpts, a: &ThreeStepArgs) -> Result<i32> {
    let mut cfg: TheoryConfig = merged_config(g, "seed")?;
    if a.literal {
        cfg.relaxed = false;
    }
    let mode = if cfg.relaxed { "relaxed" } else { "literal" };
    let dir = run_dir(g, format!("three_step_{mode}_n{}_k{}_s{}", cfg.n, cfg.k, cfg.seed))?;
    write_text(&dir.join("config.json"), &to_pretty_json(&cfg))?;
    let out = run_theory(&cfg)?;
    let report = out.report();
    write_text(&dir.join("metrics.csv"), &out.record.metrics_csv())?;
    write_text(&dir.join("report.json"), &to_pretty_json(&report))?;
    SimplifiedCheckpoint::new(&out.task, &out.params, &out.emb, cfg.seed).save(&dir.join("checkpoint.final"))?;
    let ok = report.final_ar_acc == 1.0 && report.one_hot_final.passed();
    println!(
        "{}: mode={} ar_acc={} one_hot={} phase_points_to_secret={} -> {}",
        report.mode,
        mode,
        report.final_ar_acc,
        report.one_hot_final.passed(),
        report.phase_points_to_secret,
        dir.display()
    );
    Ok(if ok { EXIT_OK } else { EXIT_BUDGET })
}

pub fn cmd_sweep(g: &GlobalOpts) -> Result<i32> {
    let cfg: SweepConfig = merged_config(g, "base.seed")?;
    let dir = run_dir(g, format!("sweep_n{}_s{}", cfg.base.n, cfg.base.seed))?;
    write_text(&dir.join("config.json"), &to_pretty_json(&cfg))?;
    let rows = sweep_with_progress(&cfg, |r| {
        let got = r.samples_at_perfect.map_or_else(|| r.halt_reason.clone(), |x| x.to_string());
        eprintln!("k={} cot={} lr={} seed={}: {got}", r.k, r.cot, r.lr, r.seed);
    })?;
    write_text(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
    let summary = summarize_sweep(&rows);
    write_text(&dir.join("summary.csv"), &summary_csv(&summary))?;
    print!("{}", summary_csv(&summary));
    Ok(EXIT_OK)
}

pub fn cmd_entropy(g: &GlobalOpts, a: &EntropyArgs) -> Result<i32> {
    let (_, _, seqs) = read_dataset(&a.data)?;
    let report = match SimplifiedCheckpoint::load(&a.checkpoint) {
        Ok(ck) => {
            let (params, emb) = ck.into_parts()?;
            average_entropy(&Projection::new(&params, &emb)?, &seqs)?
        }
        Err(simplified_err) => match GptCheckpoint::load(&a.checkpoint) {
            Ok(ck) => average_entropy(&ck.into_params()?, &seqs)?,
            Err(_) => return Err(simplified_err),
        },
    };
    create_dir(&g.out_dir)?;
    let stem = a.checkpoint.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    let path = g.out_dir.join(format!("entropy_{}.csv", stem.unwrap_or_else(|| "checkpoint".into())));
    report.write_csv(&path)?;
    print!("{}", report.to_csv());
    Ok(EXIT_OK)
}

/// Reads `metrics.csv` (and `report.json` when present) of a run directory.
pub fn run_summary(dir: &Path) -> Result<Value> {
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::parse(&path, "empty metrics file"))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| Error::parse(&path, format!("missing column {name}")));
    let (ci_step, ci_samples, ci_ar, ci_ent) = (col("step")?, col("samples_seen")?, col("ar_acc")?, col("min_entropy")?);
    let mut rows: Vec<Vec<String>> = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        rows.push(l.split(',').map(String::from).collect());
    }
    let num = |r: &Vec<String>, c: usize| -> Result<f64> {
        r.get(c).and_then(|s| s.parse().ok()).ok_or_else(|| Error::parse(&path, format!("bad value in column {}", header[c])))
    };
    let first = rows.first().ok_or_else(|| Error::parse(&path, "no evaluation rows"))?;
    let last = rows.last().expect("nonempty");
    let perfect = rows.iter().find(|r| num(r, ci_ar).map(|v| v == 1.0).unwrap_or(false));
    let mut doc = serde_json::json!({
        "run": dir.display().to_string(),
        "evaluations": rows.len(),
        "final_step": num(last, ci_step)?,
        "final_samples_seen": num(last, ci_samples)?,
        "final_ar_acc": num(last, ci_ar)?,
        "initial_min_entropy": num(first, ci_ent)?,
        "final_min_entropy": num(last, ci_ent)?,
        "first_perfect_samples": match perfect { Some(r) => Value::from(num(r, ci_samples)?), None => Value::Null },
        "min_entropy_at_first_perfect": match perfect { Some(r) => Value::from(num(r, ci_ent)?), None => Value::Null },
    });
    let rp = dir.join("report.json");
    if rp.exists() {
        let text = std::fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::parse(&rp, e))?;
        doc["three_step"] = v;
    }
    Ok(doc)
}

pub fn cmd_report(a: &ReportArgs) -> Result<i32> {
    print!("{}", to_pretty_json(&run_summary(&a.run)?));
    Ok(EXIT_OK)
}
