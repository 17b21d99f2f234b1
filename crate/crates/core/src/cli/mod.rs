//! Single entry-point binary: corpus synthesis, vocabulary building,
//! pretraining, fine-tuning, evaluation, invariant checks, and the two study
//! commands (objective ablation, data scaling).
//!
//! Conventions shared by every subcommand:
//! - config files are flat `key=value` text; repeated `--set key=value` flags
//!   override file entries, and explicit flags (`--objective`, `--seed`)
//!   override both;
//! - one `--seed` feeds every random stream, stretched per component;
//! - each output directory receives exactly one `manifest.txt` recording the
//!   fully resolved configuration and the content hash of every input file;
//! - exit codes: 0 success, 1 invariant failure, 2 configuration/data error;
//! - `CLOZE_NUM_THREADS` caps worker fan-out (grid cells, study cells).
//!
//! Data directories hold `train.txt` and optionally `heldout.txt` in ingest
//! format. Vocabulary directories hold `vocab.txt` and, for subword models,
//! `codes.txt`; pretraining copies both into every checkpoint so checkpoints
//! are self-contained.

use crate::check::{run_suite, run_suite_on, Suite};
use crate::finetune::{
    encode_tagged, evaluate_labeled, finetune_task, parse_labeled, parse_tagged_raw, run_tagging,
    single_example, tagging_accuracy, FinetuneConfig, Label, LabeledExample, Metric, TagSet,
    TaskKind, TaskSpec,
};
use crate::manifest::{KvConfig, RunManifest};
use crate::model::{config_to_pairs, CombineMode, Model, ModelConfig, ParamSet};
use crate::objectives::{evaluate_perplexity, LossReport, Objective};
use crate::rng;
use crate::tensor::{read_tensor, write_tensor, Scalar};
use crate::text::{
    build_bpe, load_docs, make_examples, split_corpus, BpeCode, Codec, Example, ExampleMode,
    SynthKind, Vocab,
};
use crate::trainer::{
    latest_checkpoint, load_train_state, pretrain, run_pretrain, PretrainConfig, PretrainOutcome,
};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use serde_json::json;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "cloze",
    version,
    about = "Two-tower cloze pretraining and fine-tuning at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a vocabulary (plus merge table in bpe/char mode) from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Generate a synthetic corpus directory.
    Synth(SynthArgs),
    /// Pretrain a two-tower model on a corpus directory.
    Pretrain(PretrainArgs),
    /// Grid fine-tune a pretrained checkpoint on a task.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on a task split.
    Eval(EvalArgs),
    /// Run the executable invariant suites.
    Check(CheckArgs),
    /// Train every objective under one budget and tabulate the comparison.
    Ablate(AblateArgs),
    /// Pretrain at ascending token budgets and record the scaling curve.
    Datascale(DatascaleArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Corpus file in ingest format.
    #[arg(long)]
    input: PathBuf,
    /// bpe, word, or char.
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 30000)]
    merges: usize,
    /// Types seen fewer times than this are dropped (decomposed for bpe).
    #[arg(long, default_value_t = 3)]
    min_freq: u64,
    /// Output directory for vocab.txt (and codes.txt).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// neighbor-determined, ngram, or copy.
    #[arg(long)]
    kind: String,
    /// Content vocabulary size of the generated language.
    #[arg(long, default_value_t = 12)]
    vocab: usize,
    /// Lines in train.txt, grouped eight per document.
    #[arg(long, default_value_t = 512)]
    lines: usize,
    /// Lines in heldout.txt; 0 means lines/10, at least 1.
    #[arg(long, default_value_t = 0)]
    heldout_lines: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Flat key=value config file; omit for desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory with train.txt and optionally heldout.txt.
    #[arg(long)]
    data: PathBuf,
    /// cloze, bilm, or triplet.
    #[arg(long)]
    objective: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the newest checkpoint under --out.
    #[arg(long)]
    resume: bool,
    /// Override a config key, e.g. --set max_updates=200. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pretrained checkpoint directory (self-contained, with vocab.txt).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task spec file: kind/num_classes/metric plus data paths.
    #[arg(long)]
    task: PathBuf,
    /// "default" or a comma-separated list of learning rates.
    #[arg(long, default_value = "default")]
    grid: String,
    /// Number of seeds per learning rate (seeds 1..=N).
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
    /// Override a task-file key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Fine-tune output directory (or its best/ subdirectory).
    #[arg(long)]
    checkpoint: PathBuf,
    /// The task spec file the checkpoint was trained on.
    #[arg(long)]
    task: PathBuf,
    /// dev or test.
    #[arg(long)]
    split: String,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// leakage, causality, gradcheck, or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Trials per perturbation suite.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Run perturbation suites on this checkpoint instead of fresh models.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write check.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated objectives to compare.
    #[arg(long, default_value = "cloze,bilm,triplet")]
    objectives: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct DatascaleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated ascending token budgets, e.g. 10000,40000,160000.
    #[arg(long)]
    budgets: String,
    /// cloze, bilm, or triplet.
    #[arg(long, default_value = "cloze")]
    objective: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::BuildVocab(a) => cmd_build_vocab(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Datascale(a) => cmd_datascale(a),
    }
}

/// 1 for broken invariants, 2 for anything the caller can fix.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invariant(_) | Error::NonFinite(_) | Error::Shape { .. } => 1,
        Error::Config(_) | Error::Data(_) | Error::Io(_) | Error::Serde(_) => 2,
    }
}

// ---- shared plumbing ----

fn thread_cap() -> Result<usize> {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("CLOZE_NUM_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| {
                Error::Config(format!("CLOZE_NUM_THREADS must be a positive integer, got {v:?}"))
            })?;
            if n == 0 {
                return Err(Error::Config("CLOZE_NUM_THREADS must be positive".into()));
            }
            Ok(n.min(avail))
        }
        Err(_) => Ok(avail),
    }
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<KvConfig> {
    let mut kv = match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn reject_unknown(kv: &KvConfig, known: &[&str]) -> Result<()> {
    for (k, _) in kv.iter() {
        if !known.contains(&k) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(f))
}

fn read_docs(path: &Path) -> Result<Vec<Vec<String>>> {
    load_docs(&mut open_reader(path)?)
}

fn write_docs(path: &Path, docs: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        for line in doc {
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn content_tokens(docs: &[Vec<String>]) -> usize {
    docs.iter().flatten().map(|l| l.split_whitespace().count()).sum()
}

/// Load vocab.txt (+codes.txt if present) from a directory. Also returns the
/// file paths for manifest hashing.
fn load_codec(dir: &Path) -> Result<(Codec, Vec<(&'static str, PathBuf)>)> {
    let vpath = dir.join("vocab.txt");
    let vocab = Vocab::load(&mut open_reader(&vpath)?)?;
    let cpath = dir.join("codes.txt");
    if cpath.exists() {
        // min_frequency is build-time metadata; segmentation never reads it
        let code = BpeCode::load(&mut open_reader(&cpath)?, 0)?;
        Ok((Codec::Bpe { code, vocab }, vec![("vocab", vpath), ("codes", cpath)]))
    } else {
        Ok((Codec::Word(vocab), vec![("vocab", vpath)]))
    }
}

fn copy_vocab_into(vocab_dir: &Path, dest: &Path) -> Result<()> {
    std::fs::create_dir_all(dest)?;
    std::fs::copy(vocab_dir.join("vocab.txt"), dest.join("vocab.txt"))?;
    let codes = vocab_dir.join("codes.txt");
    if codes.exists() {
        std::fs::copy(&codes, dest.join("codes.txt"))?;
    }
    Ok(())
}

const DATA_KEYS: [&str; 3] = ["example_mode", "block_len", "vocab_dir"];
const TRAINER_KEYS: [&str; 10] = [
    "max_updates",
    "warmup_steps",
    "lr_peak",
    "lr_floor",
    "momentum",
    "grad_norm_threshold",
    "checkpoint_every",
    "eval_every",
    "max_tokens_per_batch",
    "accum_steps",
];
const MODEL_KEYS: [&str; 17] = [
    "vocab_size",
    "d_model",
    "n_blocks",
    "n_heads",
    "ffn_dim",
    "final_heads",
    "query_mode",
    "encoder",
    "classifier",
    "dropout",
    "attn_dropout",
    "relu_dropout",
    "max_len",
    "char_dim",
    "char_filters",
    "max_word_len",
    "bands",
];

fn pretrain_keys() -> Vec<&'static str> {
    let mut keys = Vec::new();
    keys.extend(DATA_KEYS);
    keys.extend(TRAINER_KEYS);
    keys.extend(MODEL_KEYS);
    keys
}

/// Materialize corpus-shaping defaults into `kv` and read them back.
fn resolve_data_opts(kv: &mut KvConfig, data_dir: &Path) -> Result<(ExampleMode, PathBuf)> {
    kv.set_default("example_mode", "sentence");
    kv.set_default("block_len", "512");
    let default_vocab = data_dir.to_str().ok_or_else(|| {
        Error::Config(format!("data path {} is not valid UTF-8", data_dir.display()))
    })?;
    kv.set_default("vocab_dir", default_vocab);
    let mode = match kv.require::<String>("example_mode")?.as_str() {
        "sentence" => ExampleMode::Sentence,
        "paragraph" => ExampleMode::Paragraph,
        "block" => ExampleMode::Block { len: kv.require("block_len")? },
        other => {
            return Err(Error::Config(format!(
                "unknown example_mode {other:?} (expected sentence, paragraph, or block)"
            )))
        }
    };
    Ok((mode, PathBuf::from(kv.require::<String>("vocab_dir")?)))
}

/// Desk model defaults, overridden by any model keys present in `kv`; the
/// resolved values are written back so the manifest shows every knob.
fn resolve_model(kv: &mut KvConfig, vocab_size: usize) -> Result<ModelConfig> {
    if kv.get("vocab_size").is_some() {
        return Err(Error::Config(
            "vocab_size is derived from the vocabulary file, not configured".into(),
        ));
    }
    for (k, v) in config_to_pairs(&ModelConfig::desk(vocab_size)) {
        kv.set_default(&k, &v);
    }
    let map: HashMap<String, String> =
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    crate::model::config_from_pairs(&map)
}

/// Desk training defaults, overridden by trainer keys in `kv`, written back.
fn resolve_trainer(kv: &mut KvConfig, objective: Objective, seed: u64) -> Result<PretrainConfig> {
    let mut cfg = PretrainConfig::desk(objective, seed);
    kv.set_default("max_updates", &cfg.max_updates.to_string());
    kv.set_default("warmup_steps", &cfg.warmup_steps.to_string());
    kv.set_default("lr_peak", &cfg.lr_peak.to_string());
    kv.set_default("lr_floor", &cfg.lr_floor.to_string());
    kv.set_default("momentum", &cfg.momentum.to_string());
    kv.set_default("grad_norm_threshold", &cfg.grad_norm_threshold.to_string());
    kv.set_default("checkpoint_every", &cfg.checkpoint_every.to_string());
    kv.set_default("eval_every", &cfg.eval_every.to_string());
    kv.set_default("max_tokens_per_batch", &cfg.max_tokens_per_batch.to_string());
    kv.set_default("accum_steps", &cfg.accum_steps.to_string());
    cfg.max_updates = kv.require("max_updates")?;
    cfg.warmup_steps = kv.require("warmup_steps")?;
    cfg.lr_peak = kv.require("lr_peak")?;
    cfg.lr_floor = kv.require("lr_floor")?;
    cfg.momentum = kv.require("momentum")?;
    cfg.grad_norm_threshold = kv.require("grad_norm_threshold")?;
    cfg.checkpoint_every = kv.require("checkpoint_every")?;
    cfg.eval_every = kv.require("eval_every")?;
    cfg.max_tokens_per_batch = kv.require("max_tokens_per_batch")?;
    cfg.accum_steps = kv.require("accum_steps")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Name/shape-manifested tensor file pair, same layout as model checkpoints.
fn save_params<T: Scalar>(dir: &Path, stem: &str, params: &ParamSet<T>) -> Result<()> {
    let mut mw = BufWriter::new(File::create(dir.join(format!("{stem}.manifest")))?);
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
        writeln!(mw, "{name}\t{}", dims.join("x"))?;
    }
    mw.flush()?;
    let mut bw = BufWriter::new(File::create(dir.join(format!("{stem}.bin")))?);
    for (_, t) in params.iter() {
        write_tensor(&mut bw, t)?;
    }
    bw.flush()?;
    Ok(())
}

fn load_params<T: Scalar>(dir: &Path, stem: &str) -> Result<ParamSet<T>> {
    let manifest = std::fs::read_to_string(dir.join(format!("{stem}.manifest")))?;
    let mut br = BufReader::new(File::open(dir.join(format!("{stem}.bin")))?);
    let mut out = ParamSet::new();
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| Error::Serde(format!("{stem} manifest line lacks a tab: {line:?}")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|s| s.parse().map_err(|_| Error::Serde(format!("bad extent in {line:?}"))))
            .collect::<Result<_>>()?;
        let t: crate::tensor::Tensor<T> = read_tensor(&mut br)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Serde(format!(
                "{stem} tensor {name:?} stored as {:?}, listed as {shape:?}",
                t.shape()
            )));
        }
        out.insert(name, t)?;
    }
    let mut probe = [0u8; 1];
    if std::io::Read::read(&mut br, &mut probe)? != 0 {
        return Err(Error::Serde(format!("trailing bytes after last tensor in {stem}.bin")));
    }
    Ok(out)
}

/// Fan `n` independent cells over up to `workers` threads; results land by
/// index, so the outcome is identical at any worker count.
fn parallel_cells<T: Send, F: Fn(usize) -> Result<T> + Sync>(
    n: usize,
    workers: usize,
    f: F,
) -> Result<Vec<T>> {
    let workers = workers.min(n).max(1);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    if workers <= 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(f(i));
        }
    } else {
        let gathered: Vec<(usize, Result<T>)> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let f = &f;
                    s.spawn(move || {
                        let mut out = Vec::new();
                        let mut i = w;
                        while i < n {
                            out.push((i, f(i)));
                            i += workers;
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("cell worker panicked")).collect()
        });
        for (i, r) in gathered {
            slots[i] = Some(r);
        }
    }
    slots.into_iter().map(|s| s.expect("every cell visited")).collect()
}

// ---- build-vocab ----

fn cmd_build_vocab(a: BuildVocabArgs) -> Result<ExitCode> {
    let docs = read_docs(&a.input)?;
    let mut kv = KvConfig::new();
    kv.set("mode", &a.mode);
    kv.set("merges", &a.merges.to_string());
    kv.set("min_freq", &a.min_freq.to_string());

    std::fs::create_dir_all(&a.output)?;
    let (vocab, n_merges) = match a.mode.as_str() {
        "word" => {
            let mut counts: HashMap<String, u64> = HashMap::new();
            for line in docs.iter().flatten() {
                for w in line.split_whitespace() {
                    *counts.entry(w.to_string()).or_insert(0) += 1;
                }
            }
            counts.retain(|_, c| *c >= a.min_freq);
            if counts.is_empty() {
                return Err(Error::Data(format!(
                    "no type occurs at least {} times",
                    a.min_freq
                )));
            }
            (Vocab::from_counts(&counts)?, 0)
        }
        "bpe" | "char" => {
            // zero merges leave every word as marked characters
            let merges = if a.mode == "char" { 0 } else { a.merges };
            let (code, vocab) = build_bpe(&docs, merges, a.min_freq)?;
            let mut w = BufWriter::new(File::create(a.output.join("codes.txt"))?);
            code.save(&mut w)?;
            w.flush()?;
            (vocab, code.merges().len())
        }
        other => {
            return Err(Error::Config(format!(
                "unknown mode {other:?} (expected bpe, word, or char)"
            )))
        }
    };
    let mut w = BufWriter::new(File::create(a.output.join("vocab.txt"))?);
    vocab.save(&mut w)?;
    w.flush()?;

    let mut manifest = RunManifest::begin("build-vocab", 0);
    manifest.record_config(&kv);
    manifest.record_input("corpus", &a.input)?;
    manifest.finish_to(&a.output)?;
    println!("{}", json!({"types": vocab.len(), "merges": n_merges}));
    Ok(ExitCode::SUCCESS)
}

// ---- synth ----

fn parse_synth_kind(name: &str, vocab: usize) -> Result<SynthKind> {
    match name {
        "neighbor-determined" => Ok(SynthKind::NeighborDetermined { vocab }),
        "ngram" => Ok(SynthKind::Ngram { vocab }),
        "copy" => Ok(SynthKind::Copy { vocab }),
        other => Err(Error::Config(format!(
            "unknown corpus kind {other:?} (expected neighbor-determined, ngram, or copy)"
        ))),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let kind = parse_synth_kind(&a.kind, a.vocab)?;
    if a.lines == 0 {
        return Err(Error::Config("--lines must be positive".into()));
    }
    let heldout_lines = if a.heldout_lines == 0 { (a.lines / 10).max(1) } else { a.heldout_lines };
    let (train, heldout) = split_corpus(kind, a.seed, a.lines, heldout_lines);

    std::fs::create_dir_all(&a.out)?;
    write_docs(&a.out.join("train.txt"), &train)?;
    write_docs(&a.out.join("heldout.txt"), &heldout)?;

    let mut kv = KvConfig::new();
    kv.set("kind", &a.kind);
    kv.set("vocab", &a.vocab.to_string());
    kv.set("lines", &a.lines.to_string());
    kv.set("heldout_lines", &heldout_lines.to_string());
    let mut manifest = RunManifest::begin("synth", a.seed);
    manifest.record_config(&kv);
    manifest.finish_to(&a.out)?;
    println!(
        "{}",
        json!({
            "train_docs": train.len(),
            "train_tokens": content_tokens(&train),
            "heldout_docs": heldout.len(),
            "heldout_tokens": content_tokens(&heldout),
        })
    );
    Ok(ExitCode::SUCCESS)
}

// ---- pretrain ----

struct ResolvedCorpus {
    codec: Codec,
    vocab_dir: PathBuf,
    train: Vec<Example>,
    heldout: Vec<Example>,
    inputs: Vec<(&'static str, PathBuf)>,
}

/// Resolve data keys, load the codec and both corpus files.
fn resolve_corpus(kv: &mut KvConfig, data: &Path) -> Result<ResolvedCorpus> {
    let (mode, vocab_dir) = resolve_data_opts(kv, data)?;
    let (codec, mut inputs) = load_codec(&vocab_dir)?;
    let train_path = data.join("train.txt");
    let train = make_examples(&read_docs(&train_path)?, mode, &codec)?;
    inputs.push(("train", train_path));
    let heldout_path = data.join("heldout.txt");
    let heldout = if heldout_path.exists() {
        let h = make_examples(&read_docs(&heldout_path)?, mode, &codec)?;
        inputs.push(("heldout", heldout_path));
        h
    } else {
        Vec::new()
    };
    Ok(ResolvedCorpus { codec, vocab_dir, train, heldout, inputs })
}

fn cmd_pretrain(a: PretrainArgs) -> Result<ExitCode> {
    let objective = Objective::parse(&a.objective)?;
    let mut kv = load_config(a.config.as_deref(), &a.set)?;
    let corpus = resolve_corpus(&mut kv, &a.data)?;
    let model_cfg = resolve_model(&mut kv, corpus.codec.vocab().len())?;
    let train_cfg = resolve_trainer(&mut kv, objective, a.seed)?;
    reject_unknown(&kv, &pretrain_keys())?;

    let mut manifest = RunManifest::begin("pretrain", a.seed);
    manifest.record_config(&kv);
    for (label, path) in &corpus.inputs {
        manifest.record_input(label, path)?;
    }

    let outcome = if a.resume {
        let (_, dir) = latest_checkpoint(&a.out).ok_or_else(|| {
            Error::Config(format!("no checkpoint under {} to resume from", a.out.display()))
        })?;
        let (mut model, mut optim) = load_train_state::<f32>(&dir)?;
        if config_to_pairs(&model.config) != config_to_pairs(&model_cfg) {
            return Err(Error::Config(
                "resumed checkpoint was trained under a different model configuration".into(),
            ));
        }
        run_pretrain(&train_cfg, &mut model, &mut optim, &corpus.train, &corpus.heldout, &a.out)?
    } else {
        let mut model = Model::<f32>::init(model_cfg, a.seed)?;
        pretrain(&train_cfg, &mut model, &corpus.train, &corpus.heldout, &a.out)?
    };
    for ckpt in &outcome.checkpoints {
        copy_vocab_into(&corpus.vocab_dir, ckpt)?;
    }
    manifest.finish_to(&a.out)?;
    println!("{}", pretrain_summary(&outcome));
    Ok(ExitCode::SUCCESS)
}

fn pretrain_summary(outcome: &PretrainOutcome) -> serde_json::Value {
    json!({
        "steps": outcome.steps,
        "train": outcome.last_train.as_ref().map(|r| r.to_value()),
        "eval": outcome.last_eval.as_ref().map(|r| r.to_value()),
        "checkpoints": outcome.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    })
}

// ---- finetune / eval ----

const TASK_KEYS: [&str; 16] = [
    "kind",
    "num_classes",
    "metric",
    "train",
    "dev",
    "test",
    "vocab_dir",
    "epochs",
    "early_stop",
    "batch_size",
    "head_dropout",
    "model_dropout",
    "feature_scale",
    "model_lr_scale",
    "warmup_frac",
    "frozen_mix",
];

struct ResolvedTask {
    spec: TaskSpec,
    train: PathBuf,
    dev: PathBuf,
    test: Option<PathBuf>,
    /// Overrides the checkpoint-adjacent vocabulary when set.
    vocab_dir: Option<PathBuf>,
    frozen_mix: bool,
    cfg: FinetuneConfig,
    kv: KvConfig,
}

fn resolve_task(
    path: &Path,
    sets: &[String],
    grid: &str,
    seeds: usize,
    threads: usize,
) -> Result<ResolvedTask> {
    let mut kv = load_config(Some(path), sets)?;
    let kind = TaskKind::parse(&kv.require::<String>("kind")?)?;
    let num_classes = kv.require::<usize>("num_classes")?;
    let metric = Metric::parse(&kv.require::<String>("metric")?)?;
    let spec = TaskSpec { kind, num_classes, metric };
    spec.validate()?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let train = base.join(kv.require::<String>("train")?);
    let dev = base.join(kv.require::<String>("dev")?);
    let test = kv.opt::<String>("test")?.map(|p| base.join(p));
    let vocab_dir = kv.opt::<String>("vocab_dir")?.map(|p| base.join(p));

    let structured = kind == TaskKind::TokenTagging;
    let mut cfg =
        if structured { FinetuneConfig::structured() } else { FinetuneConfig::sentence() };
    if grid != "default" {
        cfg.lr_grid = grid
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad learning rate {s:?} in --grid")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if cfg.lr_grid.is_empty() {
            return Err(Error::Config("--grid names no learning rates".into()));
        }
    }
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    cfg.seeds = (1..=seeds as u64).collect();
    cfg.threads = threads;

    kv.set_default("epochs", &cfg.epochs.to_string());
    kv.set_default("early_stop", &cfg.early_stop.to_string());
    kv.set_default("batch_size", &cfg.batch_size.to_string());
    kv.set_default("head_dropout", &cfg.head_dropout.to_string());
    kv.set_default("model_dropout", &cfg.model_dropout.to_string());
    kv.set_default("feature_scale", &cfg.feature_scale.to_string());
    kv.set_default("warmup_frac", &cfg.warmup_frac.to_string());
    kv.set_default(
        "model_lr_scale",
        &cfg.model_lr_scale.map_or("none".to_string(), |v| v.to_string()),
    );
    kv.set_default("frozen_mix", "false");
    cfg.epochs = kv.require("epochs")?;
    cfg.early_stop = kv.require("early_stop")?;
    cfg.batch_size = kv.require("batch_size")?;
    cfg.head_dropout = kv.require("head_dropout")?;
    cfg.model_dropout = kv.require("model_dropout")?;
    cfg.feature_scale = kv.require("feature_scale")?;
    cfg.warmup_frac = kv.require("warmup_frac")?;
    let mls = kv.require::<String>("model_lr_scale")?;
    cfg.model_lr_scale = if mls == "none" {
        None
    } else {
        Some(mls.parse().map_err(|_| {
            Error::Config(format!("model_lr_scale must be a number or \"none\", got {mls:?}"))
        })?)
    };
    let frozen_mix: bool = kv.require("frozen_mix")?;
    if frozen_mix && !structured {
        return Err(Error::Config(
            "frozen_mix applies only to token_tagging tasks".into(),
        ));
    }
    cfg.validate()?;
    reject_unknown(&kv, &TASK_KEYS)?;
    Ok(ResolvedTask { spec, train, dev, test, vocab_dir, frozen_mix, cfg, kv })
}

fn split_path(task: &ResolvedTask, split: &str) -> Result<PathBuf> {
    match split {
        "dev" => Ok(task.dev.clone()),
        "test" => task
            .test
            .clone()
            .ok_or_else(|| Error::Config("task file declares no test split".into())),
        other => Err(Error::Config(format!("unknown split {other:?} (expected dev or test)"))),
    }
}

fn load_labeled(path: &Path, spec: &TaskSpec, codec: &Codec) -> Result<Vec<LabeledExample>> {
    parse_labeled(&mut open_reader(path)?, spec, codec)
}

fn load_tagged(path: &Path, codec: &Codec, tags: &TagSet) -> Result<Vec<crate::finetune::TaggedExample>> {
    let raw = parse_tagged_raw(&mut open_reader(path)?)?;
    encode_tagged(&raw, codec, tags)
}

const FINETUNE_META: &str = "finetune.txt";
const TAGS_FILE: &str = "tags.txt";

fn cmd_finetune(a: FinetuneArgs) -> Result<ExitCode> {
    let threads = thread_cap()?;
    let task = resolve_task(&a.task, &a.set, &a.grid, a.seeds, threads)?;
    let model = Model::<f32>::load(&a.checkpoint)?;
    let vocab_dir = task.vocab_dir.clone().unwrap_or_else(|| a.checkpoint.clone());
    let (codec, vocab_inputs) = load_codec(&vocab_dir)?;
    if codec.vocab().len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} types but the checkpoint expects {}",
            codec.vocab().len(),
            model.config.vocab_size
        )));
    }

    let mut manifest = RunManifest::begin("finetune", *task.cfg.seeds.first().unwrap_or(&1));
    manifest.record_config(&task.kv);
    manifest.record_input("task", &a.task)?;
    manifest.record_input("train", &task.train)?;
    manifest.record_input("dev", &task.dev)?;
    manifest.record_input("checkpoint", &a.checkpoint.join("params.bin"))?;
    for (label, path) in &vocab_inputs {
        manifest.record_input(label, path)?;
    }

    std::fs::create_dir_all(&a.out)?;
    let best_dir = a.out.join("best");
    let mut meta = KvConfig::new();
    meta.set("kind", task.spec.kind.name());
    meta.set("num_classes", &task.spec.num_classes.to_string());
    meta.set("metric", task.spec.metric.name());
    meta.set("feature_scale", &task.cfg.effective_feature_scale().to_string());
    meta.set("batch_size", &task.cfg.batch_size.to_string());

    let report_value = if task.spec.kind == TaskKind::TokenTagging {
        let raw_train = parse_tagged_raw(&mut open_reader(&task.train)?)?;
        let tags = TagSet::from_data(&raw_train)?;
        let train = encode_tagged(&raw_train, &codec, &tags)?;
        let dev = load_tagged(&task.dev, &codec, &tags)?;
        let done = run_tagging(
            &model,
            tags.len(),
            &train,
            &dev,
            &task.cfg,
            CombineMode::FinetuneUnmasked,
            task.frozen_mix,
        )?;
        done.model.save(&best_dir)?;
        save_params(&best_dir, "head", &done.head)?;
        if let Some(mix) = &done.mix {
            save_params(&best_dir, "mix", mix)?;
        }
        let mut tw = BufWriter::new(File::create(best_dir.join(TAGS_FILE))?);
        for id in 0..tags.len() as u32 {
            writeln!(tw, "{}", tags.name(id))?;
        }
        tw.flush()?;
        meta.set("frozen_mix", &task.frozen_mix.to_string());
        json!({
            "kind": "token_tagging",
            "tags": tags.len(),
            "train_accuracy": done.outcome.train_accuracy,
            "dev_accuracy": done.outcome.eval_accuracy,
        })
    } else {
        let train = load_labeled(&task.train, &task.spec, &codec)?;
        let dev = load_labeled(&task.dev, &task.spec, &codec)?;
        let done = finetune_task(&model, &task.spec, &train, &dev, &task.cfg)?;
        done.model.save(&best_dir)?;
        save_params(&best_dir, "head", &done.head)?;
        let best = done.report.best();
        meta.set("best_lr", &best.lr.to_string());
        meta.set("best_seed", &best.seed.to_string());
        meta.set("best_epoch", &best.best_epoch.to_string());
        done.report.to_value()
    };
    copy_vocab_into(&vocab_dir, &best_dir)?;
    std::fs::write(best_dir.join(FINETUNE_META), meta.to_text())?;
    std::fs::write(a.out.join("report.json"), format!("{report_value}"))?;
    manifest.finish_to(&a.out)?;
    println!("{report_value}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let dir =
        if a.checkpoint.join("best").is_dir() { a.checkpoint.join("best") } else { a.checkpoint };
    let meta = KvConfig::load(&dir.join(FINETUNE_META))?;
    let model = Model::<f32>::load(&dir)?;
    let (codec, _) = load_codec(&dir)?;
    let task = resolve_task(&a.task, &[], "default", 1, 1)?;
    let stored_kind = meta.require::<String>("kind")?;
    if stored_kind != task.spec.kind.name()
        || meta.require::<usize>("num_classes")? != task.spec.num_classes
    {
        return Err(Error::Config(format!(
            "checkpoint was fine-tuned for {stored_kind}, but the task file declares {}",
            task.spec.kind.name()
        )));
    }
    let scale: f64 = meta.require("feature_scale")?;
    let batch_size: usize = meta.require("batch_size")?;
    let data_path = split_path(&task, &a.split)?;
    let head = load_params::<f32>(&dir, "head")?;

    let summary = if task.spec.kind == TaskKind::TokenTagging {
        let names = std::fs::read_to_string(dir.join(TAGS_FILE))?;
        let tags = TagSet::from_names(names.lines().map(str::to_string))?;
        let data = load_tagged(&data_path, &codec, &tags)?;
        let mix = if dir.join("mix.manifest").exists() {
            Some(load_params::<f32>(&dir, "mix")?)
        } else {
            None
        };
        let mut cfg = FinetuneConfig::structured();
        cfg.batch_size = batch_size;
        let acc = tagging_accuracy(
            &model,
            &head,
            mix.as_ref(),
            &data,
            &cfg,
            CombineMode::FinetuneUnmasked,
            scale,
        )?;
        let n: usize = data.iter().map(|t| t.tags.len()).sum();
        json!({"split": a.split, "metric": "accuracy", "value": acc, "n": n})
    } else {
        let data = load_labeled(&data_path, &task.spec, &codec)?;
        let scores = evaluate_labeled(&model, &head, &task.spec, &data, scale, batch_size)?;
        json!({
            "split": a.split,
            "metric": task.spec.metric.name(),
            "value": scores.metric,
            "loss": scores.loss,
            "n": scores.n,
        })
    };
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

// ---- check ----

fn cmd_check(a: CheckArgs) -> Result<ExitCode> {
    let suite = Suite::parse(&a.suite)?;
    if a.trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    let report = match &a.checkpoint {
        Some(dir) => {
            let model = Model::<f32>::load(dir)?;
            run_suite_on(&model, suite, a.trials, a.seed)?
        }
        None => run_suite(suite, a.trials, a.seed)?,
    };
    for f in &report.findings {
        println!(
            "{}",
            json!({
                "suite": f.suite,
                "name": f.name,
                "passed": f.passed,
                "residual": f.residual,
                "detail": f.detail,
            })
        );
    }
    println!("{}", json!({"passed": report.passed()}));
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("check.json"), report.to_json())?;
        let mut kv = KvConfig::new();
        kv.set("suite", &a.suite);
        kv.set("trials", &a.trials.to_string());
        let mut manifest = RunManifest::begin("check", a.seed);
        manifest.record_config(&kv);
        if let Some(dir) = &a.checkpoint {
            manifest.record_input("checkpoint", &dir.join("params.bin"))?;
        }
        manifest.finish_to(out)?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

// ---- study commands: ablate, datascale ----

const PROBE_KEYS: [&str; 3] = ["probe_lines", "probe_epochs", "probe_lr"];

struct ProbeSettings {
    lines: usize,
    epochs: usize,
    lr: f64,
}

fn resolve_probe(kv: &mut KvConfig) -> Result<ProbeSettings> {
    kv.set_default("probe_lines", "96");
    kv.set_default("probe_epochs", "6");
    kv.set_default("probe_lr", "0.01");
    Ok(ProbeSettings {
        lines: kv.require("probe_lines")?,
        epochs: kv.require("probe_epochs")?,
        lr: kv.require("probe_lr")?,
    })
}

/// Downstream probe shared by the study commands: classify whether a
/// sentence's first content token has an even id. Returns best-cell
/// validation accuracy under a single-lr, single-seed fine-tune.
fn first_token_probe(
    model: &Model<f32>,
    codec: &Codec,
    docs: &[Vec<String>],
    settings: &ProbeSettings,
    seed: u64,
) -> Result<f64> {
    let spec =
        TaskSpec { kind: TaskKind::SingleClassification, num_classes: 2, metric: Metric::Accuracy };
    let mut examples = Vec::new();
    for line in docs.iter().flatten() {
        if examples.len() >= settings.lines {
            break;
        }
        let (_, ids) = codec.encode_line(line);
        if ids.is_empty() || ids.len() + 2 > model.config.max_len {
            continue;
        }
        let example = single_example(codec, line)?;
        let label = Label::Class((example.ids[1] % 2) as usize);
        examples.push(LabeledExample { example, sep: None, label });
    }
    if examples.len() < 6 {
        return Err(Error::Data(format!(
            "corpus yields only {} usable probe lines; need at least 6",
            examples.len()
        )));
    }
    examples.shuffle(&mut rng::substream(seed, "probe-split", 0));
    let n_val = (examples.len() / 3).max(2);
    let val = examples.split_off(examples.len() - n_val);

    let mut cfg = FinetuneConfig::sentence();
    cfg.lr_grid = vec![settings.lr];
    cfg.seeds = vec![1];
    cfg.epochs = settings.epochs;
    cfg.batch_size = 8;
    cfg.model_dropout = 0.0;
    cfg.head_dropout = 0.0;
    cfg.threads = 1;
    let done = finetune_task(model, &spec, &examples, &val, &cfg)?;
    Ok(done.report.best().best_metric)
}

/// Per-objective headline perplexity: the quantity that objective optimizes.
fn headline_ppl(objective: Objective, r: &LossReport) -> Option<f64> {
    match objective {
        Objective::Cloze | Objective::Triplet { .. } => r.cloze.perplexity(),
        Objective::Bilm => {
            let tokens = r.fwd.tokens + r.bwd.tokens;
            if tokens == 0 {
                None
            } else {
                Some(((r.fwd.nll_sum + r.bwd.nll_sum) / tokens as f64).exp())
            }
        }
    }
}

struct StudyRow {
    label: String,
    steps: usize,
    ppl: Option<f64>,
    probe: f64,
}

fn study_table(header: &str, rows: &[StudyRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{header:<22} {:>8} {:>12} {:>10}\n", "updates", "heldout_ppl", "probe_acc"));
    for r in rows {
        let ppl = r.ppl.map_or("n/a".to_string(), |p| format!("{p:.4}"));
        out.push_str(&format!("{:<22} {:>8} {:>12} {:>10.4}\n", r.label, r.steps, ppl, r.probe));
    }
    out
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    let objectives: Vec<Objective> = a
        .objectives
        .split(',')
        .filter(|s| !s.is_empty())
        .map(Objective::parse)
        .collect::<Result<_>>()?;
    if objectives.is_empty() {
        return Err(Error::Config("--objectives names no objectives".into()));
    }
    for (i, o) in objectives.iter().enumerate() {
        if objectives[..i].iter().any(|p| p.name() == o.name()) {
            return Err(Error::Config(format!("objective {:?} listed twice", o.name())));
        }
    }

    let mut kv = load_config(a.config.as_deref(), &a.set)?;
    let corpus = resolve_corpus(&mut kv, &a.data)?;
    if corpus.heldout.is_empty() {
        return Err(Error::Config(format!(
            "{} has no heldout.txt; the comparison needs held-out perplexity",
            a.data.display()
        )));
    }
    let model_cfg = resolve_model(&mut kv, corpus.codec.vocab().len())?;
    // objective is rewritten per cell; the budget and every other knob match
    let base_cfg = resolve_trainer(&mut kv, objectives[0], a.seed)?;
    let probe = resolve_probe(&mut kv)?;
    let mut known = pretrain_keys();
    known.extend(PROBE_KEYS);
    reject_unknown(&kv, &known)?;
    kv.set("objectives", &a.objectives);

    let probe_docs = read_docs(&a.data.join("train.txt"))?;
    let rows = parallel_cells(objectives.len(), thread_cap()?, |i| {
        let objective = objectives[i];
        let mut cfg = base_cfg.clone();
        cfg.objective = objective;
        let mut model = Model::<f32>::init(model_cfg.clone(), a.seed)?;
        let cell_dir = a.out.join(format!("cell-{}", objective.name()));
        let outcome = pretrain(&cfg, &mut model, &corpus.train, &corpus.heldout, &cell_dir)?;
        let eval = evaluate_perplexity(
            &model,
            &corpus.heldout,
            objective,
            cfg.max_tokens_per_batch,
        )?;
        let acc = first_token_probe(&model, &corpus.codec, &probe_docs, &probe, a.seed)?;
        Ok(StudyRow {
            label: objective.name().to_string(),
            steps: outcome.steps,
            ppl: headline_ppl(objective, &eval),
            probe: acc,
        })
    })?;

    let table = study_table("objective", &rows);
    let rows_json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| json!({"objective": r.label, "updates": r.steps, "heldout_ppl": r.ppl, "probe_acc": r.probe}))
        .collect();
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("ablation.txt"), &table)?;
    std::fs::write(a.out.join("ablation.json"), serde_json::Value::Array(rows_json).to_string())?;

    let mut manifest = RunManifest::begin("ablate", a.seed);
    manifest.record_config(&kv);
    for (label, path) in &corpus.inputs {
        manifest.record_input(label, path)?;
    }
    manifest.finish_to(&a.out)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_datascale(a: DatascaleArgs) -> Result<ExitCode> {
    let objective = Objective::parse(&a.objective)?;
    let budgets: Vec<usize> = a
        .budgets
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>().map_err(|_| Error::Config(format!("bad budget {s:?}")))
        })
        .collect::<Result<_>>()?;
    if budgets.is_empty() {
        return Err(Error::Config("--budgets names no budgets".into()));
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("budgets must be strictly ascending, got {budgets:?}")));
    }

    let mut kv = load_config(a.config.as_deref(), &a.set)?;
    let corpus = resolve_corpus(&mut kv, &a.data)?;
    if corpus.heldout.is_empty() {
        return Err(Error::Config(format!(
            "{} has no heldout.txt; the scaling curve needs held-out perplexity",
            a.data.display()
        )));
    }
    let model_cfg = resolve_model(&mut kv, corpus.codec.vocab().len())?;
    let train_cfg = resolve_trainer(&mut kv, objective, a.seed)?;
    let probe = resolve_probe(&mut kv)?;
    let mut known = pretrain_keys();
    known.extend(PROBE_KEYS);
    reject_unknown(&kv, &known)?;
    kv.set("budgets", &a.budgets);

    // budgets count content tokens, markers excluded
    let sizes: Vec<usize> = corpus.train.iter().map(|e| e.ids.len() - 2).collect();
    let total: usize = sizes.iter().sum();
    if let Some(&over) = budgets.iter().find(|&&b| b > total) {
        return Err(Error::Config(format!(
            "budget {over} exceeds the corpus ({total} content tokens)"
        )));
    }
    let prefix_for = |budget: usize| -> (usize, usize) {
        let (mut used, mut count) = (0usize, 0usize);
        for &s in &sizes {
            if used + s > budget {
                break;
            }
            used += s;
            count += 1;
        }
        (count, used)
    };

    let probe_docs = read_docs(&a.data.join("train.txt"))?;
    let rows = parallel_cells(budgets.len(), thread_cap()?, |i| {
        let budget = budgets[i];
        let (count, used) = prefix_for(budget);
        if count == 0 {
            return Err(Error::Config(format!(
                "budget {budget} is smaller than the first example"
            )));
        }
        let slice = &corpus.train[..count];
        let mut model = Model::<f32>::init(model_cfg.clone(), a.seed)?;
        let cell_dir = a.out.join(format!("budget-{budget}"));
        let outcome = pretrain(&train_cfg, &mut model, slice, &corpus.heldout, &cell_dir)?;
        let eval = evaluate_perplexity(
            &model,
            &corpus.heldout,
            objective,
            train_cfg.max_tokens_per_batch,
        )?;
        let acc = first_token_probe(&model, &corpus.codec, &probe_docs, &probe, a.seed)?;
        Ok((
            StudyRow {
                label: budget.to_string(),
                steps: outcome.steps,
                ppl: headline_ppl(objective, &eval),
                probe: acc,
            },
            used,
            count,
        ))
    })?;

    std::fs::create_dir_all(&a.out)?;
    let mut records = String::new();
    for (row, used, count) in &rows {
        let rec = json!({
            "budget": row.label.parse::<usize>().expect("label is the budget"),
            "tokens_used": used,
            "examples": count,
            "updates": row.steps,
            "heldout_ppl": row.ppl,
            "probe_acc": row.probe,
        });
        records.push_str(&rec.to_string());
        records.push('\n');
    }
    std::fs::write(a.out.join("datascale.jsonl"), &records)?;
    let table_rows: Vec<StudyRow> =
        rows.into_iter().map(|(r, _, _)| r).collect();
    let table = study_table("budget", &table_rows);
    std::fs::write(a.out.join("datascale.txt"), &table)?;

    let mut manifest = RunManifest::begin("datascale", a.seed);
    manifest.record_config(&kv);
    for (label, path) in &corpus.inputs {
        manifest.record_input(label, path)?;
    }
    manifest.finish_to(&a.out)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}
