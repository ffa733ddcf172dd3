//! Command-line surface. Every run writes JSON-lines records: a header with
//! the seed and resolved settings, then per-epoch and per-evaluation records.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{class_stats, load_config_file, load_corpus, load_dataset, stratified_sample, stratified_split, LabeledExample};
use crate::error::Error;
use crate::layers::Activation;
use crate::models::{
    build_model, derive_student_config, MaskingStrategy, Model, ModelConfig, PairObjective,
    PositionalMode, SharingMode, Variant,
};
use crate::objectives::{encode_pairs, sample_nsp_pairs, sample_sop_pairs, Corpus, DistillWeights};
use crate::tensor::Checkpoint;
use crate::tokenizer::{encode, encode_ids, encode_pair, encode_with_case, load_vocab, Vocab, DEFAULT_MAX_LEN};
use crate::training::{
    distill, distillation_eval, evaluate, pretrain, train, History, LabeledSequence, LossKind,
    MetricsReport, PretrainData, TrainConfig, DEFAULT_THRESHOLD,
};

/// Environment variable naming a default settings file.
pub const CONFIG_ENV: &str = "INSINCERE_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "insincere", version, about = "Transformer classifiers for insincere question detection")]
struct Cli {
    /// key = value settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write records here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Show the WordPiece encoding of a text (or text pair).
    Tokenize(TokenizeArgs),
    /// Fine-tune a classifier on a labeled CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled CSV.
    Eval(EvalArgs),
    /// Masked-LM pretraining (with NSP or SOP for the families that use it).
    PretrainMlm(PretrainArgs),
    /// Train a half-depth student against a teacher checkpoint.
    Distill(DistillArgs),
    /// Evaluate several checkpoints side by side.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
    /// Second segment.
    #[arg(long)]
    pair: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Keep letter case.
    #[arg(long)]
    cased: bool,
}

#[derive(Args, Debug, Default)]
struct ArchArgs {
    /// bert, roberta, distilbert or albert.
    #[arg(long)]
    variant: Option<String>,
    /// tiny, base or large.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_size: Option<usize>,
    #[arg(long)]
    embedding_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// none, ffn_only, attention_only or all.
    #[arg(long)]
    sharing: Option<String>,
    /// learned or sinusoidal.
    #[arg(long)]
    positional: Option<String>,
    #[arg(long)]
    activation: Option<String>,
}

#[derive(Args, Debug, Default)]
struct OptimArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Start from this checkpoint (its architecture and vocabulary win).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Seeded stratified sample of at most N rows.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides the vocabulary stored in the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// static or dynamic; defaults to the family's choice.
    #[arg(long)]
    masking: Option<String>,
    /// Precomputed masks cycled by epoch under static masking.
    #[arg(long)]
    num_masks: Option<usize>,
    /// Sentence pairs to sample for NSP/SOP families.
    #[arg(long)]
    pairs: Option<usize>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    w_mlm: Option<f64>,
    #[arg(long)]
    w_cos: Option<f64>,
    #[arg(long)]
    w_kd: Option<f64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// NAME=CHECKPOINT, repeatable.
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    limit: Option<usize>,
    /// table or jsonl.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Flag > settings file > default, remembering what was used.
struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeMap<String, Value>,
}

impl Settings {
    fn lookup<T>(&mut self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(raw.parse::<T>().map_err(|e| {
                    CliError::Usage(format!("settings file: bad value {raw:?} for {key}: {e}"))
                })?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.used.insert(key.to_string(), json!(v));
        }
        Ok(value)
    }

    fn or<T>(&mut self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let v = self.lookup(flag, key)?.unwrap_or(default);
        self.used.insert(key.to_string(), json!(v));
        Ok(v)
    }

    fn require<T>(&mut self, flag: Option<T>, key: &str) -> CliResult<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.lookup(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }

    fn path(&mut self, flag: Option<PathBuf>, key: &str) -> CliResult<Option<PathBuf>> {
        Ok(self.lookup(flag.map(|p| p.to_string_lossy().into_owned()), key)?.map(PathBuf::from))
    }

    fn require_path(&mut self, flag: Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        self.path(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }
}

fn parse_named<T>(raw: &str, what: &str) -> CliResult<T>
where
    T: FromStr,
    T::Err: Display,
{
    raw.parse::<T>().map_err(|e| CliError::Usage(format!("--{what}: {e}")))
}

struct Emitter<'a> {
    out: &'a mut dyn Write,
}

impl Emitter<'_> {
    fn record(&mut self, value: &Value) -> CliResult<()> {
        serde_json::to_writer(&mut *self.out, value).map_err(Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn history(&mut self, phase: &str, h: &History) -> CliResult<()> {
        for e in &h.epochs {
            let mut v = json!({"record": "epoch", "phase": phase});
            merge(&mut v, json!(e));
            self.record(&v)?;
        }
        Ok(())
    }
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

fn metrics_record(name: Option<&str>, r: &MetricsReport) -> Value {
    let mut v = json!({"record": "metrics"});
    if let Some(n) = name {
        merge(&mut v, json!({"model": n}));
    }
    merge(&mut v, json!(r));
    v
}

fn model_config(s: &mut Settings, a: ArchArgs) -> CliResult<(Variant, ModelConfig)> {
    let variant: Variant = parse_named(&s.or(a.variant, "variant", "bert".to_string())?, "variant")?;
    let preset = s.or(a.preset, "preset", "tiny".to_string())?;
    let max_len = s.or(a.max_len, "max-len", DEFAULT_MAX_LEN)?;
    // Vocabulary size is a placeholder until the vocabulary is loaded.
    let mut cfg = match preset.as_str() {
        "tiny" => ModelConfig::tiny(0, max_len),
        "base" => ModelConfig::bert_base(0),
        "large" => ModelConfig::bert_large(0),
        other => return Err(CliError::Usage(format!("--preset: unknown preset {other:?}"))),
    };
    cfg.max_len = max_len;
    if let Some(l) = s.lookup(a.layers, "layers")? {
        cfg.num_layers = l;
    }
    if let Some(h) = s.lookup(a.hidden, "hidden")? {
        cfg.hidden_size = h;
        cfg.embedding_size = h;
    }
    if let Some(n) = s.lookup(a.heads, "heads")? {
        cfg.num_heads = n;
    }
    if let Some(f) = s.lookup(a.ff_size, "ff-size")? {
        cfg.ff_size = f;
    }
    if let Some(d) = s.lookup(a.dropout, "dropout")? {
        cfg.dropout_rate = d;
    }
    if let Some(p) = s.lookup(a.positional, "positional")? {
        cfg.positional = parse_named::<PositionalMode>(&p, "positional")?;
    }
    if let Some(act) = s.lookup(a.activation, "activation")? {
        cfg.activation = parse_named::<Activation>(&act, "activation")?;
    }
    let mut cfg = variant.config(&ModelConfig { vocab_size: 6, ..cfg })?;
    if let Some(e) = s.lookup(a.embedding_size, "embedding-size")? {
        cfg.embedding_size = e;
    }
    if let Some(m) = s.lookup(a.sharing, "sharing")? {
        cfg.sharing = parse_named::<SharingMode>(&m, "sharing")?;
    }
    Ok((variant, cfg))
}

fn train_config(s: &mut Settings, o: OptimArgs, seed: u64, loss: LossKind) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: s.or(o.lr, "lr", d.learning_rate)?,
        batch_size: s.or(o.batch_size, "batch-size", d.batch_size)?,
        epochs: s.or(o.epochs, "epochs", d.epochs)?,
        clip_norm: s.lookup(o.clip_norm, "clip-norm")?,
        seed,
        loss,
        ..d
    };
    Ok(cfg)
}

fn encode_examples(data: &[LabeledExample], vocab: &Vocab, max_len: usize) -> CliResult<Vec<LabeledSequence>> {
    data.iter()
        .map(|e| {
            Ok(LabeledSequence {
                seq: encode(&e.question_text, vocab, max_len)?,
                label: e.label(),
            })
        })
        .collect()
}

fn read_labeled(path: &Path, limit: Option<usize>, seed: u64, err: &mut dyn Write) -> CliResult<(Vec<LabeledExample>, usize)> {
    let loaded = load_dataset(path)?;
    for r in &loaded.rejected {
        writeln!(err, "warning: {}: line {}: {}", path.display(), r.line, r.reason)?;
    }
    let mut examples = loaded.examples;
    if examples.is_empty() {
        return Err(Error::Dataset(format!("{}: no usable rows", path.display())).into());
    }
    if let Some(n) = limit {
        examples = stratified_sample(&examples, n, seed)?;
    }
    Ok((examples, loaded.rejected.len()))
}

fn load_model(path: &Path, vocab_override: Option<&Path>) -> CliResult<(Model, Vocab)> {
    let ck = Checkpoint::load(path)?;
    let (model, embedded) = Model::from_checkpoint(&ck)?;
    let vocab = match (vocab_override, embedded) {
        (Some(p), _) => load_vocab(p)?,
        (None, Some(v)) => v,
        (None, None) => {
            return Err(CliError::Usage(format!(
                "{} carries no vocabulary; pass --vocab",
                path.display()
            )))
        }
    };
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config().vocab_size
        ))
        .into());
    }
    Ok((model, vocab))
}

fn save_model(model: &Model, vocab: &Vocab, path: Option<&Path>) -> CliResult<()> {
    if let Some(p) = path {
        model.to_checkpoint(Some(vocab)).save(p)?;
    }
    Ok(())
}

fn cmd_tokenize(s: &mut Settings, a: TokenizeArgs, em: &mut Emitter) -> CliResult<()> {
    let vocab = load_vocab(s.require_path(a.vocab, "vocab")?)?;
    let text: String = s.require(a.text, "text")?;
    let pair: Option<String> = s.lookup(a.pair, "pair")?;
    let max_len = s.or(a.max_len, "max-len", DEFAULT_MAX_LEN)?;
    let seq = match &pair {
        Some(b) => encode_pair(&text, b, &vocab, max_len)?,
        None => encode_with_case(&text, &vocab, max_len, !a.cased)?,
    };
    let tokens: Vec<&str> = seq.ids[..seq.original_length]
        .iter()
        .map(|&i| vocab.token(i).unwrap_or("[UNK]"))
        .collect();
    em.record(&json!({
        "record": "tokens",
        "tokens": tokens,
        "ids": seq.ids,
        "attention_mask": seq.attention_mask,
        "segment_ids": seq.segment_ids,
        "original_length": seq.original_length,
    }))
}

fn cmd_train(s: &mut Settings, seed: u64, a: TrainArgs, em: &mut Emitter, err: &mut dyn Write) -> CliResult<()> {
    let data_path = s.require_path(a.data, "data")?;
    let init = s.path(a.init, "init")?;
    let vocab_path = s.path(a.vocab, "vocab")?;
    let out = s.path(a.checkpoint_out, "checkpoint-out")?;
    let fraction = s.or(a.validation_fraction, "validation-fraction", 0.1)?;
    let limit = s.lookup(a.limit, "limit")?;
    let threshold = s.or(a.threshold, "threshold", DEFAULT_THRESHOLD)?;
    let (variant, arch) = model_config(s, a.arch)?;
    let mut tc = train_config(s, a.optim, seed, LossKind::Bce)?;
    tc.threshold = threshold;

    let (mut model, vocab) = match &init {
        Some(p) => load_model(p, vocab_path.as_deref())?,
        None => {
            let vp = vocab_path.ok_or_else(|| CliError::Usage("missing required --vocab".into()))?;
            let vocab = load_vocab(vp)?;
            let cfg = ModelConfig {
                vocab_size: vocab.len(),
                ..arch
            };
            (build_model(cfg, seed)?, vocab)
        }
    };
    let header_variant = if init.is_some() { None } else { Some(variant.to_string()) };
    em.record(&json!({
        "record": "header",
        "command": "train",
        "seed": seed,
        "variant": header_variant,
        "settings": s.used,
        "model": model.config().to_kv_text(),
        "param_count": model.param_count(),
    }))?;

    let (examples, rejected) = read_labeled(&data_path, limit, seed, err)?;
    let (train_set, val_set) = stratified_split(&examples, fraction, seed)?;
    em.record(&json!({
        "record": "dataset",
        "rejected_rows": rejected,
        "train": class_stats(&train_set, Some(&vocab))?,
        "validation": class_stats(&val_set, Some(&vocab))?,
    }))?;
    let max_len = model.config().max_len;
    let train_seqs = encode_examples(&train_set, &vocab, max_len)?;
    let val_seqs = encode_examples(&val_set, &vocab, max_len)?;
    let history = train(&mut model, &train_seqs, Some(&val_seqs), &tc)?;
    em.history("fine-tune", &history)?;
    let report = evaluate(&model, &val_seqs, threshold)?;
    em.record(&metrics_record(None, &report))?;
    save_model(&model, &vocab, out.as_deref())
}

fn cmd_eval(s: &mut Settings, seed: u64, a: EvalArgs, em: &mut Emitter, err: &mut dyn Write) -> CliResult<()> {
    let ck = s.require_path(a.checkpoint, "checkpoint")?;
    let data_path = s.require_path(a.data, "data")?;
    let vocab_path = s.path(a.vocab, "vocab")?;
    let threshold = s.or(a.threshold, "threshold", DEFAULT_THRESHOLD)?;
    let limit = s.lookup(a.limit, "limit")?;
    let (model, vocab) = load_model(&ck, vocab_path.as_deref())?;
    em.record(&json!({"record": "header", "command": "eval", "seed": seed, "settings": s.used}))?;
    let (examples, _) = read_labeled(&data_path, limit, seed, err)?;
    let seqs = encode_examples(&examples, &vocab, model.config().max_len)?;
    let report = evaluate(&model, &seqs, threshold)?;
    em.record(&metrics_record(None, &report))
}

fn single_segments(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> CliResult<Vec<crate::tokenizer::TokenizedSequence>> {
    corpus
        .iter()
        .flatten()
        .map(|seg| Ok(encode_ids(seg, vocab, max_len)?))
        .collect()
}

fn cmd_pretrain(s: &mut Settings, seed: u64, a: PretrainArgs, em: &mut Emitter) -> CliResult<()> {
    let corpus_path = s.require_path(a.corpus, "corpus")?;
    let vocab = load_vocab(s.require_path(a.vocab, "vocab")?)?;
    let out = s.path(a.checkpoint_out, "checkpoint-out")?;
    let mask_rate = s.or(a.mask_rate, "mask-rate", crate::objectives::DEFAULT_MASK_RATE)?;
    let masking_flag: Option<String> = s.lookup(a.masking, "masking")?;
    let num_masks = s.or(a.num_masks, "num-masks", 1usize)?;
    let pair_count: Option<usize> = s.lookup(a.pairs, "pairs")?;
    let (variant, arch) = model_config(s, a.arch)?;
    let mut tc = train_config(s, a.optim, seed, LossKind::Mlm)?;
    tc.mask_rate = mask_rate;
    let masking = match masking_flag.as_deref() {
        None => match variant.masking() {
            MaskingStrategy::Static { .. } => MaskingStrategy::Static { num_masks },
            MaskingStrategy::Dynamic => MaskingStrategy::Dynamic,
        },
        Some("static") => MaskingStrategy::Static { num_masks },
        Some("dynamic") => MaskingStrategy::Dynamic,
        Some(other) => return Err(CliError::Usage(format!("--masking: unknown mode {other:?}"))),
    };
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..arch
    };
    let mut model = build_model(cfg, seed)?;
    em.record(&json!({
        "record": "header",
        "command": "pretrain-mlm",
        "seed": seed,
        "variant": variant.to_string(),
        "settings": s.used,
        "model": model.config().to_kv_text(),
        "param_count": model.param_count(),
    }))?;

    let corpus = load_corpus(&corpus_path, &vocab)?;
    let max_len = model.config().max_len;
    let data = match variant.pair_objective() {
        Some(objective) => {
            let n = pair_count.unwrap_or_else(|| corpus.iter().map(Vec::len).sum());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = match objective {
                PairObjective::Nsp => sample_nsp_pairs(&corpus, n, &mut rng)?,
                PairObjective::Sop => sample_sop_pairs(&corpus, n, &mut rng)?,
            };
            let (sequences, labels) = encode_pairs(&pairs, &vocab, max_len)?;
            PretrainData {
                sequences,
                pair_labels: Some(labels),
            }
        }
        None => PretrainData {
            sequences: single_segments(&corpus, &vocab, max_len)?,
            pair_labels: None,
        },
    };
    let history = pretrain(&mut model, &data, &vocab, masking, &tc)?;
    em.history("pretrain", &history)?;
    save_model(&model, &vocab, out.as_deref())
}

fn cmd_distill(s: &mut Settings, seed: u64, a: DistillArgs, em: &mut Emitter) -> CliResult<()> {
    let teacher_path = s.require_path(a.teacher, "teacher")?;
    let corpus_path = s.require_path(a.corpus, "corpus")?;
    let vocab_path = s.path(a.vocab, "vocab")?;
    let out = s.path(a.checkpoint_out, "checkpoint-out")?;
    let d = DistillWeights::default();
    let weights = DistillWeights {
        temperature: s.or(a.temperature, "temperature", d.temperature)?,
        mlm: s.or(a.w_mlm, "w-mlm", d.mlm)?,
        cosine: s.or(a.w_cos, "w-cos", d.cosine)?,
        kd: s.or(a.w_kd, "w-kd", d.kd)?,
    };
    let mask_rate = s.or(a.mask_rate, "mask-rate", crate::objectives::DEFAULT_MASK_RATE)?;
    let mut tc = train_config(s, a.optim, seed, LossKind::Distill)?;
    tc.mask_rate = mask_rate;
    let (teacher, vocab) = load_model(&teacher_path, vocab_path.as_deref())?;
    let mut student = build_model(derive_student_config(teacher.config())?, seed)?;
    em.record(&json!({
        "record": "header",
        "command": "distill",
        "seed": seed,
        "settings": s.used,
        "model": student.config().to_kv_text(),
        "param_count": student.param_count(),
        "teacher_param_count": teacher.param_count(),
    }))?;
    let corpus = load_corpus(&corpus_path, &vocab)?;
    let seqs = single_segments(&corpus, &vocab, student.config().max_len)?;
    let history = distill(&mut student, &teacher, &seqs, &vocab, weights, &tc)?;
    em.history("distill", &history)?;
    let gap = distillation_eval(&student, &teacher, &seqs, &vocab, weights, mask_rate, seed)?;
    let mut v = json!({"record": "distill_eval"});
    merge(&mut v, json!(gap));
    em.record(&v)?;
    save_model(&student, &vocab, out.as_deref())
}

fn cmd_compare(s: &mut Settings, seed: u64, a: CompareArgs, em: &mut Emitter, err: &mut dyn Write) -> CliResult<()> {
    if a.models.is_empty() {
        return Err(CliError::Usage("missing required --model NAME=CHECKPOINT".into()));
    }
    let data_path = s.require_path(a.data, "data")?;
    let threshold = s.or(a.threshold, "threshold", DEFAULT_THRESHOLD)?;
    let limit = s.lookup(a.limit, "limit")?;
    let format = s.or(a.format, "format", "table".to_string())?;
    if format != "table" && format != "jsonl" {
        return Err(CliError::Usage(format!("--format: expected table or jsonl, got {format:?}")));
    }
    let mut specs = Vec::new();
    for m in &a.models {
        let (name, path) = m
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--model expects NAME=CHECKPOINT, got {m:?}")))?;
        specs.push((name.to_string(), PathBuf::from(path)));
    }
    let (examples, _) = read_labeled(&data_path, limit, seed, err)?;
    let mut rows = Vec::new();
    for (name, path) in &specs {
        let (model, vocab) = load_model(path, None)?;
        let seqs = encode_examples(&examples, &vocab, model.config().max_len)?;
        rows.push((name.clone(), evaluate(&model, &seqs, threshold)?));
    }
    if format == "jsonl" {
        em.record(&json!({"record": "header", "command": "compare", "seed": seed, "settings": s.used}))?;
        for (name, r) in &rows {
            em.record(&metrics_record(Some(name), r))?;
        }
        return Ok(());
    }
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    writeln!(em.out, "# compare seed={seed} threshold={threshold}")?;
    writeln!(
        em.out,
        "{:<width$}  {:>8}  {:>9}  {:>6}  {:>8}  {:>6}",
        "Model", "Accuracy", "Precision", "Recall", "F1 Score", "AUC"
    )?;
    for (name, r) in &rows {
        let auc = r.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        writeln!(
            em.out,
            "{:<width$}  {:>8.4}  {:>9.4}  {:>6.4}  {:>8.4}  {:>6}",
            name, r.accuracy, r.precision, r.recall, r.f1, auc
        )?;
    }
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let config_path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    let file = match &config_path {
        Some(p) => load_config_file(p)?,
        None => BTreeMap::new(),
    };
    let mut s = Settings {
        file,
        used: BTreeMap::new(),
    };
    let seed = s.or(cli.seed, "seed", 0u64)?;
    let mut file_out;
    let sink: &mut dyn Write = match &cli.output {
        Some(p) => {
            file_out = BufWriter::new(File::create(p)?);
            &mut file_out
        }
        None => out,
    };
    let mut em = Emitter { out: sink };
    match cli.command {
        Command::Tokenize(a) => cmd_tokenize(&mut s, a, &mut em)?,
        Command::Train(a) => cmd_train(&mut s, seed, a, &mut em, err)?,
        Command::Eval(a) => cmd_eval(&mut s, seed, a, &mut em, err)?,
        Command::PretrainMlm(a) => cmd_pretrain(&mut s, seed, a, &mut em)?,
        Command::Distill(a) => cmd_distill(&mut s, seed, a, &mut em)?,
        Command::Compare(a) => cmd_compare(&mut s, seed, a, &mut em, err)?,
    }
    em.out.flush()?;
    Ok(())
}

/// Runs the CLI with explicit streams. Returns the process exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
