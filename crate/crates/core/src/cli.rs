//! Command-line front end. Every subcommand resolves its settings from
//! built-in defaults, then an optional `--config` JSON file, then flags, and
//! records the result as `run.json` next to its outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{self, Category};
use crate::error::{Error, Result};
use crate::harness::{self, ZeroShotData, ZeroShotReport};
use crate::heads::{FinetuneRecipe, InputMode};
use crate::metrics;
use crate::mlmdata::{flatten_documents, segment_stream, MaskingConfig, VocabInfo};
use crate::model::{self, ModelConfig, ModelParams};
use crate::optim::OptimHyper;
use crate::pretrain::{self, PretrainConfig};
use crate::tokenizer::{self, SpecialTokens, Tokenizer};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "BILMFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bilmforge", version, about = "Bilingual clinical language-model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute exponent-smoothed language shares and oversampling factors.
    Balance(BalanceFlags),
    /// Train a byte-level BPE vocabulary.
    TrainTokenizer(TokenizerFlags),
    /// Masked-language-model pretraining from scratch.
    Pretrain(PretrainFlags),
    /// Turn a dense checkpoint into a sliding-window long-input model.
    ConvertLong(ConvertFlags),
    /// Fine-tune for token classification over several seeds.
    Finetune(FinetuneFlags),
    /// Score predicted tags against gold tags.
    Evaluate(EvaluateFlags),
    /// Fine-tune on one language, evaluate on another.
    Zeroshot(ZeroshotFlags),
}

#[derive(Debug, Args, Serialize)]
struct BalanceFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    /// Categories left out of the computation (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    exclude: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Also write the balanced document stream here.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    emit: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BalanceConfig {
    manifest: Option<PathBuf>,
    alpha: f64,
    exclude: Vec<String>,
    out: Option<PathBuf>,
    emit: Option<PathBuf>,
    seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            manifest: None,
            alpha: 0.3,
            exclude: vec!["clinical".into()],
            out: None,
            emit: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TokenizerFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Training text files.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<Vec<PathBuf>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerConfig {
    input: Vec<PathBuf>,
    vocab_size: usize,
    out: Option<PathBuf>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { input: Vec::new(), vocab_size: tokenizer::DEFAULT_VOCAB_SIZE, out: None }
    }
}

#[derive(Debug, Args, Serialize)]
struct PretrainFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tokenizer: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<Vec<PathBuf>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// `desk` (2 layers, hidden 64) or `base` (12 layers, hidden 768).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seq_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    peak_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainCliConfig {
    tokenizer: Option<PathBuf>,
    input: Vec<PathBuf>,
    out: Option<PathBuf>,
    preset: String,
    seq_len: usize,
    batch_size: usize,
    peak_lr: f64,
    warmup_steps: u64,
    max_steps: u64,
    checkpoint_every: u64,
    mask_ratio: f64,
    seed: u64,
}

impl Default for PretrainCliConfig {
    fn default() -> Self {
        let base = OptimHyper::base_pretraining();
        PretrainCliConfig {
            tokenizer: None,
            input: Vec::new(),
            out: None,
            preset: "desk".into(),
            seq_len: 512,
            batch_size: 32,
            peak_lr: base.peak_lr,
            warmup_steps: base.warmup_steps,
            max_steps: base.max_steps,
            checkpoint_every: 2_500,
            mask_ratio: MaskingConfig::default().ratio,
            seed: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct ConvertFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_positions: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvertConfig {
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    max_positions: usize,
    window: usize,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig { checkpoint: None, out: None, max_positions: 4096, window: 512 }
    }
}

/// Flags shared by `finetune` and `zeroshot`.
#[derive(Debug, Args, Serialize)]
struct RecipeFlags {
    /// Pretrained checkpoint; a fresh `desk` encoder when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rates: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_len: Option<usize>,
    /// `sentence` or `full_text`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    /// Seed for a fresh encoder when no checkpoint is given.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecipeConfig {
    checkpoint: Option<PathBuf>,
    tokenizer: Option<PathBuf>,
    out: Option<PathBuf>,
    learning_rates: Vec<f64>,
    epochs: usize,
    seeds: Vec<u64>,
    batch_size: usize,
    warmup_fraction: f64,
    max_len: usize,
    mode: String,
    seed: u64,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        let r = FinetuneRecipe::default();
        RecipeConfig {
            checkpoint: None,
            tokenizer: None,
            out: None,
            learning_rates: r.learning_rates,
            epochs: r.epochs,
            seeds: r.seeds,
            batch_size: r.batch_size,
            warmup_fraction: r.warmup_fraction,
            max_len: r.max_len,
            mode: "sentence".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct FinetuneFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    recipe: RecipeFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dev: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct FinetuneConfig {
    #[serde(flatten)]
    recipe: RecipeConfig,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    test: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<PathBuf>,
    /// CoNLL file whose last column holds the predicted tag.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pred: Option<PathBuf>,
    /// Drop `I-X` fragments instead of opening entities with them.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    strict: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateConfig {
    gold: Option<PathBuf>,
    pred: Option<PathBuf>,
    strict: bool,
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ZeroshotFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    recipe: RecipeFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_a: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dev_a: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_a: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dev_b: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_b: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lang_a: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lang_b: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ZeroshotConfig {
    #[serde(flatten)]
    recipe: RecipeConfig,
    train_a: Option<PathBuf>,
    dev_a: Option<PathBuf>,
    test_a: Option<PathBuf>,
    dev_b: Option<PathBuf>,
    test_b: Option<PathBuf>,
    lang_a: String,
    lang_b: String,
}

impl Default for ZeroshotConfig {
    fn default() -> Self {
        ZeroshotConfig {
            recipe: RecipeConfig::default(),
            train_a: None,
            dev_a: None,
            test_a: None,
            dev_b: None,
            test_b: None,
            lang_a: "en".into(),
            lang_b: "es".into(),
        }
    }
}

/// Defaults, overlaid by the config file, overlaid by flags.
fn resolve<C: Default + Serialize + DeserializeOwned>(flags: &impl Serialize, config: Option<&Path>) -> Result<C> {
    let mut value = serde_json::to_value(C::default())?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        overlay(&mut value, file, &path.display().to_string())?;
    }
    overlay(&mut value, serde_json::to_value(flags)?, "flags")?;
    serde_json::from_value(value).map_err(|e| Error::invalid(format!("configuration: {e}")))
}

fn overlay(base: &mut Value, top: Value, origin: &str) -> Result<()> {
    let Value::Object(top) = top else {
        return Err(Error::invalid(format!("{origin}: expected a JSON object")));
    };
    let base = base.as_object_mut().expect("configs serialize as objects");
    for (key, v) in top {
        if !base.contains_key(&key) {
            return Err(Error::invalid(format!("{origin}: unknown setting `{key}`")));
        }
        base.insert(key, v);
    }
    Ok(())
}

fn required<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::invalid(format!("missing required setting `{name}`")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `run.json` (command plus resolved settings) into `dir`.
fn write_run_json(dir: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    let doc = serde_json::json!({ "command": command, "config": config });
    write_text(&dir.join("run.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn parent_dir(file: &Path) -> &Path {
    file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn run_balance(flags: BalanceFlags) -> Result<()> {
    let cfg: BalanceConfig = resolve(&flags, flags.config.as_deref())?;
    let out = required(&cfg.out, "out")?;
    let entries = corpus::load_manifest(required(&cfg.manifest, "manifest")?)?;
    let exclude = cfg.exclude.iter().map(|c| c.parse::<Category>()).collect::<Result<BTreeSet<_>>>()?;
    let plan = corpus::compute_sampling(&entries, cfg.alpha, &exclude)?;
    write_text(out, &(plan.to_export_json()? + "\n"))?;
    if let Some(emit) = &cfg.emit {
        corpus::verify_word_counts(&entries)?;
        let factors = corpus::oversample_factors(&plan)?;
        let docs = corpus::emit_balanced_stream(&entries, &plan, &factors, cfg.seed)?;
        let text: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        write_text(emit, &(text.join("\n\n") + "\n"))?;
    }
    write_run_json(parent_dir(out), "balance", &cfg)?;
    println!("{}", plan.to_export_json()?);
    Ok(())
}

fn read_texts(paths: &[PathBuf]) -> Result<Vec<String>> {
    if paths.is_empty() {
        return Err(Error::invalid("missing required setting `input`"));
    }
    let mut docs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        docs.extend(corpus::split_documents(&text));
    }
    Ok(docs)
}

fn run_train_tokenizer(flags: TokenizerFlags) -> Result<()> {
    let cfg: TokenizerConfig = resolve(&flags, flags.config.as_deref())?;
    let out = required(&cfg.out, "out")?;
    let docs = read_texts(&cfg.input)?;
    let tok = tokenizer::train_bpe(docs.iter(), cfg.vocab_size, SpecialTokens::default())?;
    tok.save(out)?;
    write_run_json(out, "train-tokenizer", &cfg)?;
    println!("vocabulary of {} tokens written to {}", tok.vocab_size(), out.display());
    Ok(())
}

fn preset(name: &str, vocab: usize) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk(vocab)),
        "base" => Ok(ModelConfig::base(vocab)),
        other => Err(Error::invalid(format!("unknown preset `{other}` (expected desk or base)"))),
    }
}

fn run_pretrain(flags: PretrainFlags) -> Result<()> {
    let cfg: PretrainCliConfig = resolve(&flags, flags.config.as_deref())?;
    let out = required(&cfg.out, "out")?;
    let tok = Tokenizer::load(required(&cfg.tokenizer, "tokenizer")?)?;
    let docs = read_texts(&cfg.input)?;
    let encoded: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode(d)).collect();
    let segments = segment_stream(&flatten_documents(&encoded, tok.bos_id()), cfg.seq_len, tok.pad_id())?;
    let mut model = preset(&cfg.preset, tok.vocab_size())?;
    model.max_positions = model.max_positions.max(cfg.seq_len);
    let optim = OptimHyper {
        peak_lr: cfg.peak_lr,
        warmup_steps: cfg.warmup_steps,
        max_steps: cfg.max_steps,
        ..OptimHyper::base_pretraining()
    };
    let config = PretrainConfig {
        model,
        optim,
        masking: MaskingConfig { ratio: cfg.mask_ratio, ..MaskingConfig::default() },
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        checkpoint_every: cfg.checkpoint_every,
    };
    write_run_json(out, "pretrain", &cfg)?;
    let outcome = pretrain::pretrain(&segments, &VocabInfo::of(&tok), &config, Some(out))?;
    model::save_checkpoint(&outcome.params, None, out.join("final"))?;
    if let Some(last) = outcome.history.last() {
        println!("{} steps, final loss {:.4}", last.step, last.loss);
    }
    Ok(())
}

fn run_convert(flags: ConvertFlags) -> Result<()> {
    let cfg: ConvertConfig = resolve(&flags, flags.config.as_deref())?;
    let out = required(&cfg.out, "out")?;
    let base = model::load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let long = model::convert_to_long(&base, cfg.max_positions, cfg.window)?;
    model::save_checkpoint(&long, None, out)?;
    write_run_json(out, "convert-long", &cfg)?;
    println!("long model with {} positions written to {}", cfg.max_positions, out.display());
    Ok(())
}

fn recipe_of(cfg: &RecipeConfig) -> Result<FinetuneRecipe> {
    let mode = match cfg.mode.as_str() {
        "sentence" => InputMode::Sentence,
        "full_text" => InputMode::FullText,
        other => return Err(Error::invalid(format!("unknown mode `{other}` (expected sentence or full_text)"))),
    };
    let recipe = FinetuneRecipe {
        batch_size: cfg.batch_size,
        learning_rates: cfg.learning_rates.clone(),
        warmup_fraction: cfg.warmup_fraction,
        epochs: cfg.epochs,
        seeds: cfg.seeds.clone(),
        max_len: cfg.max_len,
        mode,
    };
    recipe.validate()?;
    Ok(recipe)
}

fn base_model(cfg: &RecipeConfig, tok: &Tokenizer) -> Result<ModelParams<f32>> {
    match &cfg.checkpoint {
        Some(dir) => model::load_checkpoint(dir),
        None => ModelParams::init(&ModelConfig::desk(tok.vocab_size()), cfg.seed),
    }
}

fn load_split(path: &Option<PathBuf>, name: &str, language: &str) -> Result<Vec<crate::heads::LabeledExample>> {
    Ok(harness::with_language(harness::load_conll(required(path, name)?)?, language))
}

fn run_finetune(flags: FinetuneFlags) -> Result<()> {
    let cfg: FinetuneConfig = resolve(&flags, flags.config.as_deref())?;
    let out = required(&cfg.recipe.out, "out")?;
    let recipe = recipe_of(&cfg.recipe)?;
    let tok = Tokenizer::load(required(&cfg.recipe.tokenizer, "tokenizer")?)?;
    let base = base_model(&cfg.recipe, &tok)?;
    let train = load_split(&cfg.train, "train", "")?;
    let dev = load_split(&cfg.dev, "dev", "")?;
    let test = match &cfg.test {
        Some(_) => load_split(&cfg.test, "test", "")?,
        None => dev.clone(),
    };
    write_run_json(out, "finetune", &cfg)?;
    let run_dir = out.join("runs").join(harness::config_hash(&cfg)?);
    let report = harness::run_multiseed(&base, &tok, &train, &dev, &test, &recipe, Some(&run_dir))?;
    write_text(&out.join("report.json"), &(report.to_json()? + "\n"))?;
    if let Some(f1) = report.f1("test") {
        println!("test micro-F1 {:.4} ± {:.4} over {} seeds", f1.mean, f1.std, report.n_seeds);
    }
    Ok(())
}

fn run_zeroshot(flags: ZeroshotFlags) -> Result<()> {
    let cfg: ZeroshotConfig = resolve(&flags, flags.config.as_deref())?;
    let out = required(&cfg.recipe.out, "out")?;
    let recipe = recipe_of(&cfg.recipe)?;
    let tok = Tokenizer::load(required(&cfg.recipe.tokenizer, "tokenizer")?)?;
    let base = base_model(&cfg.recipe, &tok)?;
    let train_a = load_split(&cfg.train_a, "train_a", &cfg.lang_a)?;
    let dev_a = load_split(&cfg.dev_a, "dev_a", &cfg.lang_a)?;
    let test_a = load_split(&cfg.test_a, "test_a", &cfg.lang_a)?;
    let dev_b = match &cfg.dev_b {
        Some(_) => Some(load_split(&cfg.dev_b, "dev_b", &cfg.lang_b)?),
        None => None,
    };
    let test_b = load_split(&cfg.test_b, "test_b", &cfg.lang_b)?;
    write_run_json(out, "zeroshot", &cfg)?;
    let data = ZeroShotData {
        train_a: &train_a,
        dev_a: &dev_a,
        test_a: &test_a,
        dev_b: dev_b.as_deref(),
        test_b: &test_b,
    };
    let run_dir = out.join("runs").join(harness::config_hash(&cfg)?);
    let report = harness::run_zeroshot(&base, &tok, data, &recipe, Some(&run_dir))?;
    let table = ZeroShotReport::table(&[("bilmforge", &report)]);
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(&out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_evaluate(flags: EvaluateFlags) -> Result<()> {
    let cfg: EvaluateConfig = resolve(&flags, flags.config.as_deref())?;
    let gold = harness::load_conll(required(&cfg.gold, "gold")?)?;
    let pred = harness::load_conll(required(&cfg.pred, "pred")?)?;
    if gold.len() != pred.len() || gold.iter().zip(&pred).any(|(g, p)| g.words != p.words) {
        return Err(Error::Shape("gold and predicted files do not align word by word".into()));
    }
    let gold: Vec<Vec<String>> = gold.into_iter().map(|e| e.tags).collect();
    let pred: Vec<Vec<String>> = pred.into_iter().map(|e| e.tags).collect();
    let report = metrics::entity_prf_with(&gold, &pred, cfg.strict)?;
    let json = serde_json::to_string_pretty(&report.to_json())? + "\n";
    if let Some(out) = &cfg.out {
        write_text(out, &json)?;
        write_run_json(parent_dir(out), "evaluate", &cfg)?;
    }
    print!("{json}");
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialised");
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 for usage or validation errors, 2 for
/// runtime failures.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Balance(f) => run_balance(f),
        Command::TrainTokenizer(f) => run_train_tokenizer(f),
        Command::Pretrain(f) => run_pretrain(f),
        Command::ConvertLong(f) => run_convert(f),
        Command::Finetune(f) => run_finetune(f),
        Command::Evaluate(f) => run_evaluate(f),
        Command::Zeroshot(f) => run_zeroshot(f),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() { 1 } else { 2 }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"alpha": 0.5, "seed": 9}"#).unwrap();
        let flags = BalanceFlags {
            config: None,
            manifest: None,
            alpha: Some(0.7),
            exclude: None,
            out: None,
            emit: None,
            seed: None,
        };
        let cfg: BalanceConfig = resolve(&flags, Some(&path)).unwrap();
        assert_eq!(cfg.alpha, 0.7);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.exclude, ["clinical"]);

        fs::write(&path, r#"{"alfa": 0.5}"#).unwrap();
        assert!(resolve::<BalanceConfig>(&flags, Some(&path)).is_err());
    }

    #[test]
    fn flattened_recipe_settings_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epochs": 3, "learning_rates": [1e-4], "train": "t.conll"}"#).unwrap();
        let flags = FinetuneFlags {
            config: None,
            recipe: RecipeFlags {
                checkpoint: None,
                tokenizer: None,
                out: None,
                learning_rates: None,
                epochs: Some(4),
                seeds: None,
                batch_size: None,
                warmup_fraction: None,
                max_len: None,
                mode: None,
                seed: None,
            },
            train: None,
            dev: None,
            test: None,
        };
        let cfg: FinetuneConfig = resolve(&flags, Some(&path)).unwrap();
        assert_eq!(cfg.recipe.epochs, 4);
        assert_eq!(cfg.recipe.learning_rates, [1e-4]);
        assert_eq!(cfg.train, Some(PathBuf::from("t.conll")));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(dispatch(["bilmforge"]), 1);
        assert_eq!(dispatch(["bilmforge", "frobnicate"]), 1);
        assert_eq!(dispatch(["bilmforge", "balance", "--bogus"]), 1);
        assert_eq!(dispatch(["bilmforge", "balance"]), 1);
    }
}
