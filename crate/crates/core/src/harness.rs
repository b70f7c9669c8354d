//! CoNLL datasets, multi-seed experiments and the zero-shot cross-lingual
//! protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::{entity_types, finetune, predict_tags, FinetuneOutcome, FinetuneRecipe, LabelSet, LabeledExample};
use crate::metrics::{entity_prf, is_valid_tag, MetricReport};
use crate::model::{save_checkpoint, ModelParams};
use crate::tokenizer::Tokenizer;

const DOCSTART: &str = "-DOCSTART-";

/// Reads a CoNLL file: one `token ... tag` line per word (the tag is the
/// last column), blank lines between sentences, `-DOCSTART-` lines between
/// documents. Every token line must have the same number of columns.
pub fn load_conll(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, path)
}

fn flush(out: &mut Vec<LabeledExample>, words: &mut Vec<String>, tags: &mut Vec<String>, doc: usize) {
    if !words.is_empty() {
        out.push(LabeledExample {
            words: std::mem::take(words),
            tags: std::mem::take(tags),
            language: String::new(),
            doc_id: format!("doc{doc}"),
        });
    }
}

pub fn parse_conll(text: &str, origin: &Path) -> Result<Vec<LabeledExample>> {
    let fail = |line: usize, message: String| Error::Parse { path: origin.to_path_buf(), line, message };
    let mut out = Vec::new();
    let mut doc = 0usize;
    let mut columns: Option<usize> = None;
    let mut words = Vec::new();
    let mut tags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut out, &mut words, &mut tags, doc);
            continue;
        }
        let fields: Vec<&str> = line.split(['\t', ' ']).filter(|f| !f.is_empty()).collect();
        if fields[0] == DOCSTART {
            flush(&mut out, &mut words, &mut tags, doc);
            if out.last().is_some_and(|e| e.doc_id == format!("doc{doc}")) {
                doc += 1;
            }
            continue;
        }
        if fields.len() < 2 {
            return Err(fail(line_no, format!("expected at least 2 columns, found {}", fields.len())));
        }
        match columns {
            Some(n) if n != fields.len() => {
                return Err(fail(line_no, format!("ragged columns: {} here, {n} earlier", fields.len())));
            }
            _ => columns = Some(fields.len()),
        }
        let tag = fields[fields.len() - 1];
        if !is_valid_tag(tag) {
            return Err(fail(line_no, format!("unknown tag syntax `{tag}`")));
        }
        words.push(fields[0].to_string());
        tags.push(tag.to_string());
    }
    flush(&mut out, &mut words, &mut tags, doc);
    Ok(out)
}

/// Writes examples in CoNLL form. With `predicted`, each line carries the
/// gold tag followed by the predicted tag.
pub fn write_conll(path: impl AsRef<Path>, examples: &[LabeledExample], predicted: Option<&[Vec<String>]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(pred) = predicted {
        if pred.len() != examples.len() || pred.iter().zip(examples).any(|(p, e)| p.len() != e.words.len()) {
            return Err(Error::Shape("predictions do not line up with examples".into()));
        }
    }
    let mut text = String::new();
    let mut doc: Option<&str> = None;
    for (i, ex) in examples.iter().enumerate() {
        if doc != Some(ex.doc_id.as_str()) {
            if doc.is_some() {
                text.push_str(DOCSTART);
                text.push_str("\tO\n\n");
            }
            doc = Some(&ex.doc_id);
        }
        for (j, (w, t)) in ex.words.iter().zip(&ex.tags).enumerate() {
            match predicted {
                Some(pred) => writeln!(text, "{w}\t{t}\t{}", pred[i][j]),
                None => writeln!(text, "{w}\t{t}"),
            }
            .expect("string write");
        }
        text.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn with_language(mut examples: Vec<LabeledExample>, language: &str) -> Vec<LabeledExample> {
    for ex in &mut examples {
        ex.language = language.to_string();
    }
    examples
}

/// Short stable hash of a serializable config, for naming run directories.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(hex::encode(&digest[..6]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and the n-1 standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub p: MeanStd,
    pub r: MeanStd,
    pub f1: MeanStd,
}

/// One fine-tuning run, evaluated on every named split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub learning_rate: f64,
    pub best_epoch: usize,
    pub dev_history: Vec<f64>,
    pub reports: BTreeMap<String, MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub recipe: FinetuneRecipe,
    pub n_seeds: usize,
    /// Set when only one seed ran; the standard deviations are then 0.
    pub single_run: bool,
    pub runs: Vec<SeedRun>,
    /// Micro-averaged scores per split, aggregated over seeds.
    pub summary: BTreeMap<String, SplitSummary>,
}

impl ExperimentReport {
    pub fn from_runs(recipe: &FinetuneRecipe, runs: Vec<SeedRun>) -> Self {
        let mut splits: BTreeMap<String, Vec<&MetricReport>> = BTreeMap::new();
        for run in &runs {
            for (split, report) in &run.reports {
                splits.entry(split.clone()).or_default().push(report);
            }
        }
        let summary = splits
            .into_iter()
            .map(|(split, reports)| {
                let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
                let s = SplitSummary { p: col(|r| r.micro.p), r: col(|r| r.micro.r), f1: col(|r| r.micro.f1) };
                (split, s)
            })
            .collect();
        ExperimentReport {
            recipe: recipe.clone(),
            n_seeds: runs.len(),
            single_run: runs.len() == 1,
            runs,
            summary,
        }
    }

    pub fn f1(&self, split: &str) -> Option<MeanStd> {
        self.summary.get(split).map(|s| s.f1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn evaluate(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    examples: &[LabeledExample],
    labels: &LabelSet,
    recipe: &FinetuneRecipe,
) -> Result<MetricReport> {
    let pred = predict_tags(params, tok, examples, labels, recipe.max_len, recipe.mode)?;
    let gold: Vec<Vec<String>> = examples.iter().map(|e| e.tags.clone()).collect();
    let pred: Vec<Vec<String>> = pred.into_iter().map(|p| p.tags).collect();
    entity_prf(&gold, &pred)
}

/// Fine-tunes once per learning rate in the recipe and keeps the run with
/// the best dev micro-F1.
fn tune_one_seed(
    base: &ModelParams<f32>,
    tok: &Tokenizer,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    labels: &LabelSet,
    recipe: &FinetuneRecipe,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let mut best: Option<FinetuneOutcome> = None;
    for &lr in &recipe.learning_rates {
        let outcome = finetune(base, tok, train, dev, labels, recipe, lr, seed)?;
        if best.as_ref().is_none_or(|b| outcome.best_dev.micro.f1 > b.best_dev.micro.f1) {
            best = Some(outcome);
        }
    }
    Ok(best.expect("recipe has at least one learning rate"))
}

/// Runs the recipe once per seed, then evaluates each returned model on
/// every split in `eval`. With `run_dir`, each seed's model and report land
/// in `run_dir/seed-N/`.
pub fn run_seeds(
    base: &ModelParams<f32>,
    tok: &Tokenizer,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    eval: &[(&str, &[LabeledExample])],
    recipe: &FinetuneRecipe,
    run_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    recipe.validate()?;
    let labels = LabelSet::from_examples(train);
    let runs = recipe
        .seeds
        .par_iter()
        .map(|&seed| {
            let outcome = tune_one_seed(base, tok, train, dev, &labels, recipe, seed)?;
            let mut reports = BTreeMap::new();
            for (name, split) in eval {
                reports.insert(name.to_string(), evaluate(&outcome.params, tok, split, &labels, recipe)?);
            }
            let run = SeedRun {
                seed,
                learning_rate: outcome.learning_rate,
                best_epoch: outcome.best_epoch,
                dev_history: outcome.dev_history,
                reports,
            };
            if let Some(dir) = run_dir {
                let dir = dir.join(format!("seed-{seed}"));
                save_checkpoint(&outcome.params, None, &dir)?;
                let path = dir.join("report.json");
                fs::write(&path, serde_json::to_string_pretty(&run)?).map_err(|e| Error::io(&path, e))?;
            }
            Ok(run)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_runs(recipe, runs))
}

/// One fine-tune per seed; test metrics aggregated over seeds. The report
/// also carries the dev split.
pub fn run_multiseed(
    base: &ModelParams<f32>,
    tok: &Tokenizer,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    test: &[LabeledExample],
    recipe: &FinetuneRecipe,
    run_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    run_seeds(base, tok, train, dev, &[("dev", dev), ("test", test)], recipe, run_dir)
}

/// Splits for the zero-shot protocol. Only language A contributes training
/// data; language B is evaluation-only by construction.
#[derive(Debug, Clone, Copy)]
pub struct ZeroShotData<'a> {
    pub train_a: &'a [LabeledExample],
    pub dev_a: &'a [LabeledExample],
    pub test_a: &'a [LabeledExample],
    pub dev_b: Option<&'a [LabeledExample]>,
    pub test_b: &'a [LabeledExample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub training_language: String,
    pub zero_shot_language: String,
    /// Splits `dev`, `test` (language A) and `zs_dev`, `zs_test` (language B).
    pub report: ExperimentReport,
}

impl ZeroShotReport {
    pub fn in_language_f1(&self) -> MeanStd {
        self.report.f1("test").unwrap_or_default()
    }

    pub fn zero_shot_f1(&self) -> MeanStd {
        self.report.f1("zs_test").unwrap_or_default()
    }

    /// Rows in the layout of the zero-shot results table: micro-F1 as
    /// percentages, `mean±std`, with a comma decimal separator.
    pub fn table(reports: &[(&str, &ZeroShotReport)]) -> String {
        let cell = |r: &ExperimentReport, split: &str| match r.f1(split) {
            Some(m) => format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std).replace('.', ","),
            None => "-".to_string(),
        };
        let mut out = String::new();
        writeln!(out, "{:<9} {:<16} {:<20} {:<6} | {:^27} | {:^27}", "", "", "", "", "Training Language", "Zero-Shot Language").ok();
        writeln!(out, "{:<9} {:<16} {:<20} {:<6} | {:^13} {:^13} | {:^13} {:^13}", "Training", "Model", "LR", "Epochs", "dev", "test", "dev", "test").ok();
        for (model, z) in reports {
            let r = &z.report;
            let lrs: Vec<String> = r.recipe.learning_rates.iter().map(|lr| format!("{lr:e}")).collect();
            writeln!(
                out,
                "{:<9} {:<16} {:<20} {:<6} | {:^13} {:^13} | {:^13} {:^13}",
                z.training_language.to_uppercase(),
                model,
                lrs.join("/"),
                r.recipe.epochs,
                cell(r, "dev"),
                cell(r, "test"),
                cell(r, "zs_dev"),
                cell(r, "zs_test"),
            )
            .ok();
        }
        out
    }
}

fn language_of(examples: &[LabeledExample]) -> String {
    examples.first().map(|e| e.language.clone()).unwrap_or_default()
}

/// Fine-tunes on language A only and reports A and B metrics side by side.
pub fn run_zeroshot(
    base: &ModelParams<f32>,
    tok: &Tokenizer,
    data: ZeroShotData<'_>,
    recipe: &FinetuneRecipe,
    run_dir: Option<&Path>,
) -> Result<ZeroShotReport> {
    let types_a = entity_types(data.train_a);
    let types_b = entity_types(data.test_b);
    if types_a != types_b {
        return Err(Error::invalid(format!(
            "label sets differ between languages: {types_a:?} vs {types_b:?}"
        )));
    }
    let mut eval: Vec<(&str, &[LabeledExample])> = vec![("dev", data.dev_a), ("test", data.test_a)];
    if let Some(dev_b) = data.dev_b {
        eval.push(("zs_dev", dev_b));
    }
    eval.push(("zs_test", data.test_b));
    let report = run_seeds(base, tok, data.train_a, data.dev_a, &eval, recipe, run_dir)?;
    Ok(ZeroShotReport {
        training_language: language_of(data.train_a),
        zero_shot_language: language_of(data.test_b),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "-DOCSTART- -X- O O\n\nThe\tO\npatient\tO\nhas\tO\nasthma\tB-DIS\n\nNo\tO\nfever\tB-SYM\n\n-DOCSTART- -X- O O\n\nAspirin\tB-DRUG\ngiven\tO\n";

    #[test]
    fn parses_sentences_and_documents() {
        let ex = parse_conll(SAMPLE, Path::new("x")).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].words, ["The", "patient", "has", "asthma"]);
        assert_eq!(ex[0].tags, ["O", "O", "O", "B-DIS"]);
        assert_eq!(ex[0].doc_id, ex[1].doc_id);
        assert_ne!(ex[1].doc_id, ex[2].doc_id);
        assert!(parse_conll("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_conll("a\tO\nlonely\n", Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_conll("a\tX\tO\nb\tO\n", Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_conll("a\tO\n\nb\tE-DIS\n", Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn conll_roundtrip() {
        let ex = parse_conll(SAMPLE, Path::new("x")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.conll");
        write_conll(&path, &ex, None).unwrap();
        assert_eq!(load_conll(&path).unwrap(), ex);

        let pred: Vec<Vec<String>> = ex.iter().map(|e| e.tags.clone()).collect();
        write_conll(&path, &ex, Some(&pred)).unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains("asthma\tB-DIS\tB-DIS"));
    }

    #[test]
    fn mean_and_sample_std() {
        let m = MeanStd::of(&[0.8, 0.9, 1.0]);
        assert!((m.mean - 0.9).abs() < 1e-15);
        assert!((m.std - 0.1).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
        assert_eq!(MeanStd::of(&[0.5; 5]).std, 0.0);
    }

    #[test]
    fn summary_recomputes_from_runs() {
        let gold = vec![vec!["B-A".to_string(), "O".to_string()]];
        let runs: Vec<SeedRun> = [vec!["B-A", "O"], vec!["O", "O"]]
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let pred = vec![p.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
                let mut reports = BTreeMap::new();
                reports.insert("test".to_string(), entity_prf(&gold, &pred).unwrap());
                SeedRun { seed: i as u64, learning_rate: 5e-5, best_epoch: 1, dev_history: vec![], reports }
            })
            .collect();
        let r = ExperimentReport::from_runs(&FinetuneRecipe::default(), runs.clone());
        assert_eq!(r.n_seeds, 2);
        assert!(!r.single_run);
        let f1 = r.f1("test").unwrap();
        assert_eq!(f1, MeanStd::of(&[1.0, 0.0]));
        let single = ExperimentReport::from_runs(&FinetuneRecipe::default(), runs[..1].to_vec());
        assert!(single.single_run);
        assert_eq!(single.f1("test").unwrap().std, 0.0);
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&FinetuneRecipe::default()).unwrap();
        assert_eq!(a, config_hash(&FinetuneRecipe::default()).unwrap());
        assert_eq!(a.len(), 12);
        let other = FinetuneRecipe { epochs: 3, ..FinetuneRecipe::default() };
        assert_ne!(a, config_hash(&other).unwrap());
    }
}
