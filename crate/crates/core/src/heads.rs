//! Token classification over the encoder: word/subtoken label alignment,
//! the fine-tuning loop and tag prediction.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{entity_prf, is_valid_tag, MetricReport, Tag};
use crate::mlmdata::{MaskedBatch, IGNORE};
use crate::model::{classifier_loss_and_grad, forward_classifier, Mode, ModelParams};
use crate::optim::{adamw_step, clip_gradients, lr_at_step, AdamWState, OptimHyper};
use crate::seed;
use crate::tokenizer::{TokenId, Tokenizer};

/// One sentence with word-level BIO tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub words: Vec<String>,
    pub tags: Vec<String>,
    pub language: String,
    pub doc_id: String,
}

impl LabeledExample {
    pub fn validate(&self) -> Result<()> {
        if self.words.len() != self.tags.len() {
            return Err(Error::Shape(format!("{} words but {} tags", self.words.len(), self.tags.len())));
        }
        if let Some(bad) = self.tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(Error::invalid(format!("malformed tag `{bad}`")));
        }
        Ok(())
    }
}

/// Ordered tag inventory: `O`, then `B-X`, `I-X` for each type in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    tags: Vec<String>,
}

impl LabelSet {
    pub fn from_types<S: AsRef<str>>(types: impl IntoIterator<Item = S>) -> Self {
        let types: BTreeSet<String> = types.into_iter().map(|t| t.as_ref().to_string()).collect();
        let mut tags = vec!["O".to_string()];
        for t in types {
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        LabelSet { tags }
    }

    pub fn from_examples(examples: &[LabeledExample]) -> Self {
        Self::from_types(entity_types(examples))
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn types(&self) -> BTreeSet<String> {
        self.tags.iter().filter_map(|t| Tag::parse(t).kind().map(String::from)).collect()
    }
}

pub fn entity_types(examples: &[LabeledExample]) -> BTreeSet<String> {
    examples
        .iter()
        .flat_map(|e| e.tags.iter())
        .filter_map(|t| Tag::parse(t).kind().map(String::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// One model input per sentence.
    #[default]
    Sentence,
    /// One model input per document, truncated at `max_len`.
    FullText,
}

/// A model input with word-aligned labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedInput {
    pub ids: Vec<TokenId>,
    pub labels: Vec<i32>,
    /// Position of each word's first subtoken; `None` once truncated.
    pub word_starts: Vec<Option<usize>>,
}

impl AlignedInput {
    pub fn truncated_words(&self) -> usize {
        self.word_starts.iter().filter(|p| p.is_none()).count()
    }
}

/// Encodes `words` behind a `bos` token. Each word after the first is
/// encoded with a leading space, matching running text. The tag id sits on
/// the first subtoken; continuation subtokens get [`IGNORE`]. Words that do
/// not fit in `max_len` are dropped.
pub fn tokenize_and_align(
    tok: &Tokenizer,
    words: &[String],
    tag_ids: &[usize],
    max_len: usize,
) -> Result<AlignedInput> {
    if words.len() != tag_ids.len() {
        return Err(Error::Shape(format!("{} words but {} tags", words.len(), tag_ids.len())));
    }
    if max_len < 2 {
        return Err(Error::invalid("max_len must leave room for at least one word"));
    }
    let mut ids = vec![tok.bos_id()];
    let mut labels = vec![IGNORE];
    let mut word_starts = Vec::with_capacity(words.len());
    let mut full = false;
    for (i, (word, &tag)) in words.iter().zip(tag_ids).enumerate() {
        let pieces = if i == 0 { tok.encode(word) } else { tok.encode(&format!(" {word}")) };
        assert!(!pieces.is_empty(), "byte-level encoding produced no tokens for {word:?}");
        if full || ids.len() + pieces.len() > max_len {
            full = true;
            word_starts.push(None);
            continue;
        }
        word_starts.push(Some(ids.len()));
        labels.push(tag as i32);
        labels.extend(std::iter::repeat_n(IGNORE, pieces.len() - 1));
        ids.extend(pieces);
    }
    Ok(AlignedInput { ids, labels, word_starts })
}

/// Model inputs for a set of examples. `members[i]` lists the example
/// indices covered by input `i`, in order.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    pub inputs: Vec<AlignedInput>,
    pub members: Vec<Vec<usize>>,
    /// Inputs that lost at least one word to truncation.
    pub truncations: usize,
}

pub fn encode_examples(
    tok: &Tokenizer,
    examples: &[LabeledExample],
    labels: &LabelSet,
    max_len: usize,
    mode: InputMode,
) -> Result<EncodedSet> {
    let groups: Vec<Vec<usize>> = match mode {
        InputMode::Sentence => (0..examples.len()).map(|i| vec![i]).collect(),
        InputMode::FullText => {
            let mut groups: Vec<Vec<usize>> = Vec::new();
            for (i, ex) in examples.iter().enumerate() {
                match groups.last_mut() {
                    Some(g) if examples[g[0]].doc_id == ex.doc_id => g.push(i),
                    _ => groups.push(vec![i]),
                }
            }
            groups
        }
    };
    let mut inputs = Vec::with_capacity(groups.len());
    let mut truncations = 0;
    for group in &groups {
        let mut words = Vec::new();
        let mut tag_ids = Vec::new();
        for &i in group {
            let ex = &examples[i];
            ex.validate()?;
            words.extend(ex.words.iter().cloned());
            for t in &ex.tags {
                tag_ids.push(labels.id(t).ok_or_else(|| Error::invalid(format!("tag `{t}` not in label set")))?);
            }
        }
        let input = tokenize_and_align(tok, &words, &tag_ids, max_len)?;
        if input.truncated_words() > 0 {
            truncations += 1;
        }
        inputs.push(input);
    }
    if truncations > 0 {
        log::warn!("{truncations} inputs truncated at {max_len} tokens");
    }
    Ok(EncodedSet { inputs, members: groups, truncations })
}

/// Pads inputs to the longest one and stacks them.
fn collate(inputs: &[&AlignedInput], pad: TokenId) -> MaskedBatch {
    let len = inputs.iter().map(|x| x.ids.len()).max().unwrap_or(0);
    let mut batch = MaskedBatch {
        batch_size: inputs.len(),
        seq_len: len,
        input_ids: Vec::with_capacity(inputs.len() * len),
        labels: Vec::with_capacity(inputs.len() * len),
        attention_mask: Vec::with_capacity(inputs.len() * len),
    };
    for x in inputs {
        let n = x.ids.len();
        batch.input_ids.extend(x.ids.iter().copied().chain(std::iter::repeat_n(pad, len - n)));
        batch.labels.extend(x.labels.iter().copied().chain(std::iter::repeat_n(IGNORE, len - n)));
        batch.attention_mask.extend(std::iter::repeat_n(1, n).chain(std::iter::repeat_n(0, len - n)));
    }
    batch
}

/// Fine-tuning settings. Defaults: batch 32, learning-rate grid
/// {2.5e-5, 5e-5, 7.5e-5}, 2% linear warmup, 15 epochs, 3 seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneRecipe {
    pub batch_size: usize,
    pub learning_rates: Vec<f64>,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub max_len: usize,
    pub mode: InputMode,
}

impl Default for FinetuneRecipe {
    fn default() -> Self {
        FinetuneRecipe {
            batch_size: 32,
            learning_rates: vec![2.5e-5, 5e-5, 7.5e-5],
            warmup_fraction: 0.02,
            epochs: 15,
            seeds: vec![1, 2, 3],
            max_len: 512,
            mode: InputMode::Sentence,
        }
    }
}

impl FinetuneRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rates.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("recipe needs a positive batch size, a learning rate and a seed"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ModelParams<f32>,
    pub labels: LabelSet,
    pub learning_rate: f64,
    /// 0 when the initial parameters were kept.
    pub best_epoch: usize,
    pub best_dev: MetricReport,
    /// Dev micro-F1 after each epoch.
    pub dev_history: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Fine-tunes `params` on `train` at learning rate `lr`, returning the
/// epoch-end parameters with the best dev micro-F1. A classifier head sized
/// for `labels` is attached when missing or mismatched.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    labels: &LabelSet,
    recipe: &FinetuneRecipe,
    lr: f64,
    seed: u64,
) -> Result<FinetuneOutcome> {
    recipe.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    for split in [train, dev] {
        let extra: Vec<_> = entity_types(split).difference(&labels.types()).cloned().collect();
        if !extra.is_empty() {
            return Err(Error::invalid(format!("entity types {extra:?} missing from label set")));
        }
    }
    if params.config.vocab_size != tok.vocab_size() {
        return Err(Error::invalid(format!(
            "model vocab {} differs from tokenizer vocab {}",
            params.config.vocab_size,
            tok.vocab_size()
        )));
    }
    let max_len = recipe.max_len.min(params.config.max_positions);
    let mut model = params.clone();
    if model.num_labels() != Some(labels.len()) {
        model = model.with_classifier(labels.len(), seed)?;
    }
    let train_set = encode_examples(tok, train, labels, max_len, recipe.mode)?;
    let batches_per_epoch = train_set.inputs.len().div_ceil(recipe.batch_size);
    let total = (batches_per_epoch * recipe.epochs) as u64;

    let evaluate_dev = |m: &ModelParams<f32>| -> Result<MetricReport> {
        let pred = predict_tags(m, tok, dev, labels, recipe.max_len, recipe.mode)?;
        let gold: Vec<Vec<String>> = dev.iter().map(|e| e.tags.clone()).collect();
        let pred: Vec<Vec<String>> = pred.into_iter().map(|p| p.tags).collect();
        entity_prf(&gold, &pred)
    };
    // epoch 0 stands for the untouched parameters; any trained epoch replaces it
    let mut best = (0, evaluate_dev(&model)?, model.clone());
    let mut dev_history = Vec::new();
    let mut train_loss = Vec::new();
    if total > 0 {
        let hyper = OptimHyper::finetuning(lr, total, recipe.warmup_fraction);
        let mut state = AdamWState::new(&model);
        let mut order: Vec<usize> = (0..train_set.inputs.len()).collect();
        for epoch in 0..recipe.epochs {
            order.shuffle(&mut seed::rng(seed, &[seed::SHUFFLE, epoch as u64]));
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(recipe.batch_size) {
                let rows: Vec<&AlignedInput> = chunk.iter().map(|&i| &train_set.inputs[i]).collect();
                let batch = collate(&rows, tok.pad_id());
                let step = state.step;
                let mode = Mode::Train { seed: seed::derive(seed, &[seed::DROPOUT, step]) };
                let (loss, mut grads) = classifier_loss_and_grad(&model, &batch, mode)?;
                clip_gradients(&mut grads, hyper.clip_norm)?;
                adamw_step(&mut state, &mut model, &grads, lr_at_step(step, &hyper)?, &hyper)?;
                epoch_loss += loss as f64;
            }
            train_loss.push(epoch_loss / batches_per_epoch as f64);
            let report = evaluate_dev(&model)?;
            log::info!("epoch {} loss {:.4} dev micro-F1 {:.4}", epoch + 1, train_loss[epoch], report.micro.f1);
            dev_history.push(report.micro.f1);
            if best.0 == 0 || report.micro.f1 > best.1.micro.f1 {
                best = (epoch + 1, report, model.clone());
            }
        }
    }
    Ok(FinetuneOutcome {
        params: best.2,
        labels: labels.clone(),
        learning_rate: lr,
        best_epoch: best.0,
        best_dev: best.1,
        dev_history,
        train_loss,
    })
}

/// Predicted tags for one example. `truncated[i]` marks words that fell
/// outside the model input and were tagged `O`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub tags: Vec<String>,
    pub truncated: Vec<bool>,
}

/// Argmax tag per word, read at each word's first subtoken.
pub fn predict_tags(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    examples: &[LabeledExample],
    labels: &LabelSet,
    max_len: usize,
    mode: InputMode,
) -> Result<Vec<Prediction>> {
    let n_labels = params.num_labels().ok_or_else(|| Error::invalid("model has no token-classification head"))?;
    if n_labels != labels.len() {
        return Err(Error::Shape(format!("head has {n_labels} labels, label set {}", labels.len())));
    }
    let max_len = max_len.min(params.config.max_positions);
    // tags are irrelevant for prediction; align against `O`
    let blank: Vec<LabeledExample> = examples
        .iter()
        .map(|e| LabeledExample { tags: vec!["O".into(); e.words.len()], ..e.clone() })
        .collect();
    let set = encode_examples(tok, &blank, labels, max_len, mode)?;
    let mut out = vec![None; examples.len()];
    const EVAL_BATCH: usize = 32;
    for (chunk_idx, chunk) in set.inputs.chunks(EVAL_BATCH).enumerate() {
        let rows: Vec<&AlignedInput> = chunk.iter().collect();
        let batch = collate(&rows, tok.pad_id());
        let logits = forward_classifier(params, &batch, Mode::Eval)?;
        for (b, input) in chunk.iter().enumerate() {
            let group = &set.members[chunk_idx * EVAL_BATCH + b];
            let mut words = input.word_starts.iter();
            for &ex in group {
                let mut tags = Vec::with_capacity(examples[ex].words.len());
                let mut truncated = Vec::with_capacity(examples[ex].words.len());
                for _ in 0..examples[ex].words.len() {
                    match words.next().copied().flatten() {
                        Some(pos) => {
                            let row = logits.slice(ndarray::s![b, pos, ..]);
                            let best = row
                                .iter()
                                .enumerate()
                                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                                .0;
                            tags.push(labels.tag(best).to_string());
                            truncated.push(false);
                        }
                        None => {
                            tags.push("O".to_string());
                            truncated.push(true);
                        }
                    }
                }
                out[ex] = Some(Prediction { tags, truncated });
            }
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every example predicted")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_bpe, SpecialTokens};

    fn example(words: &str, tags: &str, doc: &str) -> LabeledExample {
        LabeledExample {
            words: words.split_whitespace().map(String::from).collect(),
            tags: tags.split_whitespace().map(String::from).collect(),
            language: "en".into(),
            doc_id: doc.into(),
        }
    }

    fn tokenizer() -> Tokenizer {
        let text = ["the patient has diabetes", "the patient takes aspirin daily", "no fever today"];
        train_bpe(text.iter().copied(), 300, SpecialTokens::default()).unwrap()
    }

    #[test]
    fn label_set_order() {
        let set = LabelSet::from_examples(&[example("a b c", "B-ZED O I-ALPHA", "d")]);
        assert_eq!(set.tags(), ["O", "B-ALPHA", "I-ALPHA", "B-ZED", "I-ZED"]);
        assert_eq!(set.id("I-ZED"), Some(4));
    }

    #[test]
    fn first_subtoken_carries_the_label() {
        let tok = tokenizer();
        let words: Vec<String> = vec!["the".into(), "xylophonist".into()];
        let aligned = tokenize_and_align(&tok, &words, &[0, 1], 64).unwrap();
        let start = aligned.word_starts[1].unwrap();
        assert!(aligned.ids.len() - start >= 3);
        assert_eq!(aligned.labels[start], 1);
        assert!(aligned.labels[start + 1..].iter().all(|&l| l == IGNORE));
        assert_eq!(aligned.labels[0], IGNORE);
        assert_eq!(aligned.ids[0], tok.bos_id());
        let firsts = aligned.labels.iter().filter(|&&l| l != IGNORE).count();
        assert_eq!(firsts, words.len());
    }

    #[test]
    fn single_token_words_keep_tags() {
        let tok = tokenizer();
        let words: Vec<String> = ["the", "patient", "has"].iter().map(|s| s.to_string()).collect();
        for (i, w) in words.iter().enumerate() {
            let text = if i == 0 { w.clone() } else { format!(" {w}") };
            assert_eq!(tok.encode(&text).len(), 1, "{text:?}");
        }
        let aligned = tokenize_and_align(&tok, &words, &[2, 0, 1], 64).unwrap();
        assert_eq!(aligned.labels[1..], [2, 0, 1]);
    }

    #[test]
    fn full_text_truncates_sentence_mode_does_not() {
        let tok = tokenizer();
        let sentence = "the patient has diabetes";
        let docs: Vec<LabeledExample> = (0..20).map(|_| example(sentence, "O O O B-DIS", "doc")).collect();
        let labels = LabelSet::from_examples(&docs);
        let full = encode_examples(&tok, &docs, &labels, 40, InputMode::FullText).unwrap();
        assert_eq!(full.inputs.len(), 1);
        assert_eq!(full.truncations, 1);
        assert!(full.inputs[0].truncated_words() > 0);
        let sent = encode_examples(&tok, &docs, &labels, 40, InputMode::Sentence).unwrap();
        assert_eq!(sent.inputs.len(), 20);
        assert_eq!(sent.truncations, 0);
    }

    #[test]
    fn prediction_shapes_and_truncation_flags() {
        use crate::model::ModelConfig;
        let tok = tokenizer();
        let docs: Vec<LabeledExample> = (0..6).map(|_| example("the patient has diabetes", "O O O B-DIS", "doc")).collect();
        let labels = LabelSet::from_examples(&docs);
        let cfg = ModelConfig { max_positions: 16, ..ModelConfig::desk(tok.vocab_size()) };
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap().with_classifier(labels.len(), 0).unwrap();
        let preds = predict_tags(&params, &tok, &docs, &labels, 16, InputMode::FullText).unwrap();
        assert_eq!(preds.len(), 6);
        assert!(preds.iter().all(|p| p.tags.len() == 4));
        assert!(!preds[0].truncated[0]);
        assert!(preds[5].truncated.iter().all(|&t| t));
        assert!(preds[5].tags.iter().all(|t| t == "O"));
        assert!(predict_tags(&params, &tok, &[], &labels, 16, InputMode::Sentence).unwrap().is_empty());

        let bare = ModelParams::<f32>::init(&cfg, 0).unwrap();
        assert!(predict_tags(&bare, &tok, &docs, &labels, 16, InputMode::Sentence).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        use crate::model::ModelConfig;
        let tok = tokenizer();
        let train = vec![example("the patient has diabetes", "O O O B-DIS", "a")];
        let labels = LabelSet::from_examples(&train);
        let params = ModelParams::<f32>::init(&ModelConfig::desk(tok.vocab_size()), 0)
            .unwrap()
            .with_classifier(labels.len(), 1)
            .unwrap();
        let recipe = FinetuneRecipe { epochs: 0, ..FinetuneRecipe::default() };
        let out = finetune(&params, &tok, &train, &train, &labels, &recipe, 5e-5, 1).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.best_epoch, 0);
        assert!(out.dev_history.is_empty());
        assert!(finetune(&params, &tok, &[], &train, &labels, &recipe, 5e-5, 1).is_err());
    }
}
