//! Token-classification fine-tuning on the bundled English NER fixture,
//! followed by tagging of unseen sentences.
//!
//! One seed and one learning rate keep this under a minute. The full grid
//! of learning rates and seeds is what `harness::run_multiseed` runs.

use std::path::Path;

use bilmforge::harness::{load_conll, write_conll};
use bilmforge::metrics::entity_prf;
use bilmforge::heads::{finetune, predict_tags, FinetuneRecipe, LabelSet, LabeledExample};
use bilmforge::model::{ModelConfig, ModelParams};
use bilmforge::synthetic::plain_text;
use bilmforge::tokenizer::{train_bpe, SpecialTokens};

fn main() -> bilmforge::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ner/en");
    let train = load_conll(dir.join("train.conll"))?;
    let dev = load_conll(dir.join("dev.conll"))?;
    let test = load_conll(dir.join("test.conll"))?;

    let tok = train_bpe(plain_text(&train).lines().filter(|l| !l.is_empty()), 1000, SpecialTokens::default())?;
    let base = ModelParams::init(&ModelConfig { max_positions: 64, ..ModelConfig::desk(tok.vocab_size()) }, 0)?;
    let labels = LabelSet::from_examples(&train);
    let recipe = FinetuneRecipe { epochs: 100, max_len: 64, learning_rates: vec![7.5e-5], seeds: vec![1], ..FinetuneRecipe::default() };

    let outcome = finetune(&base, &tok, &train, &dev, &labels, &recipe, 7.5e-5, 1)?;
    println!("best epoch {} with dev micro-F1 {:.4}", outcome.best_epoch, outcome.best_dev.micro.f1);

    let unseen: Vec<LabeledExample> = ["Pain in the sternum after lumbar puncture", "History of glaucoma , currently on tamoxifen ."]
        .iter()
        .map(|s| {
            let words: Vec<String> = s.split_whitespace().map(String::from).collect();
            LabeledExample { tags: vec!["O".into(); words.len()], words, language: "en".into(), doc_id: "new".into() }
        })
        .collect();
    for (ex, pred) in unseen.iter().zip(predict_tags(&outcome.params, &tok, &unseen, &labels, recipe.max_len, recipe.mode)?) {
        let pairs: Vec<String> = ex.words.iter().zip(&pred.tags).map(|(w, t)| format!("{w}/{t}")).collect();
        println!("{}", pairs.join(" "));
    }

    let predicted = predict_tags(&outcome.params, &tok, &test, &labels, recipe.max_len, recipe.mode)?;
    let tags: Vec<Vec<String>> = predicted.into_iter().map(|p| p.tags).collect();
    let out = std::env::temp_dir().join("bilmforge-example-finetune");
    write_conll(out.join("test.pred.conll"), &test, Some(&tags))?;

    let gold: Vec<Vec<String>> = test.iter().map(|e| e.tags.clone()).collect();
    println!("test: {}", entity_prf(&gold, &tags)?.to_json());
    println!("predictions written to {}", out.display());
    Ok(())
}
