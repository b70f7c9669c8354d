//! Cross-lingual transfer: fine-tune on English only, evaluate on the
//! parallel Spanish fixture, print the results table.

use std::path::Path;

use bilmforge::harness::{load_conll, run_zeroshot, with_language, ZeroShotData, ZeroShotReport};
use bilmforge::heads::FinetuneRecipe;
use bilmforge::model::{ModelConfig, ModelParams};
use bilmforge::synthetic::plain_text;
use bilmforge::tokenizer::{train_bpe, SpecialTokens};

fn main() -> bilmforge::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ner");
    let load = |lang: &str, split: &str| load_conll(root.join(lang).join(format!("{split}.conll"))).map(|e| with_language(e, lang));
    let (train_en, dev_en, test_en) = (load("en", "train")?, load("en", "dev")?, load("en", "test")?);
    let (train_es, dev_es, test_es) = (load("es", "train")?, load("es", "dev")?, load("es", "test")?);

    // The vocabulary sees raw text of both languages; only English labels are used.
    let text = plain_text(&train_en) + &plain_text(&train_es);
    let tok = train_bpe(text.lines().filter(|l| !l.is_empty()), 1000, SpecialTokens::default())?;
    let base = ModelParams::init(&ModelConfig { max_positions: 64, ..ModelConfig::desk(tok.vocab_size()) }, 0)?;

    let recipe = FinetuneRecipe { epochs: 100, max_len: 64, learning_rates: vec![7.5e-5], seeds: vec![1], ..FinetuneRecipe::default() };
    let data = ZeroShotData { train_a: &train_en, dev_a: &dev_en, test_a: &test_en, dev_b: Some(&dev_es), test_b: &test_es };
    let report = run_zeroshot(&base, &tok, data, &recipe, None)?;
    print!("{}", ZeroShotReport::table(&[("desk encoder", &report)]));
    println!("in-language {:.4}, zero-shot {:.4}", report.in_language_f1().mean, report.zero_shot_f1().mean);
    Ok(())
}
