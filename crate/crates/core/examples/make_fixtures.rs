//! Regenerates the bundled fixtures under `fixtures/`.
//!
//! ```text
//! cargo run --example make_fixtures
//! ```
//!
//! The NER splits are 350/75/75 sentences per language from
//! `parallel_ner(500, 5, 2024)`. The demo corpus reuses the same generator
//! with another seed so that pretraining text and NER text differ.

use std::fs;
use std::path::Path;

use bilmforge::harness::write_conll;
use bilmforge::synthetic::{parallel_ner, plain_text, split3};

fn main() -> bilmforge::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");

    let ner = parallel_ner(500, 5, 2024);
    for (lang, examples) in [("en", &ner.en), ("es", &ner.es)] {
        let (train, dev, test) = split3(examples, 350, 75);
        for (split, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
            write_conll(root.join("ner").join(lang).join(format!("{split}.conll")), part, None)?;
        }
    }

    let corpus = root.join("corpus");
    fs::create_dir_all(&corpus).map_err(|e| bilmforge::Error::Io { path: corpus.clone(), source: e })?;
    let text = parallel_ner(400, 8, 7);
    let notes = parallel_ner(60, 4, 11);
    let files = [
        ("pubmed_en.txt", "en", "medical", plain_text(&text.en)),
        ("pubmed_es.txt", "es", "medical", plain_text(&text.es[..80])),
        ("hospital_es.txt", "es", "clinical", plain_text(&notes.es)),
    ];
    let mut manifest = String::from("source,language,category,word_count,path\n");
    for (name, lang, category, body) in &files {
        let path = corpus.join(name);
        fs::write(&path, body).map_err(|e| bilmforge::Error::Io { path: path.clone(), source: e })?;
        let words = body.split_whitespace().count();
        let source = name.trim_end_matches(".txt");
        manifest.push_str(&format!("{source},{lang},{category},{words},{name}\n"));
    }
    let path = corpus.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| bilmforge::Error::Io { path: path.clone(), source: e })?;
    println!("fixtures written to {}", root.display());
    Ok(())
}
