//! Language balancing over the Table 1 word counts, then a balanced stream
//! over the small demo corpus.
//!
//! ```text
//! cargo run --example balance_corpus
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use bilmforge::corpus::{self, Category};

fn main() -> bilmforge::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let clinical = BTreeSet::from([Category::Clinical]);

    let entries = corpus::load_manifest(fixtures.join("table1_manifest.csv"))?;
    let plan = corpus::compute_sampling(&entries, 0.3, &clinical)?;
    println!("{}", plan.to_export_json()?);

    let demo = corpus::load_manifest(fixtures.join("corpus/manifest.csv"))?;
    let plan = corpus::compute_sampling(&demo, 0.3, &clinical)?;
    let factors = corpus::oversample_factors(&plan)?;
    let stream = corpus::emit_balanced_stream(&demo, &plan, &factors, 7)?;
    for (lang, f) in &factors {
        println!("{lang}: factor {f:.3}");
    }
    let words = |lang: &str| -> usize { stream.iter().filter(|d| d.language == lang).map(|d| d.word_count()).sum() };
    println!("balanced stream: {} documents, en {} words, es {} words", stream.len(), words("en"), words("es"));
    Ok(())
}
