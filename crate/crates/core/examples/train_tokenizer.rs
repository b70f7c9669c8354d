//! Train a byte-level BPE vocabulary on the demo corpus and inspect a few
//! encodings.

use std::path::Path;

use bilmforge::corpus::split_documents;
use bilmforge::tokenizer::{train_bpe, SpecialTokens, Tokenizer};

fn main() -> bilmforge::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let mut docs = Vec::new();
    for name in ["pubmed_en.txt", "pubmed_es.txt"] {
        let text = std::fs::read_to_string(dir.join(name)).expect("fixture present");
        docs.extend(split_documents(&text));
    }
    let tok = train_bpe(&docs, 800, SpecialTokens::default())?;
    println!("vocabulary size {} ({} merges)", tok.vocab_size(), tok.merges().len());

    for text in ["Se realizó una endoscopy del duodenum.", "metformin 850 mg", "dolor torácico ✓"] {
        let ids = tok.encode(text);
        let pieces: Vec<String> = ids.iter().map(|&id| tok.token_string(id).unwrap_or_default()).collect();
        println!("{text:?} -> {ids:?}\n    {pieces:?}");
        assert_eq!(tok.decode(&ids)?, text);
    }

    let out = std::env::temp_dir().join("bilmforge-example-tokenizer");
    tok.save(&out)?;
    assert_eq!(Tokenizer::load(&out)?.encode("lupus"), tok.encode("lupus"));
    println!("saved to {}", out.display());
    Ok(())
}
