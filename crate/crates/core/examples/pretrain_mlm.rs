//! Masked-language-model pretraining of a desk-scale encoder on the demo
//! corpus, with checkpoints every 20 steps.

use std::path::Path;

use bilmforge::corpus::split_documents;
use bilmforge::mlmdata::{flatten_documents, segment_stream, MaskingConfig, VocabInfo};
use bilmforge::model::{load_checkpoint, ModelConfig};
use bilmforge::optim::OptimHyper;
use bilmforge::pretrain::{pretrain, PretrainConfig};
use bilmforge::tokenizer::{train_bpe, SpecialTokens};

fn main() -> bilmforge::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let mut docs = Vec::new();
    for name in ["pubmed_en.txt", "pubmed_es.txt"] {
        docs.extend(split_documents(&std::fs::read_to_string(dir.join(name)).expect("fixture present")));
    }
    let tok = train_bpe(&docs, 600, SpecialTokens::default())?;
    let encoded: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode(d)).collect();
    let segments = segment_stream(&flatten_documents(&encoded, tok.bos_id()), 128, tok.pad_id())?;
    println!("{} segments of 128 tokens", segments.len());

    let config = PretrainConfig {
        model: ModelConfig { max_positions: 128, ..ModelConfig::desk(tok.vocab_size()) },
        optim: OptimHyper { peak_lr: 1e-3, warmup_steps: 6, max_steps: 60, ..OptimHyper::base_pretraining() },
        masking: MaskingConfig::default(),
        batch_size: 8,
        seed: 3,
        checkpoint_every: 20,
    };
    let out = std::env::temp_dir().join("bilmforge-example-pretrain");
    let outcome = pretrain(&segments, &VocabInfo::of(&tok), &config, Some(&out))?;
    for s in outcome.history.iter().step_by(10) {
        println!("step {:>3}  loss {:.3}  lr {:.2e}  |g| {:.2}", s.step, s.loss, s.lr, s.grad_norm);
    }
    let last = outcome.checkpoints.last().expect("final checkpoint");
    assert_eq!(load_checkpoint(last)?, outcome.params);
    println!("checkpoints: {:?}", outcome.checkpoints);
    Ok(())
}
