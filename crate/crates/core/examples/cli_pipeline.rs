//! Every CLI stage in sequence on the bundled fixtures, at toy sizes. Same
//! as running the `bilmforge` binary with these arguments.

use std::path::{Path, PathBuf};

use bilmforge::cli::dispatch;

fn run(args: &[&str]) {
    println!("$ bilmforge {}", args.join(" "));
    let code = dispatch(std::iter::once("bilmforge").chain(args.iter().copied()));
    assert_eq!(code, 0, "stage failed");
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn main() {
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let work: PathBuf = std::env::temp_dir().join("bilmforge-example-cli");
    let _ = std::fs::remove_dir_all(&work);
    let (tok, pre, long, ft) = (work.join("tok"), work.join("pretrain"), work.join("long"), work.join("finetune"));

    run(&["balance", "--manifest", &s(&fx.join("corpus/manifest.csv")), "--out", &s(&work.join("plan.json")),
        "--emit", &s(&work.join("balanced.txt")), "--seed", "1"]);
    run(&["train-tokenizer", "--input", &s(&work.join("balanced.txt")), "--vocab-size", "600", "--out", &s(&tok)]);
    run(&["pretrain", "--tokenizer", &s(&tok), "--input", &s(&work.join("balanced.txt")), "--out", &s(&pre),
        "--seq-len", "64", "--batch-size", "8", "--max-steps", "20", "--warmup-steps", "2", "--peak-lr", "1e-3",
        "--checkpoint-every", "10"]);
    run(&["convert-long", "--checkpoint", &s(&pre.join("final")), "--max-positions", "512", "--window", "32", "--out", &s(&long)]);

    let ner = fx.join("ner/en");
    run(&["finetune", "--checkpoint", &s(&long), "--tokenizer", &s(&tok), "--train", &s(&ner.join("dev.conll")),
        "--dev", &s(&ner.join("test.conll")), "--test", &s(&ner.join("test.conll")), "--epochs", "2",
        "--learning-rates", "5e-4", "--seeds", "1", "--max-len", "64", "--out", &s(&ft)]);
    run(&["evaluate", "--gold", &s(&ner.join("test.conll")), "--pred", &s(&ner.join("test.conll")),
        "--out", &s(&work.join("eval/identical.json"))]);
    println!("outputs under {}", work.display());
}
