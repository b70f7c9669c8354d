//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria run one after another so the timings
//! are meaningful on a single core.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bilmforge::corpus::{self, Category};
use bilmforge::harness::{self, ZeroShotData, ZeroShotReport};
use bilmforge::heads::FinetuneRecipe;
use bilmforge::metrics::{entity_prf, Counts, Tag};
use bilmforge::mlmdata::{apply_masking_traced, random_batch, Corruption, MaskingConfig, Segment, VocabInfo};
use bilmforge::model::{
    attention, convert_to_long, finite_difference_check, forward_mlm, load_checkpoint, save_checkpoint,
    truncated_normal, AttentionKind, AttentionMask, Mode, ModelConfig, ModelParams,
};
use bilmforge::optim::{lr_at_step, OptimHyper};
use bilmforge::pretrain::Trainer;
use bilmforge::synthetic::plain_text;
use bilmforge::tokenizer::{train_bpe, SpecialTokens, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn balancing() -> Outcome {
    let entries = corpus::load_manifest(fixtures().join("table1_manifest.csv")).map_err(err)?;
    let plan = corpus::compute_sampling(&entries, 0.3, &BTreeSet::from([Category::Clinical])).map_err(err)?;
    let factors = corpus::oversample_factors(&plan).map_err(err)?;
    let (es, en) = (plan.languages["es"], plan.languages["en"]);
    let f = factors["es"];
    check(
        (es.p - 0.04).abs() <= 0.005
            && (es.q - 0.277).abs() <= 0.001
            && (en.q - 0.723).abs() <= 0.001
            && (9.3..=9.7).contains(&f),
        format!("p_es={:.4} q_es={:.4} q_en={:.4} factor_es={f:.4}", es.p, es.q, en.q),
    )
}

fn gradients() -> Outcome {
    let v = 512;
    let params = ModelParams::<f64>::init(&ModelConfig::desk(v), 11).map_err(err)?;
    let vocab = VocabInfo { vocab_size: v, mask_id: SpecialTokens::MASK, pad_id: SpecialTokens::PAD };
    let batch = random_batch(&vocab, &MaskingConfig::default(), 2, 64, 12).map_err(err)?;
    let points = finite_difference_check(&params, &batch, 20, 1e-3, 13).map_err(err)?;
    let worst = points.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    check(points.len() == 20 && worst < 1e-4, format!("20 coordinates, worst relative error {worst:.2e}"))
}

fn attention_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let len = rng.gen_range(2..=64);
        let d = rng.gen_range(1..=16);
        let [q, k, v] = [0, 1, 2].map(|_| truncated_normal::<f64>((len, d), &mut rng) * 40.0);
        let real = vec![true; len];
        let dense = attention(q.view(), k.view(), v.view(), &AttentionKind::Dense, &real).map_err(err)?;
        let wide = AttentionKind::Sliding { window: 2 * (len - 1), global: vec![] };
        let band = attention(q.view(), k.view(), v.view(), &wide, &real).map_err(err)?;
        for (a, b) in dense.context.iter().zip(&band.context) {
            worst = worst.max((a - b).abs());
        }

        let narrow = AttentionKind::Sliding { window: 2, global: vec![] };
        let out = attention(q.view(), k.view(), v.view(), &narrow, &real).map_err(err)?;
        let mask = AttentionMask::new(&narrow, &real).map_err(err)?;
        for t in 0..len {
            let enumerated: Vec<usize> = (t.saturating_sub(1)..=(t + 1).min(len - 1)).collect();
            let nonzero: Vec<usize> = (0..len).filter(|&s| out.weights[[t, s]] > 0.0).collect();
            if mask.support(t) != enumerated || nonzero.iter().any(|s| !enumerated.contains(s)) {
                return Err(format!("w=2 support mismatch at row {t} of length {len}"));
            }
        }
    }
    check(worst < 1e-6, format!("50 inputs, max |dense - sliding| {worst:.2e}; w=2 support equals band"))
}

fn conversion() -> Outcome {
    let cfg = ModelConfig { max_positions: 64, ..ModelConfig::desk(512) };
    let base = ModelParams::<f32>::init(&cfg, 31).map_err(err)?;
    let long = convert_to_long(&base, 64, 128).map_err(err)?;
    let vocab = VocabInfo { vocab_size: 512, mask_id: SpecialTokens::MASK, pad_id: SpecialTokens::PAD };
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f32;
    for i in 0..20 {
        let len = rng.gen_range(2..=64);
        let batch = random_batch(&vocab, &MaskingConfig::default(), 2, len, 100 + i).map_err(err)?;
        let a = forward_mlm(&base, &batch, Mode::Eval).map_err(err)?.logits;
        let b = forward_mlm(&long, &batch, Mode::Eval).map_err(err)?.logits;
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f32::max);
    }
    let tiled = convert_to_long(&base, 8 * 64, 64).map_err(err)?;
    let rows_ok = (0..8 * 64).all(|i| {
        tiled.position_embedding.row(i).iter().zip(base.position_embedding.row(i % 64)).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    check(
        worst < 1e-5 && rows_ok,
        format!("20 inputs, max logit difference {worst:.2e}; k=8 tiling rows {}", if rows_ok { "exact" } else { "WRONG" }),
    )
}

fn overfit() -> Outcome {
    let v = 512;
    let cfg = ModelConfig { dropout: 0.0, attn_dropout: 0.0, max_positions: 128, ..ModelConfig::desk(v) };
    let params = ModelParams::<f32>::init(&cfg, 41).map_err(err)?;
    let vocab = VocabInfo { vocab_size: v, mask_id: SpecialTokens::MASK, pad_id: SpecialTokens::PAD };
    let batch = random_batch(&vocab, &MaskingConfig::default(), 32, 128, 42).map_err(err)?;
    let initial = forward_mlm(&params, &batch, Mode::Eval).map_err(err)?.loss as f64;
    let hyper = OptimHyper { peak_lr: 3e-3, warmup_steps: 10, max_steps: 400, beta2: 0.999, ..OptimHyper::base_pretraining() };
    let mut trainer = Trainer::new(params, hyper, 43).map_err(err)?;
    let mut last = f64::NAN;
    for _ in 0..200 {
        last = trainer.train_step(&batch).map_err(err)?.loss;
    }
    let final_loss = forward_mlm(&trainer.params, &batch, Mode::Eval).map_err(err)?.loss as f64;
    let ln_v = (v as f64).ln();
    check(
        final_loss < 0.1 && (initial - ln_v).abs() <= 0.05 * ln_v,
        format!("initial {initial:.4} (ln V = {ln_v:.4}), step-200 loss {last:.4}, final eval loss {final_loss:.4}"),
    )
}

fn schedule() -> Outcome {
    let base = OptimHyper::base_pretraining();
    let long = OptimHyper::long_pretraining();
    let mid = (long.warmup_steps + long.max_steps) / 2;
    let cases = [
        ("base@7500", lr_at_step(7_500, &base).map_err(err)?, 2.683e-4),
        ("base@125000", lr_at_step(125_000, &base).map_err(err)?, 0.0),
        ("long@500", lr_at_step(500, &long).map_err(err)?, 3e-5),
        ("long@mid", lr_at_step(mid, &long).map_err(err)?, 3.75e-6),
    ];
    let ok = cases.iter().all(|&(_, got, want)| if want == 0.0 { got == 0.0 } else { rel(got, want) <= 1e-12 });
    let detail: Vec<String> = cases.iter().map(|(n, got, _)| format!("{n}={got:e}")).collect();
    check(ok, detail.join(" "))
}

fn oracle_spans(t: &[String], sentence: usize) -> BTreeSet<(String, usize, usize, usize)> {
    let n = t.len();
    let mut out = BTreeSet::new();
    for s in 0..n {
        let Some(kind) = Tag::parse(&t[s]).kind().map(str::to_string) else { continue };
        let (b, i) = (format!("B-{kind}"), format!("I-{kind}"));
        let opens = t[s] == b || (t[s] == i && (s == 0 || (t[s - 1] != b && t[s - 1] != i)));
        for e in s + 1..=n {
            if opens && (s + 1..e).all(|k| t[k] == i) && (e == n || t[e] != i) {
                out.insert((kind.clone(), sentence, s, e));
            }
        }
    }
    out
}

fn random_tags(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const KINDS: [&str; 4] = ["DIS", "CHEM", "PROC", "ANAT"];
    (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => "O".to_string(),
            1 => format!("B-{}", KINDS[rng.gen_range(0..4)]),
            _ => format!("I-{}", KINDS[rng.gen_range(0..4)]),
        })
        .collect()
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for case in 0..1000 {
        let (mut gold, mut pred) = (Vec::new(), Vec::new());
        for _ in 0..rng.gen_range(1..4) {
            let n = rng.gen_range(0..14);
            let g = random_tags(&mut rng, n);
            let p = if rng.gen_bool(0.5) {
                g.iter().map(|t| if rng.gen_bool(0.3) { random_tags(&mut rng, 1).remove(0) } else { t.clone() }).collect()
            } else {
                random_tags(&mut rng, n)
            };
            gold.push(g);
            pred.push(p);
        }
        let g: BTreeSet<_> = gold.iter().enumerate().flat_map(|(i, t)| oracle_spans(t, i)).collect();
        let p: BTreeSet<_> = pred.iter().enumerate().flat_map(|(i, t)| oracle_spans(t, i)).collect();
        let mut expected: BTreeMap<String, Counts> = BTreeMap::new();
        for s in g.iter().chain(&p) {
            expected.entry(s.0.clone()).or_default();
        }
        for (kind, c) in expected.iter_mut() {
            c.tp = p.iter().filter(|s| &s.0 == kind && g.contains(*s)).count();
            c.fp = p.iter().filter(|s| &s.0 == kind && !g.contains(*s)).count();
            c.fn_ = g.iter().filter(|s| &s.0 == kind && !p.contains(*s)).count();
        }
        let tp = g.intersection(&p).count() as f64;
        let micro_p = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
        let micro_r = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
        let report = entity_prf(&gold, &pred).map_err(err)?;
        if report.counts != expected || report.micro.p != micro_p || report.micro.r != micro_r {
            return Err(format!("case {case} differs: gold {gold:?} pred {pred:?}"));
        }
    }
    Ok("1000 random pairs match the brute-force span oracle exactly".into())
}

/// Tokenizer and freshly initialised encoder for the bundled NER fixture.
fn ner_setup() -> Result<(Tokenizer, ModelParams<f32>), String> {
    let mut text = String::new();
    for lang in ["en", "es"] {
        let train = harness::load_conll(fixtures().join("ner").join(lang).join("train.conll")).map_err(err)?;
        text.push_str(&plain_text(&train));
    }
    let tok = train_bpe(corpus::split_documents(&text), 1000, SpecialTokens::default()).map_err(err)?;
    let cfg = ModelConfig { max_positions: 64, ..ModelConfig::desk(tok.vocab_size()) };
    let base = ModelParams::init(&cfg, 0).map_err(err)?;
    Ok((tok, base))
}

fn ner_end_to_end() -> Outcome {
    let (tok, base) = ner_setup()?;
    let load = |lang: &str, split: &str| {
        harness::load_conll(fixtures().join("ner").join(lang).join(format!("{split}.conll")))
            .map(|ex| harness::with_language(ex, lang))
            .map_err(err)
    };
    let (train_a, dev_a, test_a) = (load("en", "train")?, load("en", "dev")?, load("en", "test")?);
    let (dev_b, test_b) = (load("es", "dev")?, load("es", "test")?);
    let recipe = FinetuneRecipe { epochs: 100, max_len: 64, ..FinetuneRecipe::default() };
    let data = ZeroShotData { train_a: &train_a, dev_a: &dev_a, test_a: &test_a, dev_b: Some(&dev_b), test_b: &test_b };
    let report = harness::run_zeroshot(&base, &tok, data, &recipe, None).map_err(err)?;
    print!("{}", ZeroShotReport::table(&[("desk encoder", &report)]));
    let (inl, zs) = (report.in_language_f1(), report.zero_shot_f1());
    check(
        report.report.n_seeds == 3 && inl.mean >= 0.95 && zs.mean > 0.5,
        format!(
            "in-language test F1 {:.4}±{:.4}, zero-shot test F1 {:.4}±{:.4} over 3 seeds",
            inl.mean, inl.std, zs.mean, zs.std
        ),
    )
}

fn masking_statistics() -> Outcome {
    let v = 512;
    let vocab = VocabInfo { vocab_size: v, mask_id: SpecialTokens::MASK, pad_id: SpecialTokens::PAD };
    let cfg = MaskingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let (mut maskable, mut counts) = (0usize, [0usize; 3]);
    for i in 0..300 {
        let mut ids: Vec<u32> = (0..512).map(|_| rng.gen_range(SpecialTokens::COUNT as u32..v as u32)).collect();
        ids[0] = SpecialTokens::BOS;
        let segment = Segment { ids, real_len: 512 };
        let (_, trace) = apply_masking_traced(&segment, &cfg, &vocab, 92, i, 0).map_err(err)?;
        maskable += 511;
        for (_, kind) in trace {
            counts[match kind {
                Corruption::Mask => 0,
                Corruption::Random => 1,
                Corruption::Keep => 2,
            }] += 1;
        }
    }
    let selected: usize = counts.iter().sum();
    let frac = counts.map(|c| c as f64 / selected as f64);
    let rate = selected as f64 / maskable as f64;
    check(
        selected >= 10_000
            && (frac[0] - 0.8).abs() <= 0.01
            && (frac[1] - 0.1).abs() <= 0.01
            && (frac[2] - 0.1).abs() <= 0.01
            && (rate - 0.15).abs() <= 0.005,
        format!(
            "{selected} selected, mask/random/keep {:.4}/{:.4}/{:.4}, selection rate {rate:.4}",
            frac[0], frac[1], frac[2]
        ),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap_or_default());
            }
        }
    }
    out
}

fn cli(args: &[&str]) -> Result<(), String> {
    let code = bilmforge::cli::dispatch(std::iter::once("bilmforge").chain(args.iter().copied()));
    if code == 0 { Ok(()) } else { Err(format!("`{}` exited with {code}", args.join(" "))) }
}

fn determinism() -> Outcome {
    // checkpoint roundtrip
    let dir = tempfile::tempdir().map_err(err)?;
    let params = ModelParams::<f32>::init(&ModelConfig::desk(300), 101)
        .and_then(|p| p.with_classifier(9, 102))
        .map_err(err)?;
    save_checkpoint(&params, None, dir.path().join("ckpt")).map_err(err)?;
    let loaded = load_checkpoint(dir.path().join("ckpt")).map_err(err)?;
    let bits = |p: &ModelParams<f32>| -> Vec<u32> { p.tensors().iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect() };
    if loaded.config != params.config || bits(&loaded) != bits(&params) {
        return Err("checkpoint roundtrip is not bit-exact".into());
    }

    // identical run.json, identical outputs
    let ner = fixtures().join("ner").join("en");
    let tok_dir = dir.path().join("tok");
    let out = dir.path().join("run");
    let p = |x: &Path| x.to_str().expect("utf-8 path").to_string();
    cli(&["train-tokenizer", "--input", &p(&fixtures().join("corpus/pubmed_en.txt")), "--vocab-size", "400", "--out", &p(&tok_dir)])?;
    let finetune = [
        "finetune", "--tokenizer", &p(&tok_dir), "--train", &p(&ner.join("dev.conll")), "--dev", &p(&ner.join("test.conll")),
        "--epochs", "2", "--learning-rates", "5e-4", "--seeds", "4,5", "--max-len", "64", "--out", &p(&out),
    ];
    cli(&finetune)?;
    let first = read_tree(&out);
    fs::remove_dir_all(&out).map_err(err)?;
    cli(&finetune)?;
    let second = read_tree(&out);
    let checkpoints = first.keys().filter(|k| k.ends_with("weights.bin")).count();
    if first != second || checkpoints != 2 || !first.contains_key(Path::new("report.json")) {
        return Err(format!("CLI outputs differ between identical runs ({} vs {} files)", first.len(), second.len()));
    }

    // BPE roundtrip
    let tok = Tokenizer::load(&tok_dir).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for i in 0..1000 {
        let n = rng.gen_range(0..40);
        let s: String = (0..n)
            .map(|_| match rng.gen_range(0..4) {
                0 => rng.gen_range(' '..='~'),
                1 => rng.gen_range('\u{a0}'..='\u{17f}'),
                2 => rng.gen_range('\u{4e00}'..='\u{4fff}'),
                _ => rng.r#gen::<char>(),
            })
            .collect();
        if tok.decode(&tok.encode(&s)).map_err(err)? != s {
            return Err(format!("BPE roundtrip failed on string {i}: {s:?}"));
        }
    }
    Ok(format!("checkpoint bit-exact; {} output files byte-identical across runs; 1000 BPE roundtrips", first.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 corpus balancing", balancing),
        ("2 gradient correctness", gradients),
        ("3 attention equivalence", attention_equivalence),
        ("4 long-input conversion", conversion),
        ("5 training sanity", overfit),
        ("6 schedule checkpoints", schedule),
        ("7 metrics oracle", metrics_oracle),
        ("8 synthetic NER end-to-end", ner_end_to_end),
        ("9 masking statistics", masking_statistics),
        ("10 determinism and persistence", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
