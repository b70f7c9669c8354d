//! Sliding-window attention and conversion of a 64-position encoder into a
//! 512-position one.

use bilmforge::mlmdata::{random_batch, MaskingConfig, VocabInfo};
use bilmforge::model::{
    attention, convert_to_long, forward_mlm, truncated_normal, AttentionKind, AttentionMask, Mode, ModelConfig,
    ModelParams,
};
use rand::SeedableRng;

fn main() -> bilmforge::Result<()> {
    // band of half-width 2 with one global token
    let kind = AttentionKind::Sliding { window: 4, global: vec![0] };
    let mask = AttentionMask::new(&kind, &[true; 10])?;
    for t in 0..10 {
        let row: String = (0..10).map(|s| if mask.allowed(t, s) { '#' } else { '.' }).collect();
        println!("{t}: {row}");
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let [q, k, v] = [0, 1, 2].map(|_| truncated_normal::<f64>((10, 8), &mut rng));
    let out = attention(q.view(), k.view(), v.view(), &kind, &[true; 10])?;
    println!("row 5 weights: {:.3}", out.weights.row(5));

    let base = ModelParams::<f32>::init(&ModelConfig { max_positions: 64, ..ModelConfig::desk(300) }, 1)?;
    let long = convert_to_long(&base, 512, 32)?;
    println!("positions {} -> {}, window 32", base.config.max_positions, long.config.max_positions);

    let vocab = VocabInfo { vocab_size: 300, mask_id: 3, pad_id: 0 };
    let batch = random_batch(&vocab, &MaskingConfig::default(), 1, 400, 2)?;
    let loss = forward_mlm(&long, &batch, Mode::Eval)?.loss;
    println!("MLM loss on a 400-token input: {loss:.4}");
    Ok(())
}
