//! Finite-difference check of the hand-written backward pass, for the dense
//! encoder and for a sliding-window encoder with global tokens.

use bilmforge::mlmdata::{random_batch, MaskingConfig, VocabInfo};
use bilmforge::model::{convert_to_long, finite_difference_check, ModelConfig, ModelParams};

fn main() -> bilmforge::Result<()> {
    let vocab = VocabInfo { vocab_size: 512, mask_id: 3, pad_id: 0 };
    let batch = random_batch(&vocab, &MaskingConfig::default(), 2, 64, 1)?;

    let dense = ModelParams::<f64>::init(&ModelConfig::desk(512), 0)?;
    let sliding = convert_to_long(&ModelParams::<f64>::init(&ModelConfig { max_positions: 64, ..ModelConfig::desk(512) }, 0)?, 128, 16)?;
    let sliding = ModelParams { config: sliding.config.with_global(vec![0, 33]), ..sliding };

    for (name, params) in [("dense", &dense), ("sliding", &sliding)] {
        let points = finite_difference_check(params, &batch, 20, 1e-3, 2)?;
        for p in &points {
            println!("{name:<8} {:<28} [{:>5}] analytic {:+.6e} numeric {:+.6e} rel {:.1e}", p.tensor, p.index, p.analytic, p.numeric, p.rel_error);
        }
        let worst = points.iter().map(|p| p.rel_error).fold(0.0, f64::max);
        println!("{name}: worst relative error {worst:.2e}\n");
    }
    Ok(())
}
