//! MLM pretraining loop: dynamic masking per epoch, AdamW with clipping and
//! a warmup schedule, periodic checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlmdata::{apply_masking, MaskedBatch, MaskingConfig, Segment, VocabInfo};
use crate::model::{mlm_loss_and_grad, save_checkpoint, Mode, ModelConfig, ModelParams};
use crate::optim::{adamw_step, clip_gradients, lr_at_step, AdamWState, OptimHyper};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub optim: OptimHyper,
    pub masking: MaskingConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub state: AdamWState<f32>,
    pub hyper: OptimHyper,
    pub seed: u64,
}

impl Trainer {
    pub fn new(params: ModelParams<f32>, hyper: OptimHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let state = AdamWState::new(&params);
        Ok(Trainer { params, state, hyper, seed })
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    /// One update on `batch`. The learning rate is the schedule value at the
    /// number of updates already taken.
    pub fn train_step(&mut self, batch: &MaskedBatch) -> Result<StepStats> {
        let step = self.state.step;
        let lr = lr_at_step(step, &self.hyper)?;
        let mode = Mode::Train { seed: seed::derive(self.seed, &[seed::DROPOUT, step]) };
        let (loss, mut grads) = mlm_loss_and_grad(&self.params, batch, mode)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grad_norm = clip_gradients(&mut grads, self.hyper.clip_norm)?;
        adamw_step(&mut self.state, &mut self.params, &grads, lr, &self.hyper)?;
        Ok(StepStats {
            step: self.state.step,
            loss: loss as f64,
            grad_norm,
            lr,
        })
    }
}

/// Outcome of [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<StepStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from scratch on `segments` for `config.optim.max_steps` updates.
/// Segments are reshuffled and re-masked every epoch. When `out_dir` is set,
/// checkpoints land in `out_dir/step-N` and a JSON-lines log in
/// `out_dir/train_log.jsonl`.
pub fn pretrain(
    segments: &[Segment],
    vocab: &VocabInfo,
    config: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    if segments.is_empty() {
        return Err(Error::Empty("no pretraining segments".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if config.model.vocab_size != vocab.vocab_size {
        return Err(Error::invalid(format!(
            "model vocab {} differs from tokenizer vocab {}",
            config.model.vocab_size, vocab.vocab_size
        )));
    }
    let params = ModelParams::init(&config.model, config.seed)?;
    let mut trainer = Trainer::new(params, config.optim.clone(), config.seed)?;

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut epoch = 0u64;
    'outer: loop {
        order.shuffle(&mut seed::rng(config.seed, &[seed::SHUFFLE, epoch]));
        for chunk in order.chunks(config.batch_size) {
            if trainer.step() >= config.optim.max_steps {
                break 'outer;
            }
            let rows = chunk
                .iter()
                .map(|&i| apply_masking(&segments[i], &config.masking, vocab, config.seed, i as u64, epoch))
                .collect::<Result<Vec<_>>>()?;
            let stats = trainer.train_step(&MaskedBatch::from_rows(&rows)?)?;
            log::debug!("step {} loss {:.4} lr {:.3e}", stats.step, stats.loss, stats.lr);
            if let Some((file, path)) = log.as_mut() {
                writeln!(file, "{}", serde_json::to_string(&stats)?).map_err(|e| Error::io(&*path, e))?;
            }
            history.push(stats);
            let every = config.checkpoint_every;
            let last = stats.step == config.optim.max_steps;
            if let Some(dir) = out_dir {
                if (every > 0 && stats.step % every == 0) || last {
                    let path = dir.join(format!("step-{}", stats.step));
                    save_checkpoint(&trainer.params, Some(&trainer.state), &path)?;
                    checkpoints.push(path);
                }
            }
        }
        epoch += 1;
    }
    Ok(PretrainOutcome {
        params: trainer.params,
        history,
        checkpoints,
    })
}
