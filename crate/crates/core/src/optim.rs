//! AdamW with decoupled weight decay, global-norm gradient clipping and the
//! warmup + linear / warmup + cubic-polynomial learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Linear,
    Poly3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub decay: DecayKind,
}

impl OptimHyper {
    /// Base pretraining: peak 2.683e-4, 7.5k warmup, 125k steps, linear decay.
    pub fn base_pretraining() -> Self {
        OptimHyper {
            peak_lr: 2.683e-4,
            warmup_steps: 7_500,
            max_steps: 125_000,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            decay: DecayKind::Linear,
        }
    }

    /// Continued pretraining of the long model: peak 3e-5, 500 warmup,
    /// 65k steps, cubic decay.
    pub fn long_pretraining() -> Self {
        OptimHyper {
            peak_lr: 3e-5,
            warmup_steps: 500,
            max_steps: 65_000,
            beta1: 0.9,
            beta2: 0.9,
            epsilon: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
            decay: DecayKind::Poly3,
        }
    }

    /// Fine-tuning: linear decay with `ceil(warmup_fraction * total)` warmup
    /// steps and library-default Adam moments.
    pub fn finetuning(peak_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        let warmup = (warmup_fraction * total_steps as f64).ceil() as u64;
        OptimHyper {
            peak_lr,
            warmup_steps: warmup.min(total_steps.saturating_sub(1)),
            max_steps: total_steps,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            decay: DecayKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.max_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} must be below max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) || !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("epsilon must be positive; lr and weight decay non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        Ok(())
    }
}

pub fn lr_at_step(step: u64, hyper: &OptimHyper) -> Result<f64> {
    if step > hyper.max_steps {
        return Err(Error::invalid(format!("step {step} beyond max_steps {}", hyper.max_steps)));
    }
    if hyper.warmup_steps >= hyper.max_steps {
        return Err(Error::invalid("warmup_steps must be below max_steps"));
    }
    let (w, max) = (hyper.warmup_steps, hyper.max_steps);
    if step < w {
        return Ok(hyper.peak_lr * step as f64 / w as f64);
    }
    let remaining = 1.0 - (step - w) as f64 / (max - w) as f64;
    Ok(match hyper.decay {
        DecayKind::Linear => hyper.peak_lr * remaining,
        DecayKind::Poly3 => hyper.peak_lr * remaining.powi(3),
    })
}

/// Global L2 norm over every gradient tensor, accumulated in f64.
pub fn global_norm<F: Scalar>(grads: &ModelParams<F>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `clip_norm`. Returns
/// the norm before clipping. Fails on NaN or infinite gradients.
pub fn clip_gradients<F: Scalar>(grads: &mut ModelParams<F>, clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(Error::invalid("clip_norm must be positive"));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        let bad = grads
            .tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
            .unwrap_or_default();
        return Err(Error::NonFinite(format!("gradient of {bad}")));
    }
    if norm > clip_norm {
        let scale = F::from_f64(clip_norm / norm).expect("finite");
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = *x * scale);
        }
    }
    Ok(norm)
}

/// First and second moments plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<F = f32> {
    pub step: u64,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        AdamWState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update of a flat tensor. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<F: Scalar>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    lr: f64,
    hyper: &OptimHyper,
    decay: bool,
) {
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let shrink = if decay { 1.0 - lr * hyper.weight_decay } else { 1.0 };
    let f = |x: F| x.to_f64().expect("float");
    let back = |x: f64| F::from_f64(x).expect("float");
    for i in 0..param.len() {
        let g = f(grad[i]);
        let mi = b1 * f(m[i]) + (1.0 - b1) * g;
        let vi = b2 * f(v[i]) + (1.0 - b2) * g * g;
        m[i] = back(mi);
        v[i] = back(vi);
        let update = (mi / c1) / ((vi / c2).sqrt() + hyper.epsilon);
        param[i] = back(f(param[i]) * shrink - lr * update);
    }
}

/// Applies one AdamW step to every tensor. Biases and norm parameters are
/// exempt from weight decay.
pub fn adamw_step<F: Scalar>(
    state: &mut AdamWState<F>,
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    lr: f64,
    hyper: &OptimHyper,
) -> Result<()> {
    let shapes = |p: &ModelParams<F>| p.tensors().into_iter().map(|t| (t.name, t.shape)).collect::<Vec<_>>();
    let reference = shapes(params);
    if shapes(grads) != reference || shapes(&state.m) != reference || shapes(&state.v) != reference {
        return Err(Error::Shape("optimizer state, gradients and parameters disagree".into()));
    }
    state.step += 1;
    let step = state.step;
    let grads = grads.tensors();
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads).zip(moments) {
        adamw_update(p.data, g.data, m.data, v.data, step, lr, hyper, p.kind.decays());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    #[test]
    fn schedule_checkpoints() {
        let base = OptimHyper::base_pretraining();
        assert!(rel_close(lr_at_step(7_500, &base).unwrap(), 2.683e-4));
        assert_eq!(lr_at_step(125_000, &base).unwrap(), 0.0);
        assert_eq!(lr_at_step(0, &base).unwrap(), 0.0);

        let long = OptimHyper::long_pretraining();
        assert_eq!(lr_at_step(0, &long).unwrap(), 0.0);
        assert!(rel_close(lr_at_step(500, &long).unwrap(), 3e-5));
        let mid = 500 + (65_000 - 500) / 2;
        assert!(rel_close(lr_at_step(mid, &long).unwrap(), 3.75e-6));
        assert_eq!(lr_at_step(65_000, &long).unwrap(), 0.0);
        assert!(lr_at_step(65_001, &long).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup_end() {
        for hyper in [OptimHyper::base_pretraining(), OptimHyper::long_pretraining()] {
            let w = hyper.warmup_steps;
            // left limit of the warmup ramp and right value of the decay branch
            let left = hyper.peak_lr * (w as f64) / (w as f64);
            let right = lr_at_step(w, &hyper).unwrap();
            assert!((left - right).abs() <= 1e-12 * hyper.peak_lr);
            let before = lr_at_step(w - 1, &hyper).unwrap();
            let after = lr_at_step(w + 1, &hyper).unwrap();
            assert!(before < right && after < right);
        }
    }

    #[test]
    fn finetuning_warmup_is_two_percent() {
        let h = OptimHyper::finetuning(5e-5, 1_000, 0.02);
        assert_eq!(h.warmup_steps, 20);
        let h = OptimHyper::finetuning(5e-5, 101, 0.02);
        assert_eq!(h.warmup_steps, 3);
        h.validate().unwrap();
    }

    #[test]
    fn single_step_by_hand() {
        let hyper = OptimHyper {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
            ..OptimHyper::base_pretraining()
        };
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &hyper, true);
        // m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_and_pure_decay() {
        let mut hyper = OptimHyper::base_pretraining();
        let (mut p, mut m, mut v) = ([0.7f64, -2.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &hyper, true);
        assert_eq!(p, [0.7, -2.0]);

        hyper.weight_decay = 0.01;
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, 0.1, &hyper, true);
        assert!((p[0] - 0.7 * (1.0 - 0.001)).abs() < 1e-15);
        assert!((p[1] + 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    /// Plain Adam written out independently.
    fn reference_adam(p: &mut [f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
        let mut m = vec![0.0; p.len()];
        let mut v = vec![0.0; p.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let hyper = OptimHyper::base_pretraining();
        let init: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..100).map(|_| (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();

        let mut expected = init.clone();
        reference_adam(&mut expected, &grads, 1e-2, hyper.beta1, hyper.beta2, hyper.epsilon);

        let (mut p, mut m, mut v) = (init, vec![0.0; 16], vec![0.0; 16]);
        for (t, g) in grads.iter().enumerate() {
            adamw_update(&mut p, g, &mut m, &mut v, t as u64 + 1, 1e-2, &hyper, true);
        }
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn clipping_behaviour() {
        let cfg = ModelConfig::desk(8);
        let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let mut grads = params.zeros_like();
        grads.token_embedding[[0, 0]] = 2.0;
        let norm = clip_gradients(&mut grads, 1.0).unwrap();
        assert_eq!(norm, 2.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-9);
        assert_eq!(grads.token_embedding[[0, 0]], 1.0);

        let once = grads.clone();
        clip_gradients(&mut grads, 1.0).unwrap();
        assert_eq!(grads, once);

        let mut small = params.zeros_like();
        small.layers[0].query.bias[1] = 0.5;
        let copy = small.clone();
        clip_gradients(&mut small, 1.0).unwrap();
        assert_eq!(small, copy);

        small.layers[1].ffn_outer.weight[[0, 0]] = f64::NAN;
        assert!(matches!(clip_gradients(&mut small, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn step_skips_decay_for_biases_and_norms() {
        let cfg = ModelConfig::desk(8);
        let mut params = ModelParams::<f64>::init(&cfg, 0).unwrap();
        params.layers[0].query.bias.fill(1.0);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamWState::new(&params);
        let hyper = OptimHyper {
            weight_decay: 0.5,
            ..OptimHyper::base_pretraining()
        };
        adamw_step(&mut state, &mut params, &grads, 0.1, &hyper).unwrap();
        assert_eq!(params.layers[0].query.bias, before.layers[0].query.bias);
        assert_eq!(params.layers[0].attn_norm.gain, before.layers[0].attn_norm.gain);
        assert_eq!(params.layers[0].query.weight, before.layers[0].query.weight.mapv(|x| x * 0.95));
        assert_eq!(state.step, 1);

        let wrong = ModelParams::<f64>::init(&ModelConfig::desk(9), 0).unwrap().zeros_like();
        assert!(adamw_step(&mut state, &mut params, &wrong, 0.1, &hyper).is_err());
    }
}
