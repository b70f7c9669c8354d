use rand::Rng as _;

use super::encoder::{mlm_loss, mlm_loss_and_grad, Mode};
use super::params::ModelParams;
use crate::error::Result;
use crate::mlmdata::MaskedBatch;
use crate::seed;

/// One probed coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckPoint {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-8;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Compares reverse-mode MLM gradients with central differences of step
/// `eps` on `coords` random coordinates. Tensors are picked uniformly, then
/// an element within the tensor.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    batch: &MaskedBatch,
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradCheckPoint>> {
    let (_, grads) = mlm_loss_and_grad(params, batch, Mode::Eval)?;
    let mut rng = seed::rng(seed, &[seed::INIT, 0x6772_6164]);
    let layout: Vec<(String, usize)> = params.tensors().into_iter().map(|t| (t.name, t.data.len())).collect();
    let analytic = grads.tensors();
    let mut probe = params.clone();
    let mut points = Vec::with_capacity(coords);
    for _ in 0..coords {
        let which = rng.gen_range(0..layout.len());
        let index = rng.gen_range(0..layout[which].1);
        let original = params.tensors()[which].data[index];
        let mut loss_at = |value: f64| -> Result<f64> {
            probe.tensors_mut()[which].data[index] = value;
            mlm_loss(&probe, batch, Mode::Eval)
        };
        let up = loss_at(original + eps)?;
        let down = loss_at(original - eps)?;
        probe.tensors_mut()[which].data[index] = original;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[which].data[index];
        points.push(GradCheckPoint {
            tensor: layout[which].0.clone(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(points)
}
