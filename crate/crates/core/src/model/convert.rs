use ndarray::Array2;

use super::config::AttentionKind;
use super::params::{GlobalProjections, ModelParams};
use super::Scalar;
use crate::error::{Error, Result};

/// Turns a dense base model into a sliding-window model accepting
/// `new_max_positions` tokens.
///
/// Position embeddings are tiled (row `i` of the new table is row
/// `i mod base_max` of the old one) and global projections start as copies
/// of the local query/key/value projections. Everything else is copied.
pub fn convert_to_long<F: Scalar>(
    base: &ModelParams<F>,
    new_max_positions: usize,
    window: usize,
) -> Result<ModelParams<F>> {
    let base_max = base.config.max_positions;
    if new_max_positions == 0 || new_max_positions % base_max != 0 {
        return Err(Error::invalid(format!(
            "new length {new_max_positions} is not a positive multiple of {base_max}"
        )));
    }
    let mut long = base.clone();
    long.config.max_positions = new_max_positions;
    long.config.attention = AttentionKind::Sliding { window, global: Vec::new() };
    long.config.validate()?;

    long.position_embedding = Array2::from_shape_fn((new_max_positions, base.config.hidden), |(i, j)| {
        base.position_embedding[[i % base_max, j]]
    });
    for layer in &mut long.layers {
        layer.global = Some(GlobalProjections {
            query: layer.query.clone(),
            key: layer.key.clone(),
            value: layer.value.clone(),
        });
    }
    Ok(long)
}
