//! Transformer encoder: parameters, dense and sliding-window attention,
//! forward/backward passes, long-input conversion and checkpoints.

mod attention;
mod checkpoint;
mod config;
mod convert;
mod encoder;
mod gradcheck;
mod params;

pub use attention::{attend_head, attend_head_backward, attention, AttentionMask, AttentionOutput, HeadGrads, HeadState, Qkv};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, load_optimizer_state, save_checkpoint, CHECKPOINT_FORMAT};
pub use config::{AttentionKind, ModelConfig};
pub use convert::convert_to_long;
pub use gradcheck::{finite_difference_check, relative_error, GradCheckPoint, GRAD_FLOOR};
pub use encoder::{
    classifier_loss_and_grad, forward_classifier, forward_mlm, hidden_states, mlm_loss, mlm_loss_and_grad, Mode,
    MlmOutput,
};
pub use params::{
    truncated_normal, GlobalProjections, LayerParams, Linear, MlmHead, ModelParams, Norm, TensorKind, TensorMut,
    TensorRef, INIT_STD,
};

/// Floating-point element type the encoder can run in. Training uses `f32`;
/// gradient checks run the same code in `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: ndarray::LinalgScalar
        + ndarray::ScalarOperand
        + num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::NumAssign
        + std::fmt::Debug
        + std::fmt::Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Initialises a model; alias of [`ModelParams::init`].
pub fn init_model<F: Scalar>(config: &ModelConfig, seed: u64) -> crate::Result<ModelParams<F>> {
    ModelParams::init(config, seed)
}

/// Gradient of the MLM loss; alias of [`mlm_loss_and_grad`].
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    batch: &crate::mlmdata::MaskedBatch,
    mode: Mode,
) -> crate::Result<ModelParams<F>> {
    mlm_loss_and_grad(params, batch, mode).map(|(_, g)| g)
}
