//! Differentiable-operator core.
//!
//! Every op comes as a forward function plus an explicit backward function;
//! there is no tape-based autograd. Layers compose these in [`crate::models`].
//! All ops are generic over [`Real`] so that the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod activation;
mod adam;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod params;
mod real;
mod tensor;

pub use activation::{leaky_relu, leaky_relu_backward, relu, relu_backward, LEAKY_SLOPE};
pub use adam::{adam_step, Adam, AdamState};
pub use batchnorm::{
    batchnorm2d_backward, batchnorm2d_forward, update_running_stats, BatchNormState, BnCache,
    BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGrads, ConvSpec,
};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use loss::{l1_loss, mse_loss, softmax, softmax_cross_entropy, LossOutput};
pub use params::{
    CheckpointEntry, CheckpointIndex, ModelParams, ParamEntry, ParamGroup, ParamId, ParamKind,
};
pub use real::Real;
pub use tensor::Tensor;

/// Whether batch statistics or running statistics drive normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
