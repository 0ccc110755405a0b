//! Minimal differentiable substrate: tensors on a tape, layers, gradients and
//! an adaptive-moment optimizer.

pub mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod params;

pub use graph::{
    sigmoid, softplus, Activation, Gradients, Graph, Mode, PointwiseFn, Var, BATCH_NORM_EPSILON, PROB_CLAMP,
};
pub use kernels::{conv_output_size, conv_transpose_output_size};
pub(crate) use layers::batch_norm_layer;
pub use layers::{commit_running_stats, LayerSpec, Network, BATCH_NORM_MOMENTUM};
pub use params::{glorot_uniform, Parameter, ParameterSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
