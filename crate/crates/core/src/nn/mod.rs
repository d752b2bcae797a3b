//! Dense tensors, reverse-mode autodiff, layers and optimization.

mod adam;
mod attention;
mod checkpoint;
mod fused;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::Segment;
pub use checkpoint::{Checkpoint, TensorRecord, FORMAT_VERSION};
pub use fused::{focal_logits, focal_probs, ContrastiveGroup};
pub use gradcheck::{
    grad_check, grad_check_input, grad_check_params, relative_error, scaled_relative_error,
    RELATIVE_ERROR_FLOOR,
};
pub use graph::{stable_sigmoid, Gradients, Graph, Var};
pub use layers::{LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
