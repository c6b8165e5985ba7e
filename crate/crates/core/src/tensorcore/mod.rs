//! Minimal dense tensors with reverse-mode differentiation.
//!
//! Supplies exactly the operator set the registration network needs: linear
//! algebra, normalization, activations, layout ops (reshape, permute, concat,
//! narrow, row gather/scatter), reductions, trilinear sampling and box sums.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, RowIndex, TensorId};
pub use tensor::{numel, strides, Tensor};

/// LayerNorm epsilon used throughout the network.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
