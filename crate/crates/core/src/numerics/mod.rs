//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass; calling
//! [`Graph::backward`] on a scalar node accumulates exact gradients into the
//! trainable leaves. All reductions run in index order, so two runs over the
//! same inputs give bitwise-identical values and gradients.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use kernels::conv_out_len;
pub use ops::{softmax_in_place, BatchStats, BN_EPS};
pub use tensor::Tensor;

/// Scalar type of every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type of every tensor.
#[cfg(feature = "f32")]
pub type Real = f32;
