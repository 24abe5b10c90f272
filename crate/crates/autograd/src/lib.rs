//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] sweeps
//! it in reverse from a scalar root. Only the operations needed by small
//! convolutional encoder–decoders and their training losses are provided.

mod gemm;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use ops::{
    attention_pool, batch_softmax_weights, bce_with_logits_per_sample, conv2d, dot, kd_per_sample,
    linear, max_pool2, modulate, softmax_slice, upsample2, weighted_block_sum,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
