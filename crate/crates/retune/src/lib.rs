//! Desk-scale toolkit for adapting and reusing self-supervised speech
//! models.
//!
//! The core is a deterministic differentiable graph over a generic scalar
//! (f32 for training, f64 for finite-difference verification). On top of it:
//! a convolutional feature extractor with integer and fractional strides, a
//! pre-norm transformer encoder, a gumbel-softmax quantizer, and the three
//! training objectives (masked contrastive pre-training with a diversity
//! term, frame-wise cross entropy, bandwidth adaptation). Checkpoints are
//! single self-describing files whose every byte is covered by a hash or a
//! structural check. The `retune` binary drives synthesis, staged training,
//! stride surgery, and verification; everything is reproducible bit for bit
//! from one root seed.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod extractor;
pub mod freeze;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod wav;

pub use error::{Error, Result};

/// The training-precision tensor.
pub type TensorF32 = tensor::Tensor<f32>;
/// The training-precision graph.
pub type GraphF32 = graph::Graph<f32>;
/// The training-precision model.
pub type ModelF32 = model::Model<f32>;
/// The training-precision optimizer state.
pub type AdamF32 = optim::AdamState<f32>;
