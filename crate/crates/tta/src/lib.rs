//! Transformer text autoencoder (T-TA): a deep bidirectional language model
//! that produces every token's contextual representation in one forward pass
//! by masking the attention diagonal and isolating the key/value inputs from
//! the layer stack.
//!
//! The crate also carries the two baseline architectures the T-TA is compared
//! against (a causal uniLM and a mask-and-predict biLM), the training
//! objectives for all three, sentence scoring and N-best reranking, an
//! unsupervised semantic-similarity evaluator, and a wall-clock scaling
//! benchmark.
//!
//! All numeric code is generic over the scalar type; `f64` is used by the
//! test suite, `f32` by the benchmark harness.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod sts;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// 32-bit tensors, used by the benchmark harness.
pub type Tensor32 = Tensor<f32>;
/// 64-bit tensors, the default for training and tests.
pub type Tensor64 = Tensor<f64>;

pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;

/// Index into a vocabulary.
pub type TokenId = usize;
