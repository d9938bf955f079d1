//! Classical Chinese language modeling: tensors with reverse-mode autodiff,
//! a character tokenizer, corpus preparation, a BERT-style encoder with an
//! optional Transformer decoder, pretraining, fine-tuning, decoding and
//! evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; gradient checks instantiate the same code at `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore32 = model::ParamStore<f32>;
pub type ParamStore64 = model::ParamStore<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
