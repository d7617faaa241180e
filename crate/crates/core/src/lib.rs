//! Desk-scale instruction tuning for sparse mixture-of-experts decoders.
//!
//! The crate covers the whole loop: a tape-based autograd engine, a
//! top-2-routed MoE transformer, LoRA adapters over 4-bit frozen weights, a
//! 4-bit Adam, the instruction-data pipeline, a supervised fine-tuning loop
//! with checkpointing, and a few-shot multiple-choice evaluation harness.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lora;
pub mod model;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use model::{ModelConfig, MoeTransformer};
pub use tensor::Tensor;
