//! Post-training low-bit weight quantization for small decoder-only
//! transformers.
//!
//! Weights are quantized with uniform affine quantization. Each decoder
//! block is then calibrated by block-wise output reconstruction: the
//! rounding direction of every weight is relaxed through a sigmoid, the
//! relaxed variables are progressively frozen to hard 0/1 decisions while
//! the rest are re-optimized with Adam, and a per-group dequantization
//! scale factor is tuned jointly.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod par;
pub mod quant;
pub mod recon;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{AttnShape, Graph, Var};
pub use tensor::Tensor;
