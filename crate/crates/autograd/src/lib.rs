//! Reverse-mode automatic differentiation over channels-last tensors.
//!
//! A [`Graph`] records fused operations (1x1 and dense convolutions,
//! depthwise convolutions, normalisations, modulation, losses) together with
//! their backward rules. Parameters live in a [`ParamStore`] and are borrowed
//! by the graph, so a frozen model can be shared by many forward passes.
//!
//! Everything is single-threaded and order-deterministic: identical inputs
//! yield bit-identical outputs and gradients.

mod error;
mod graph;
pub mod ops;
mod optim;
mod param;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Precision, Var};
pub use ops::{ssim_value, BatchStats, SsimWindow};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use param::{Init, ParamEntry, ParamId, ParamStore};
pub use real::{matmul, Real};
pub use tensor::{pixel_shuffle, pixel_unshuffle, resize_bilinear, Tensor};
