//! Desk-scale transformer block with dense and mask-aware forward passes.

mod block;
pub mod check;
pub mod golden;
mod model;
mod tensor;

pub use block::{
    cached_bytes, forward_full, forward_masked_kvcache, forward_masked_ycache, BlockActivations,
    BlockWeights,
};
pub use model::{model_forward, model_forward_full_with_cache};
pub use tensor::{Matrix, Tensor3};
