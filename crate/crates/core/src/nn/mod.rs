//! Minimal neural-network layer stack with hand-written backward passes.
//!
//! Every layer exposes `forward(...) -> (output, cache)` and
//! `backward(&mut self, cache, grad_out) -> grad_in`; backward ACCUMULATES
//! into parameter grads so shared modules (Siamese branches, weight-tied
//! blocks) can be driven twice per step. All layers are generic over
//! [`crate::real::Real`] so f64 gradient checks exercise the exact code that
//! trains in f32.

pub mod act;
pub mod attention;
pub mod block;
pub mod conv;
pub mod init;
pub mod linear;
pub mod mlp;
pub mod norm;
pub mod param;

pub use attention::MultiHeadAttention;
pub use block::{BidirBlock, Block};
pub use conv::{Conv1x1, Conv2d};
pub use linear::Linear;
pub use mlp::Mlp;
pub use norm::LayerNorm;
pub use param::{join, NnModule, Param, ParamSlot};
