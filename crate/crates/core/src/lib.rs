//! Self-supervised visual-action representation learning on a procedurally
//! generated tabletop. The model consumes an input image, a masked goal
//! image, and a text instruction; it is pretrained to inpaint the goal image
//! and fine-tuned with small heads for SE(2) affordances, joint-space
//! actions, and referring-expression boxes.
//!
//! Layout:
//! - [`grid`], [`mask`]: patch tokenization and asymmetric goal masking
//! - [`nn`]: layer stack with manual backprop (generic f32/f64)
//! - [`encoders`]: Siamese vision encoder, text encoder, positional codes
//! - [`model`]: fusion stages, decoder, goal head, the full backbone
//! - [`heads`]: affordance / action / bounding-box heads
//! - [`training`]: losses, AdamW, schedules, checkpoints, train loops
//! - [`scenegen`]: procedural tabletop scenes, tasks, rendering, splits
//! - [`dataio`]: episode serialization and corpus access
//! - [`eval`]: reconstruction metrics, manipulation benchmark, ablations

pub mod error;
pub mod real;
pub mod rng;

pub mod grid;
pub mod mask;
pub mod nn;

pub mod encoders;
pub mod heads;
pub mod model;

pub mod dataio;
pub mod eval;
pub mod scenegen;
pub mod training;

pub use error::{Error, Result};
pub use grid::PatchGrid;
pub use mask::{sample_mask, MaskSpec};
pub use real::{Dtype, Real};
