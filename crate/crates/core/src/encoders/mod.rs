//! Input encoders: Siamese vision transformer over patch tokens and a small
//! text transformer over template instructions. Masking is asymmetric (goal
//! branch only) and applied at the token level, before any attention, so
//! masked patch pixels can never influence the representation.

pub mod pos;
pub mod text;
pub mod vision;

pub use pos::sincos_2d;
pub use text::{tokenize, TextConfig, TextEmbedding, TextEncoder, Vocabulary};
pub use vision::{EncoderConfig, VisionEncoder};
