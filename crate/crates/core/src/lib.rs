//! Localized region embeddings by test-time inversion of explainability maps.
//!
//! Given an image and a binary query mask, [`inversion::mask_inversion`]
//! optimizes one joint-space vector whose gradient-based explainability map
//! over a frozen Vision Transformer matches the mask. The encoder runs once
//! per image; with the decomposed gradient path the tail jacobian is also
//! computed once and shared by every mask.

// Comparisons like `!(x > 0.0)` deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod error;
pub mod explain;
pub mod harness;
pub mod inversion;
pub mod mask;
pub mod preprocess;
pub mod real;
pub mod vit;

pub use error::{Error, Result};
pub use explain::{explain, ExplainabilityMap};
pub use inversion::{
    mask_inversion, mask_inversion_batch, mask_inversion_encoded, GradPath, InversionConfig,
    LocalizedEmbedding,
};
pub use mask::{PixelBox, QueryMask};
pub use real::Real;
pub use vit::{EncoderActivations, ImageTensor, Model, ModelConfig, TailJacobian};
