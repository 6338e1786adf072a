//! Saliency-aware prompt learning on a miniature contrastive dual encoder.
//!
//! Everything is self-contained: a reverse-mode autodiff engine over dense
//! f64 tensors, a small vision/text transformer pair with deep learnable
//! prompts, the loss stack (cross-entropy, cross-interactive and
//! self-regularization KLs, saliency-guided patch masking, directional
//! prototype alignment), a procedural image-text corpus generator, and an
//! experiment harness covering base-to-novel, cross-dataset, domain
//! generalization and few-shot protocols.

pub mod error;
pub mod harness;
pub mod loss;
pub mod rng;
pub mod saliency;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
