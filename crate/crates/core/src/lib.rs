//! Texture classification for colorectal-cancer histology.
//!
//! The crate bundles everything the training and explanation pipeline needs,
//! with no external deep-learning runtime:
//!
//! * [`tensor`]: dense `f32` tensors, keyed RNG streams and a tape-based
//!   reverse-mode autodiff engine over the operators SqueezeNet needs.
//! * [`model`]: the SqueezeNet backbone with the pooled classification head,
//!   layer groups and the binary checkpoint format.
//! * [`stain`]: sparse non-negative stain separation and structure-preserving
//!   colour normalization.
//! * [`data`]: dataset indexing, stratified splits, resizing, augmentation and
//!   batching.
//! * [`optim`]: AdamW, the one-cycle policy, discriminative learning rates, the
//!   learning-rate range test and the staged fine-tuning loop.
//! * [`gradcam`]: gradient-weighted class activation maps and overlays.
//! * [`metrics`]: confusion matrices, one-vs-rest ROC curves and AUC.

pub mod data;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod stain;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{RngStream, Tensor};
