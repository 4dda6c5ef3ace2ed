//! Weakly-supervised lesion segmentation and image-level multilabel grading.
//!
//! The model learns pixel-wise lesion maps from image-level labels only: a
//! segmentation network produces per-pixel probabilities over one background
//! and `M-1` foreground channels, a max-pooling head turns those maps into
//! label probabilities, and an occlusion branch penalizes any residual signal
//! once the predicted foreground is blanked out.  Everything runs on a small
//! self-contained reverse-mode autodiff engine so the whole pipeline — losses
//! included — is differentiable end to end.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
