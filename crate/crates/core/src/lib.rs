//! Dilated convolution with learnable spacings (DCLS) for audio tagging.
//!
//! The crate covers the whole desk-scale pipeline: dense tensor
//! primitives with explicit vector-Jacobian products, DCLS kernel
//! construction, a ConvNeXt-style model with an audio stem and the
//! depthwise-to-DCLS surgery, the log-mel frontend, the training recipe,
//! mAP evaluation and a synthetic dataset generator.

pub mod audio;
pub mod cli;
pub mod config;
pub mod container;
pub mod datasets;
pub mod dcls;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
