//! Operational U-Net: self-organized operational neural network layers and a
//! compact encoder/decoder for pixel-level active-fire segmentation.
//!
//! Modules, bottom-up:
//! - [`tensor`], [`conv`], [`autograd`]: dense arrays, convolution kernels and
//!   tape-based reverse-mode differentiation.
//! - [`layers`]: operational and transposed operational convolutions.
//! - [`model`]: the U-Net wiring, parameter counting and checkpoints.
//! - [`optim`]: Adam and the training loop.
//! - [`data`]: LS8P patches, preprocessing, splits and a synthetic generator.
//! - [`metrics`]: confusion counts and precision/recall/IoU/F1.
//! - [`gradcheck`]: finite-difference verification of backpropagation.

pub mod autograd;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use autograd::{Gradients, Rule, Tape, Var};
pub use error::{Error, Result};
pub use layers::{OperationalConv2D, TransposedOperationalConv2D};
pub use metrics::{ConfusionCounts, Scores};
pub use model::{OpUNet, OpUNetConfig};
pub use optim::{AdamConfig, AdamState, TrainConfig};
pub use tensor::{Element, Tensor};
