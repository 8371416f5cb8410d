//! Attentive contextual attention and a residual cloud-removal network, built on a small dense tensor engine with
//! reverse-mode differentiation.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: tensors, kernels, the gradient tape, the TNSR format
//! - [`attention`]: vanilla, contextual and attentive contextual attention
//! - [`network`]: residual blocks, RACABs and the full network
//! - [`metrics`]: MAE, MSE, PSNR, SSIM, SAM
//! - [`data`]: synthetic cloudy/clear pairs and dataset files
//! - [`trainer`]: L1 loss, Adam, the training loop, checkpoints

pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Element, Tape, Tensor, Var};
