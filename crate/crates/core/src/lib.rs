//! Speckle simulation, a convolutional despeckler trained with a hybrid
//! MSE + Kullback-Leibler cost, and despeckling quality metrics.
//!
//! The building blocks:
//!
//! * [`speckle_sim`]: unit-mean Gamma speckle, image files, patch grids.
//! * [`nn_engine`]: a small f64 convolutional engine with reverse-mode
//!   gradients and SGD with momentum.
//! * [`model`]: the despeckling network, predicted noise, checkpoints.
//! * [`loss`]: MSE plus the KL divergence between a differentiable
//!   histogram of the predicted noise and the reference Gamma law.
//! * [`metrics`]: PSNR, SSIM, SNR, ratio images, ratio-image KL and ENL.
//! * [`pipeline`]: dataset building, training, inference and evaluation.

pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn_engine;
pub mod pipeline;
pub mod rng;
pub mod speckle_sim;

pub use error::{Error, Result};
