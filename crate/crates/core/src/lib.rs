//! Unsupervised estimation of physical parameters from video.
//!
//! An MLP encoder maps each frame to a latent state, a learnable
//! Euler-discretized physics block predicts the next latent state from the
//! previous ones, and both are trained jointly on a latent-space loss:
//! the one-step prediction error plus a divergence that ties the batch
//! moments of the latent to a Gaussian prior. No decoder is involved.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod ode;
pub mod parallel;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};
