//! Adversarial feature-matching text generation.
//!
//! An LSTM generator maps latent codes to sentences and is trained so that
//! the CNN-encoded features of its output match those of real sentences,
//! measured by kernel MMD or Gaussian covariance matching.

// `!(x > 0.0)` style checks are meant to catch NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod evalsuite;
pub mod generator;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use numeric::{Graph, Tensor, Var};
