//! Multi-concept model immunization at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`] / [`rng`]: dense `f64` matrices, Cholesky solves, seeded randomness,
//!   central-difference gradients.
//! - [`merge`]: the differentiable constrained merge of key/value projections and
//!   the mean of every other parameter.
//! - [`diffusion`]: a conditional noise predictor with cross-attention, its
//!   denoising loss, sampler and checkpoints.
//! - [`adapt`]: the fine-tuning attacks an immunized model has to resist.
//! - [`immunize`]: the bi-level immunization loop and its baselines.
//! - [`metrics`]: similarity measures and the gap-ratio scores.

pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod merge;
pub mod params;
pub mod rng;
pub mod diffusion;
pub mod adapt;
pub mod immunize;
pub mod metrics;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use params::{ParamSet, Signature};
pub use rng::Rng;
