//! Desk-scale conditional denoising diffusion.
//!
//! A small cross-attention noise predictor over low-dimensional data, its
//! training loss with exact gradients (and Hessian-vector products), a
//! reverse-process sampler, synthetic concept data, and a checkpoint format.

pub mod checkpoint;
pub mod data;
pub mod dual;
pub mod model;
pub mod net;
pub mod sample;
pub mod schedule;

pub use data::{make_toy_dataset, Component, ConceptSpec, GaussianMixture};
pub use model::{
    loss_grad_flat, loss_grad_hvp, predictor_loss, Denoiser, Gradients, LossEval, NoisePredictor,
    NoisedBatch,
};
pub use net::{Arch, Block, Layout};
pub use sample::{sample, sample_with, SamplerKind};
pub use schedule::{LossWeighting, NoiseSchedule, ScheduleConfig};
