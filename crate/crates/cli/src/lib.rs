//! Experiment runner for multi-concept immunization grids.
//!
//! A run builds one synthetic world per seed (concepts, embeddings and a
//! pre-trained denoiser), immunizes that model with each configured method for
//! every concept group, attacks every arm, and scores the generations. Rows go
//! to `results.csv`; the MSGR / MRSGR tables and a manifest go next to it.

pub mod config;
pub mod error;
pub mod grid;
pub mod presets;
pub mod results;
pub mod summary;
pub mod world;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, Result};
pub use grid::{run_experiment, run_grid};
pub use results::ResultRow;
pub use summary::Summary;
