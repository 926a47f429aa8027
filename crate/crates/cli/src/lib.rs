//! Configuration-driven pipeline for the coarse-grained Boltzmann generator
//! workbench: data generation, force matching, flow training, sampling,
//! reweighting, evaluation and reports.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{ExperimentConfig, Target};
pub use error::{CliError, Result};
pub use manifest::RunManifest;
pub use pipeline::Context;
