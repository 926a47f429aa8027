//! Coarse-grained Boltzmann generator workbench.
//!
//! The pipeline runs Langevin dynamics on the Müller–Brown surface, projects
//! the trajectories onto the `x` coordinate, learns the potential of mean force
//! by force matching, trains a continuous normalizing flow by conditional flow
//! matching and recovers unbiased statistics by importance reweighting. Each
//! stage can be checked against exact quadrature of the two-dimensional
//! Boltzmann density.

pub mod analysis;
pub mod cgdata;
pub mod cnf;
pub mod container;
pub mod langevin;
pub mod nncore;
pub mod pmf;
pub mod potential;
pub mod quadrature;
pub mod reweight;
pub mod rng;
pub mod sum;

pub use potential::{MBParams, Point2, ThermoState, UmbrellaBias};
