//! Continuous normalizing flow over the coarse-grained coordinate: conditional
//! flow matching, adaptive integration and exact log-densities.

pub mod flow;
pub mod ode;

pub use flow::{
    cfm_loss, cfm_loss_with_draws, log_density_at, prior_log_density, sample_with_logdensity, train_flow,
    train_flow_with, vector_field, AnalyticField, FlowHistory, FlowModel, FlowSampleBatch, FlowSpec,
    FlowTrainConfig, VectorField,
};
pub use ode::{dopri5_batch, dopri5_integrate, ODESolverConfig, OdeError, SolverStats};

use thiserror::Error;

use crate::cgdata::CgDataError;
use crate::container::FormatError;
use crate::nncore::NnError;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("solver failure: {source}")]
    SolverFailure { chain: usize, source: OdeError },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] CgDataError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<OdeError> for FlowError {
    fn from(e: OdeError) -> Self {
        FlowError::from_ode(e, 0)
    }
}

impl FlowError {
    /// Wraps a solver error, shifting its chain index by `offset`.
    pub(crate) fn from_ode(e: OdeError, offset: usize) -> Self {
        let e = e.offset_chain(offset);
        match e.chain() {
            Some(chain) => FlowError::SolverFailure { chain, source: e },
            None => FlowError::InvalidConfig(e.to_string()),
        }
    }
}
