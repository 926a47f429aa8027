use thiserror::Error;

use cgbg_core::analysis::AnalysisError;
use cgbg_core::cgdata::CgDataError;
use cgbg_core::cnf::FlowError;
use cgbg_core::container::FormatError;
use cgbg_core::langevin::LangevinError;
use cgbg_core::nncore::NnError;
use cgbg_core::pmf::PmfError;
use cgbg_core::potential::PotentialError;
use cgbg_core::reweight::ReweightError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O or format error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFiniteLoss { .. } | NnError::NonFiniteValue(_) => CliError::Numerical(e.to_string()),
            NnError::Spec(_) | NnError::ShapeMismatch { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<PotentialError> for CliError {
    fn from(e: PotentialError) -> Self {
        match e {
            PotentialError::InvalidParameter(_) => CliError::Config(e.to_string()),
            PotentialError::BoundaryNotConverged { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<LangevinError> for CliError {
    fn from(e: LangevinError) -> Self {
        match e {
            LangevinError::InvalidConfig(_) => CliError::Config(e.to_string()),
            LangevinError::Format(e) => e.into(),
            LangevinError::Io(e) => e.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CgDataError> for CliError {
    fn from(e: CgDataError) -> Self {
        match e {
            CgDataError::Format(e) => e.into(),
            CgDataError::DegenerateVariance(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PmfError> for CliError {
    fn from(e: PmfError) -> Self {
        match e {
            PmfError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            PmfError::InvalidConfig(_) => CliError::Config(e.to_string()),
            PmfError::Nn(e) => e.into(),
            PmfError::Data(e) => e.into(),
            PmfError::Io(e) => e.into(),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::SolverFailure { .. } => CliError::Numerical(e.to_string()),
            FlowError::InvalidConfig(_) => CliError::Config(e.to_string()),
            FlowError::Nn(e) => e.into(),
            FlowError::Data(e) => e.into(),
            FlowError::Format(e) => e.into(),
        }
    }
}

impl From<ReweightError> for CliError {
    fn from(e: ReweightError) -> Self {
        match e {
            ReweightError::InvalidPolicy(_) => CliError::Config(e.to_string()),
            ReweightError::Format(e) => e.into(),
            ReweightError::Io(e) => e.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(e) => e.into(),
            AnalysisError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
