//! Minimal neural-network substrate in 64-bit arithmetic.

pub mod activation;
pub mod checkpoint;
pub mod features;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;

pub use activation::Activation;
pub use checkpoint::Checkpoint;
pub use features::{Rbf, RbfLayerSpec, TimeEmbeddingSpec};
pub use mlp::{Mlp, MlpSpec};
pub use optim::{clip_global_norm, LRSchedule, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{LayoutBuilder, ParamVector, Segment};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("non-finite loss {value} ({context})")]
    NonFiniteLoss { context: String, value: f64 },
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("shape mismatch: expected width {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("invalid parameter layout: {0}")]
    Layout(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
