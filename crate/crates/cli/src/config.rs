//! Experiment configuration. Every section has defaults; a config file only
//! needs the sections it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cgbg_core::analysis::MetricConfig;
use cgbg_core::cgdata::CGMapping;
use cgbg_core::cnf::{FlowTrainConfig, ODESolverConfig};
use cgbg_core::langevin::{LangevinParams, TrajectoryConfig};
use cgbg_core::pmf::FMTrainConfig;
use cgbg_core::potential::{MBParams, ThermoState, UmbrellaBias, DEFAULT_N_QUAD, DEFAULT_Y_RANGE};
use cgbg_core::reweight::{ClipPolicy, DEFAULT_CLIP_SWEEP};

use crate::error::{CliError, Result};

/// Energies used as the reweighting target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The trained PMF.
    #[default]
    Learned,
    /// The quadrature reference PMF.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_samples: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { n_samples: 50_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightConfig {
    pub clip: ClipPolicy,
    pub target: Target,
    /// Discard fractions for the ESS-versus-clip table.
    pub clip_sweep: Vec<f64>,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            clip: ClipPolicy::default(),
            target: Target::Learned,
            clip_sweep: DEFAULT_CLIP_SWEEP.to_vec(),
        }
    }
}

/// Quadrature settings for the exact reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub y_range: (f64, f64),
    pub n_quad: usize,
    /// Gauss nodes per histogram bin for reference bin masses.
    pub nodes_per_bin: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            y_range: DEFAULT_Y_RANGE,
            n_quad: DEFAULT_N_QUAD,
            nodes_per_bin: 8,
        }
    }
}

/// Seeds of each stage. These take precedence over seed fields inside the
/// other sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub pmf: u64,
    pub flow: u64,
    pub sample: u64,
    pub bootstrap: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_master(0)
    }
}

impl Seeds {
    /// Stages draw from disjoint streams, so one seed can serve all of them.
    pub fn from_master(seed: u64) -> Self {
        Self { data: seed, pmf: seed, flow: seed, sample: seed, bootstrap: seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub potential: MBParams,
    pub langevin: LangevinParams,
    pub trajectory: TrajectoryConfig,
    /// Umbrella bias applied during data generation.
    pub bias: Option<UmbrellaBias>,
    pub cg: CGMapping,
    pub pmf_training: FMTrainConfig,
    pub flow_training: FlowTrainConfig,
    pub solver: ODESolverConfig,
    pub sampling: SamplingConfig,
    pub reweighting: ReweightConfig,
    pub reference: ReferenceConfig,
    pub metrics: MetricConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            potential: MBParams::default(),
            langevin: LangevinParams::default(),
            trajectory: TrajectoryConfig::default(),
            bias: None,
            cg: CGMapping::default(),
            pmf_training: FMTrainConfig::default(),
            flow_training: FlowTrainConfig::default(),
            solver: ODESolverConfig::default(),
            sampling: SamplingConfig::default(),
            reweighting: ReweightConfig::default(),
            reference: ReferenceConfig::default(),
            metrics: MetricConfig::default(),
            seeds: Seeds::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON; syntax and schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies the seeds section into the per-stage configs.
    pub fn resolved(mut self) -> Self {
        self.trajectory.seed = self.seeds.data;
        self.pmf_training.seed = self.seeds.pmf;
        self.flow_training.seed = self.seeds.flow;
        self.metrics.seed = self.seeds.bootstrap;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::from_master(seed);
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| CliError::Config(e);
        self.potential.validate().map_err(|e| cfg(e.to_string()))?;
        self.langevin.validate().map_err(|e| cfg(e.to_string()))?;
        self.trajectory.validate().map_err(|e| cfg(e.to_string()))?;
        if let Some(b) = &self.bias {
            b.validate().map_err(|e| cfg(e.to_string()))?;
        }
        self.pmf_training.validate().map_err(|e| cfg(e.to_string()))?;
        self.flow_training.schedule.validate().map_err(cfg)?;
        if self.flow_training.batch_size == 0 || self.flow_training.epochs == 0 {
            return Err(cfg("flow_training batch_size and epochs must be >= 1".into()));
        }
        self.solver.validate().map_err(|e| cfg(e.to_string()))?;
        self.reweighting.clip.validate().map_err(|e| cfg(e.to_string()))?;
        if self.sampling.n_samples == 0 {
            return Err(cfg("sampling.n_samples must be >= 1".into()));
        }
        let b = &self.metrics.bins;
        if !(b.hi > b.lo) || b.n_bins == 0 {
            return Err(cfg(format!("metrics.bins must have lo < hi and n_bins >= 1, got {b:?}")));
        }
        if !(0.0..1.0).contains(&self.metrics.floor) {
            return Err(cfg(format!("metrics.floor must lie in [0, 1), got {}", self.metrics.floor)));
        }
        if !(self.reference.y_range.1 > self.reference.y_range.0) || self.reference.n_quad == 0 {
            return Err(cfg("reference needs y_min < y_max and n_quad >= 1".into()));
        }
        if self.reweighting.clip_sweep.iter().any(|f| !(0.0..0.5).contains(f)) {
            return Err(cfg("clip_sweep fractions must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn thermo(&self) -> Result<ThermoState> {
        ThermoState::new(self.langevin.kt).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }

    /// Reduced-cost settings for a laptop-scale run of the full pipeline:
    /// ten 1e7-step trajectories saved every 500 steps (2e5 samples), a
    /// decaying learning rate for force matching and shorter training.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.trajectory.save_every = 500;
        c.pmf_training.epochs = 30;
        c.pmf_training.schedule = cgbg_core::nncore::LRSchedule::Cosine {
            start: 1e-3,
            end: 1e-5,
            total_steps: 0,
        };
        c.pmf_training.checkpoint = cgbg_core::pmf::CheckpointPolicy::Final;
        c.flow_training.epochs = 100;
        c.output_dir = PathBuf::from("runs/desk");
        c
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
