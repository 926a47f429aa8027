//! Potential of mean force learned by force matching.
//!
//! The model is `U(R) = MLP(φ(R))` with Gaussian RBF features `φ`. Training
//! minimizes the mean of `(dU/dR + F)²` over coarse-grained samples, where `F`
//! is the projected atomistic force. The same loss is used for data from
//! biased simulations as long as the force labels come from the unbiased
//! potential.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgdata::{split, CGDataset, CgDataError, Standardizer};
use crate::nncore::checkpoint::Checkpoint;
use crate::nncore::features::{Rbf, RbfLayerSpec};
use crate::nncore::mlp::{Mlp, MlpSpec};
use crate::nncore::optim::{clip_global_norm, LRSchedule, OptimizerConfig, OptimizerState};
use crate::nncore::params::{LayoutBuilder, ParamVector};
use crate::nncore::tape::{self, grad_params};
use crate::nncore::{Activation, NnError};
use crate::rng::{streams, substream};
use crate::sum::pairwise_sum;

pub const CHECKPOINT_KIND: &str = "pmf";

#[derive(Debug, Error)]
pub enum PmfError {
    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] CgDataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmfSpec {
    pub rbf: RbfLayerSpec,
    pub mlp: MlpSpec,
    /// Optional affine map applied to `R` before the features.
    #[serde(default)]
    pub input_standardizer: Option<Standardizer>,
}

impl Default for PmfSpec {
    fn default() -> Self {
        let rbf = RbfLayerSpec::default();
        Self {
            mlp: MlpSpec {
                input: rbf.n_centers,
                hidden: vec![128; 4],
                output: 1,
                activation: Activation::Softplus,
                linear_output: true,
            },
            rbf,
            input_standardizer: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PMFModel {
    spec: PmfSpec,
    rbf: Rbf,
    mlp: Mlp,
    pub params: ParamVector,
}

impl PMFModel {
    /// Model with all parameters zero.
    pub fn new(spec: PmfSpec) -> Result<Self, NnError> {
        if spec.mlp.input != spec.rbf.n_centers || spec.mlp.output != 1 {
            return Err(NnError::Spec(format!(
                "PMF network must map {} RBF features to one output, got {} -> {}",
                spec.rbf.n_centers, spec.mlp.input, spec.mlp.output
            )));
        }
        if let Some(s) = spec.input_standardizer {
            if !(s.std > 0.0) {
                return Err(NnError::Spec(format!("input standardizer std must be > 0: {s:?}")));
            }
        }
        let mut lb = LayoutBuilder::new();
        let rbf = Rbf::new(spec.rbf.clone(), &mut lb, "rbf.centers")?;
        let mlp = Mlp::new(spec.mlp.clone(), &mut lb, "mlp")?;
        let params = ParamVector::zeros(lb.finish());
        Ok(Self {
            spec,
            rbf,
            mlp,
            params,
        })
    }

    /// Seeded initialization.
    pub fn init(spec: PmfSpec, seed: u64) -> Result<Self, NnError> {
        let mut m = Self::new(spec)?;
        let mut rng = substream(seed, streams::PMF_INIT);
        m.rbf.init(&mut m.params.data, &mut rng);
        m.mlp.init(&mut m.params.data, &mut rng);
        Ok(m)
    }

    pub fn spec(&self) -> &PmfSpec {
        &self.spec
    }

    pub fn output_bias_index(&self) -> usize {
        self.mlp.output_bias_range().start
    }

    /// Network inputs and `du/dR`.
    fn transform(&self, r: &[f64]) -> (Vec<f64>, f64) {
        match self.spec.input_standardizer {
            Some(s) => (r.iter().map(|&x| s.forward(x)).collect(), 1.0 / s.std),
            None => (r.to_vec(), 1.0),
        }
    }

    pub fn energies(&self, r: &[f64]) -> Vec<f64> {
        self.energies_with(&self.params.data, r)
    }

    fn energies_with(&self, params: &[f64], r: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(r.len());
        for chunk in r.chunks(EVAL_CHUNK) {
            let (u, _) = self.transform(chunk);
            let pass = self.rbf.forward(params, &u);
            let y = self.mlp.forward(params, pass.phi.view()).expect("feature width matches");
            out.extend(y.column(0).iter());
        }
        out
    }

    /// `(U(R), dU/dR)` for a batch.
    pub fn energies_and_gradients(&self, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.energies_and_gradients_with(&self.params.data, r)
    }

    fn energies_and_gradients_with(&self, params: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut e = Vec::with_capacity(r.len());
        let mut g = Vec::with_capacity(r.len());
        for chunk in r.chunks(EVAL_CHUNK) {
            let (u, k) = self.transform(chunk);
            let feat = self.rbf.forward(params, &u);
            let pass = self
                .mlp
                .forward_pass(params, feat.phi.view(), Some(feat.dphi.view()))
                .expect("feature width matches");
            e.extend(pass.output.column(0).iter());
            let t = pass.output_tangent.as_ref().expect("tangent requested");
            g.extend(t.column(0).iter().map(|d| d * k));
        }
        (e, g)
    }

    pub fn mean_forces(&self, r: &[f64]) -> Vec<f64> {
        self.energies_and_gradients(r).1.into_iter().map(|g| -g).collect()
    }

    /// Mean force-matching loss over the given samples.
    pub fn fm_loss(&self, r: &[f64], f: &[f64]) -> f64 {
        self.fm_loss_with(&self.params.data, r, f)
    }

    fn fm_loss_with(&self, params: &[f64], r: &[f64], f: &[f64]) -> f64 {
        assert_eq!(r.len(), f.len());
        let (_, g) = self.energies_and_gradients_with(params, r);
        fm_loss_from_gradients(&g, f)
    }

    /// Loss and exact parameter gradient by the batched forward/tangent and
    /// backward passes.
    pub fn fm_loss_and_grad(&self, r: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
        self.fm_loss_and_grad_with(&self.params.data, r, f)
    }

    fn fm_loss_and_grad_with(&self, params: &[f64], r: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(r.len(), f.len());
        assert!(!r.is_empty(), "empty batch");
        let n = r.len() as f64;
        let (u, k) = self.transform(r);
        let feat = self.rbf.forward(params, &u);
        let pass = self
            .mlp
            .forward_pass(params, feat.phi.view(), Some(feat.dphi.view()))
            .expect("feature width matches");
        let t = pass.output_tangent.as_ref().expect("tangent requested");
        let resid: Vec<f64> = t.column(0).iter().zip(f).map(|(d, fi)| d * k + fi).collect();
        let sq: Vec<f64> = resid.iter().map(|e| e * e).collect();
        let loss = pairwise_sum(&sq) / n;
        let g_out = Array2::zeros((r.len(), 1));
        let g_tan = Array2::from_shape_fn((r.len(), 1), |(i, _)| 2.0 * resid[i] * k / n);
        let mut grad = vec![0.0; params.len()];
        let (g_phi, g_dphi) = self
            .mlp
            .backward(params, &pass, g_out.view(), Some(g_tan.view()), &mut grad);
        self.rbf.backward(params, &u, &g_phi, g_dphi.as_ref(), &mut grad);
        (loss, grad)
    }

    /// The same loss and gradient evaluated sample by sample on the scalar
    /// tape. Slow; used to cross-check the batched backward pass.
    pub fn fm_loss_and_grad_tape(&self, r: &[f64], f: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
        let (u, k) = self.transform(r);
        let n = r.len() as f64;
        grad_params(&self.params.data, |tp, p| {
            let terms: Vec<_> = u
                .iter()
                .zip(f)
                .map(|(&ui, &fi)| {
                    let x = tp.constant(ui);
                    let (phi, dphi) = self.rbf.forward_tape(p, x);
                    let (_, dout) = self.mlp.forward_tangent_tape(tp, p, &phi, Some(&dphi));
                    let d = dout.expect("tangent requested")[0];
                    (d * k + fi).square()
                })
                .collect();
            tape::sum(&terms) / n
        })
    }

    pub fn to_checkpoint(&self, optimizer: Option<OptimizerState>) -> Checkpoint {
        Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.spec).expect("spec serializes"),
            &self.params,
            optimizer,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NnError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let spec: PmfSpec =
            serde_json::from_value(ck.model.clone()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut m = Self::new(spec)?;
        let pv = ck.param_vector()?;
        if pv.layout != m.params.layout {
            return Err(NnError::Checkpoint("parameter layout does not match the model spec".into()));
        }
        m.params = pv;
        Ok(m)
    }

    /// Energies (min-aligned over the grid) and mean forces on a grid.
    pub fn table(&self, grid: &[f64]) -> PmfTable {
        let (e, g) = self.energies_and_gradients(grid);
        let min = e.iter().copied().fold(f64::INFINITY, f64::min);
        PmfTable {
            grid: grid.to_vec(),
            energy: e.iter().map(|v| v - min).collect(),
            mean_force: g.iter().map(|v| -v).collect(),
        }
    }
}

const EVAL_CHUNK: usize = 4096;

pub fn pmf_energy(m: &PMFModel, r: f64) -> f64 {
    m.energies(&[r])[0]
}

pub fn pmf_mean_force(m: &PMFModel, r: f64) -> f64 {
    m.mean_forces(&[r])[0]
}

/// `mean_i (dU_i + F_i)²`.
pub fn fm_loss_from_gradients(grad_u: &[f64], forces: &[f64]) -> f64 {
    assert_eq!(grad_u.len(), forces.len());
    let sq: Vec<f64> = grad_u.iter().zip(forces).map(|(g, f)| (g + f) * (g + f)).collect();
    pairwise_sum(&sq) / sq.len() as f64
}

pub struct PmfTable {
    pub grid: Vec<f64>,
    pub energy: Vec<f64>,
    pub mean_force: Vec<f64>,
}

impl PmfTable {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "R,U,mean_force")?;
        for i in 0..self.grid.len() {
            writeln!(w, "{},{},{}", self.grid[i], self.energy[i], self.mean_force[i])?;
        }
        w.flush()
    }
}

/// Which parameters a training run returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// Minimum validation loss, earliest epoch on ties.
    #[default]
    BestValidation,
    /// Parameters after the last epoch.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FMTrainConfig {
    pub model: PmfSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: LRSchedule,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub split_ratio: f64,
    #[serde(default)]
    pub checkpoint: CheckpointPolicy,
    pub seed: u64,
}

impl Default for FMTrainConfig {
    fn default() -> Self {
        Self {
            model: PmfSpec::default(),
            batch_size: 128,
            epochs: 500,
            optimizer: OptimizerConfig::default(),
            schedule: LRSchedule::Constant { lr: 1e-4 },
            grad_clip: Some(1.0),
            split_ratio: 0.9,
            checkpoint: CheckpointPolicy::BestValidation,
            seed: 0,
        }
    }
}

impl FMTrainConfig {
    pub fn validate(&self) -> Result<(), PmfError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(PmfError::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(PmfError::InvalidConfig(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.schedule.validate().map_err(PmfError::InvalidConfig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss seen during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        w.flush()
    }
}

/// Minibatch force matching. Returns the parameters with the lowest
/// validation loss (earliest epoch on ties).
pub fn train_pmf(ds: &CGDataset, cfg: &FMTrainConfig) -> Result<(PMFModel, TrainHistory), PmfError> {
    train_pmf_with(ds, cfg, |_, _| {})
}

/// [`train_pmf`] with a callback invoked after every epoch with the record
/// and the current (not best) model.
pub fn train_pmf_with(
    ds: &CGDataset,
    cfg: &FMTrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &PMFModel),
) -> Result<(PMFModel, TrainHistory), PmfError> {
    cfg.validate()?;
    let (train, val) = split(ds, cfg.split_ratio, cfg.seed)?;
    if cfg.batch_size > train.len() {
        return Err(PmfError::InvalidConfig(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    let tr_r: Vec<f64> = train.samples.iter().map(|s| s.r).collect();
    let tr_f: Vec<f64> = train.samples.iter().map(|s| s.force).collect();
    let va_r: Vec<f64> = val.samples.iter().map(|s| s.r).collect();
    let va_f: Vec<f64> = val.samples.iter().map(|s| s.force).collect();

    let schedule = cfg.schedule.resolved((cfg.epochs * train.len().div_ceil(cfg.batch_size)) as u64);
    let mut model = PMFModel::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model.params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.params.data.clone();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut br = Vec::with_capacity(cfg.batch_size);
    let mut bf = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, streams::PMF_SHUFFLE + epoch as u64);
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::with_capacity(order.len() / cfg.batch_size + 1);
        for idx in order.chunks(cfg.batch_size) {
            br.clear();
            bf.clear();
            br.extend(idx.iter().map(|&i| tr_r[i]));
            bf.extend(idx.iter().map(|&i| tr_f[i]));
            let (loss, mut grad) = model.fm_loss_and_grad(&br, &bf);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PmfError::NonFiniteLoss { epoch, value: loss });
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grad, c);
            }
            opt.step(&mut model.params.data, &grad, &schedule);
            batch_losses.push(loss * idx.len() as f64);
        }
        let train_loss = pairwise_sum(&batch_losses) / train.len() as f64;
        let val_loss = if va_r.is_empty() {
            train_loss
        } else {
            model.fm_loss(&va_r, &va_f)
        };
        if !val_loss.is_finite() {
            return Err(PmfError::NonFiniteLoss { epoch, value: val_loss });
        }
        let last = epoch + 1 == cfg.epochs;
        let select = match cfg.checkpoint {
            CheckpointPolicy::BestValidation => val_loss < history.best_val_loss,
            CheckpointPolicy::Final => last,
        };
        if select {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best.copy_from_slice(&model.params.data);
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&rec, &model);
        history.epochs.push(rec);
    }
    model.params.data = best;
    Ok((model, history))
}
