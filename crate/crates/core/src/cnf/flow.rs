use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ode::{dopri5_batch, ODESolverConfig, SolverStats};
use super::FlowError;
use crate::cgdata::{fit_standardizer, CGDataset, Standardizer};
use crate::container::{self, FormatError};
use crate::nncore::checkpoint::Checkpoint;
use crate::nncore::features::TimeEmbeddingSpec;
use crate::nncore::mlp::{Mlp, MlpSpec};
use crate::nncore::optim::{clip_global_norm, LRSchedule, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::nncore::params::{LayoutBuilder, ParamVector};
use crate::nncore::{Activation, NnError};
use crate::rng::{streams, substream};
use crate::sum::pairwise_sum;

pub const CHECKPOINT_KIND: &str = "cnf";
pub const SAMPLE_MAGIC: &[u8] = b"CGBG-SMP1";

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal log-density.
pub fn prior_log_density(z: f64) -> f64 {
    -0.5 * z * z - HALF_LN_2PI
}

/// A time-dependent velocity field on the (standardized) line.
pub trait VectorField: Sync {
    /// Velocities, and `∂v/∂x` when `with_divergence` is set.
    fn eval(&self, t: &[f64], x: &[f64], with_divergence: bool) -> (Vec<f64>, Option<Vec<f64>>);
}

/// Closed-form fields used to check the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticField {
    Zero,
    Constant(f64),
    /// `v = a x`.
    Linear(f64),
}

impl VectorField for AnalyticField {
    fn eval(&self, _t: &[f64], x: &[f64], with_divergence: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let (v, d): (Vec<f64>, f64) = match *self {
            AnalyticField::Zero => (vec![0.0; x.len()], 0.0),
            AnalyticField::Constant(b) => (vec![b; x.len()], 0.0),
            AnalyticField::Linear(a) => (x.iter().map(|xi| a * xi).collect(), a),
        };
        (v, with_divergence.then(|| vec![d; x.len()]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub mlp: MlpSpec,
    pub embedding: TimeEmbeddingSpec,
}

impl Default for FlowSpec {
    fn default() -> Self {
        let embedding = TimeEmbeddingSpec::default();
        Self {
            mlp: MlpSpec {
                input: 1 + embedding.dimension,
                hidden: vec![96; 3],
                output: 1,
                activation: Activation::Softplus,
                linear_output: true,
            },
            embedding,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowDescriptor {
    spec: FlowSpec,
    standardizer: Standardizer,
}

/// Network velocity field `v(t, x)` on the standardized coordinate, with input
/// row `[x, embed(t)]`.
#[derive(Debug, Clone)]
pub struct FlowModel {
    spec: FlowSpec,
    mlp: Mlp,
    freqs: Vec<f64>,
    pub params: ParamVector,
    pub standardizer: Standardizer,
}

impl FlowModel {
    pub fn new(spec: FlowSpec, standardizer: Standardizer) -> Result<Self, NnError> {
        spec.embedding.validate()?;
        if spec.mlp.input != 1 + spec.embedding.dimension || spec.mlp.output != 1 {
            return Err(NnError::Spec(format!(
                "flow network must map 1 + {} inputs to 1 output, got {} -> {}",
                spec.embedding.dimension, spec.mlp.input, spec.mlp.output
            )));
        }
        if !(standardizer.std > 0.0) {
            return Err(NnError::Spec(format!("standardizer std must be > 0: {standardizer:?}")));
        }
        let mut lb = LayoutBuilder::new();
        let mlp = Mlp::new(spec.mlp.clone(), &mut lb, "field")?;
        let freqs = spec.embedding.frequencies();
        Ok(Self {
            params: ParamVector::zeros(lb.finish()),
            spec,
            mlp,
            freqs,
            standardizer,
        })
    }

    pub fn init(spec: FlowSpec, standardizer: Standardizer, seed: u64) -> Result<Self, NnError> {
        let mut m = Self::new(spec, standardizer)?;
        m.mlp.init(&mut m.params.data, &mut substream(seed, streams::FLOW_INIT));
        Ok(m)
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    fn inputs(&self, t: &[f64], x: &[f64]) -> Array2<f64> {
        let d = self.spec.mlp.input;
        let mut a = Array2::zeros((x.len(), d));
        for (i, mut row) in a.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            row[0] = x[i];
            self.spec.embedding.embed_into(&self.freqs, t[i], &mut row[1..]);
        }
        a
    }

    /// CFM loss and parameter gradient for explicit draws: `x1` data,
    /// `x0` prior samples, `t` times.
    pub fn cfm_loss_and_grad(&self, x1: &[f64], x0: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
        let n = x1.len();
        assert!(n > 0 && x0.len() == n && t.len() == n);
        let xt: Vec<f64> = (0..n).map(|i| (1.0 - t[i]) * x0[i] + t[i] * x1[i]).collect();
        let input = self.inputs(t, &xt);
        let pass = self
            .mlp
            .forward_pass(&self.params.data, input.view(), None)
            .expect("input width matches");
        let resid: Vec<f64> = (0..n).map(|i| pass.output[[i, 0]] - (x1[i] - x0[i])).collect();
        let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
        let loss = pairwise_sum(&sq) / n as f64;
        let g = Array2::from_shape_fn((n, 1), |(i, _)| 2.0 * resid[i] / n as f64);
        let mut grad = vec![0.0; self.params.len()];
        self.mlp.backward(&self.params.data, &pass, g.view(), None, &mut grad);
        (loss, grad)
    }

    pub fn to_checkpoint(&self, optimizer: Option<OptimizerState>) -> Checkpoint {
        let desc = FlowDescriptor {
            spec: self.spec.clone(),
            standardizer: self.standardizer,
        };
        Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(desc).expect("descriptor serializes"),
            &self.params,
            optimizer,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NnError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let desc: FlowDescriptor =
            serde_json::from_value(ck.model.clone()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut m = Self::new(desc.spec, desc.standardizer)?;
        let pv = ck.param_vector()?;
        if pv.layout != m.params.layout {
            return Err(NnError::Checkpoint("parameter layout does not match the model spec".into()));
        }
        m.params = pv;
        Ok(m)
    }
}

impl VectorField for FlowModel {
    fn eval(&self, t: &[f64], x: &[f64], with_divergence: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let input = self.inputs(t, x);
        if !with_divergence {
            let out = self
                .mlp
                .forward(&self.params.data, input.view())
                .expect("input width matches");
            return (out.column(0).to_vec(), None);
        }
        let tangent = Array2::from_shape_fn(input.dim(), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let pass = self
            .mlp
            .forward_pass(&self.params.data, input.view(), Some(tangent.view()))
            .expect("input width matches");
        let div = pass.output_tangent.as_ref().expect("tangent requested").column(0).to_vec();
        (pass.output.column(0).to_vec(), Some(div))
    }
}

/// Velocity of a single point.
pub fn vector_field(field: &dyn VectorField, t: f64, x: f64) -> f64 {
    field.eval(&[t], &[x], false).0[0]
}

/// CFM loss with prior and time draws taken from `rng`, in batch order.
pub fn cfm_loss<R: Rng>(field: &dyn VectorField, x1: &[f64], rng: &mut R) -> f64 {
    let (x0, t) = draw_pairs(x1.len(), rng);
    cfm_loss_with_draws(field, x1, &x0, &t)
}

/// CFM loss for explicit draws. Passing `x0 = x1` gives the degenerate
/// pairing whose target field is zero.
pub fn cfm_loss_with_draws(field: &dyn VectorField, x1: &[f64], x0: &[f64], t: &[f64]) -> f64 {
    let n = x1.len();
    assert!(n > 0 && x0.len() == n && t.len() == n);
    let xt: Vec<f64> = (0..n).map(|i| (1.0 - t[i]) * x0[i] + t[i] * x1[i]).collect();
    let (v, _) = field.eval(t, &xt, false);
    let sq: Vec<f64> = (0..n).map(|i| (v[i] - (x1[i] - x0[i])).powi(2)).collect();
    pairwise_sum(&sq) / n as f64
}

fn draw_pairs<R: Rng>(n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut x0 = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        x0.push(Distribution::<f64>::sample(&StandardNormal, rng));
        t.push(rng.random::<f64>());
    }
    (x0, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub model: FlowSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// A cosine schedule with `total_steps = 0` spans the whole run.
    pub schedule: LRSchedule,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            model: FlowSpec::default(),
            batch_size: 256,
            epochs: 2000,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::AdamW,
                weight_decay: 1e-5,
                ..OptimizerConfig::default()
            },
            schedule: LRSchedule::Cosine {
                start: 3e-4,
                end: 1e-5,
                total_steps: 0,
            },
            grad_clip: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowHistory {
    /// Mean CFM loss per epoch.
    pub loss: Vec<f64>,
}

impl FlowHistory {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,loss")?;
        for (i, l) in self.loss.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        w.flush()
    }
}

/// Conditional flow matching on the standardized coordinates of `ds`. The
/// standardizer is the dataset's own if present, else fitted here.
pub fn train_flow(ds: &CGDataset, cfg: &FlowTrainConfig) -> Result<(FlowModel, FlowHistory), FlowError> {
    train_flow_with(ds, cfg, |_, _| {})
}

pub fn train_flow_with(
    ds: &CGDataset,
    cfg: &FlowTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(FlowModel, FlowHistory), FlowError> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(FlowError::InvalidConfig("batch_size and epochs must be >= 1".into()));
    }
    if cfg.batch_size > ds.len() {
        return Err(FlowError::InvalidConfig(format!(
            "batch size {} exceeds the {} samples",
            cfg.batch_size,
            ds.len()
        )));
    }
    cfg.schedule.validate().map_err(FlowError::InvalidConfig)?;
    let standardizer = match ds.standardizer {
        Some(s) => s,
        None => fit_standardizer(ds)?,
    };
    let data: Vec<f64> = ds.samples.iter().map(|s| standardizer.forward(s.r)).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule.resolved((cfg.epochs * steps_per_epoch) as u64);
    let mut model = FlowModel::init(cfg.model.clone(), standardizer, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model.params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = FlowHistory {
        loss: Vec::with_capacity(cfg.epochs),
    };
    let mut x1 = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, streams::FLOW_TRAIN + epoch as u64);
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for idx in order.chunks(cfg.batch_size) {
            x1.clear();
            x1.extend(idx.iter().map(|&i| data[i]));
            let (x0, t) = draw_pairs(x1.len(), &mut rng);
            let (loss, mut grad) = model.cfm_loss_and_grad(&x1, &x0, &t);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FlowError::Nn(NnError::NonFiniteLoss {
                    context: format!("flow training epoch {epoch}"),
                    value: loss,
                }));
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grad, c);
            }
            opt.step(&mut model.params.data, &grad, &schedule);
            losses.push(loss * idx.len() as f64);
        }
        let mean = pairwise_sum(&losses) / data.len() as f64;
        on_epoch(epoch, mean);
        history.loss.push(mean);
    }
    Ok((model, history))
}

/// Samples in raw coordinates with their flow log-densities.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSampleBatch {
    pub r: Vec<f64>,
    pub log_q: Vec<f64>,
    pub stats: SolverStats,
}

/// Chains integrated per solver call. Results do not depend on it.
const CHAIN_BLOCK: usize = 512;

fn joint_rhs<'a>(field: &'a dyn VectorField) -> impl FnMut(&[f64], &[f64], &mut [f64]) + 'a {
    move |t: &[f64], y: &[f64], dy: &mut [f64]| {
        let x: Vec<f64> = y.chunks_exact(2).map(|s| s[0]).collect();
        let (v, div) = field.eval(t, &x, true);
        let div = div.expect("divergence requested");
        for i in 0..t.len() {
            dy[2 * i] = v[i];
            dy[2 * i + 1] = div[i];
        }
    }
}

fn sum_stats(all: &[SolverStats]) -> SolverStats {
    all.iter().fold(SolverStats::default(), |a, s| SolverStats {
        accepted: a.accepted + s.accepted,
        rejected: a.rejected + s.rejected,
        evaluations: a.evaluations + s.evaluations,
    })
}

/// Draws `n` prior samples (chain `i` from its own stream), transports them
/// from t = 0 to 1 together with the divergence integral, and returns raw
/// coordinates with `log q = log p0(z) - ∫ div dt - ln std`.
pub fn sample_with_logdensity(
    field: &dyn VectorField,
    standardizer: &Standardizer,
    n: usize,
    seed: u64,
    solver: &ODESolverConfig,
) -> Result<FlowSampleBatch, FlowError> {
    solver.validate()?;
    let z: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = substream(seed, streams::FLOW_SAMPLE + i as u64);
            Distribution::<f64>::sample(&StandardNormal, &mut rng)
        })
        .collect();
    let blocks: Vec<(usize, &[f64])> = z.chunks(CHAIN_BLOCK).enumerate().collect();
    let results = blocks
        .into_par_iter()
        .map(|(b, zs)| {
            let y0: Vec<f64> = zs.iter().flat_map(|&zi| [zi, 0.0]).collect();
            dopri5_batch(joint_rhs(field), &y0, 2, 0.0, 1.0, solver)
                .map_err(|e| FlowError::from_ode(e, b * CHAIN_BLOCK))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut r = Vec::with_capacity(n);
    let mut log_q = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    let lj = standardizer.log_jacobian();
    let mut i = 0;
    for (y, st) in results {
        for s in y.chunks_exact(2) {
            r.push(standardizer.inverse(s[0]));
            log_q.push(prior_log_density(z[i]) - s[1] + lj);
            i += 1;
        }
        stats.extend(st);
    }
    Ok(FlowSampleBatch {
        r,
        log_q,
        stats: sum_stats(&stats),
    })
}

/// Flow log-density at raw coordinates by reverse-time integration.
pub fn log_density_at(
    field: &dyn VectorField,
    standardizer: &Standardizer,
    r: &[f64],
    solver: &ODESolverConfig,
) -> Result<Vec<f64>, FlowError> {
    solver.validate()?;
    let lj = standardizer.log_jacobian();
    let blocks: Vec<(usize, &[f64])> = r.chunks(CHAIN_BLOCK).enumerate().collect();
    let results = blocks
        .into_par_iter()
        .map(|(b, rs)| {
            let y1: Vec<f64> = rs.iter().flat_map(|&ri| [standardizer.forward(ri), 0.0]).collect();
            dopri5_batch(joint_rhs(field), &y1, 2, 1.0, 0.0, solver)
                .map_err(|e| FlowError::from_ode(e, b * CHAIN_BLOCK))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(results
        .into_iter()
        .flat_map(|(y, _)| {
            y.chunks_exact(2)
                .map(|s| prior_log_density(s[0]) + s[1] + lj)
                .collect::<Vec<_>>()
        })
        .collect())
}

impl FlowModel {
    pub fn sample(&self, n: usize, seed: u64, solver: &ODESolverConfig) -> Result<FlowSampleBatch, FlowError> {
        sample_with_logdensity(self, &self.standardizer, n, seed, solver)
    }

    pub fn log_density(&self, r: &[f64], solver: &ODESolverConfig) -> Result<Vec<f64>, FlowError> {
        log_density_at(self, &self.standardizer, r, solver)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    count: usize,
    seed: u64,
    solver: ODESolverConfig,
    stats: SolverStats,
}

impl FlowSampleBatch {
    pub fn to_bytes(&self, seed: u64, solver: &ODESolverConfig) -> Result<Vec<u8>, FormatError> {
        let header = SampleHeader {
            count: self.r.len(),
            seed,
            solver: solver.clone(),
            stats: self.stats,
        };
        let records: Vec<f64> = self.r.iter().zip(&self.log_q).flat_map(|(a, b)| [*a, *b]).collect();
        container::encode(SAMPLE_MAGIC, &header, &records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (h, rec): (SampleHeader, _) = container::decode(SAMPLE_MAGIC, bytes, |h: &SampleHeader| 2 * h.count)?;
        Ok(Self {
            r: rec.iter().step_by(2).copied().collect(),
            log_q: rec.iter().skip(1).step_by(2).copied().collect(),
            stats: h.stats,
        })
    }

    pub fn save(&self, path: &Path, seed: u64, solver: &ODESolverConfig) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes(seed, solver)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
