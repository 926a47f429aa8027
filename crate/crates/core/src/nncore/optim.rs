use serde::{Deserialize, Serialize};

use crate::sum::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Coupled L2 for Adam, decoupled decay for AdamW.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LRSchedule {
    Constant { lr: f64 },
    Cosine { start: f64, end: f64, total_steps: u64 },
}

impl LRSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LRSchedule::Constant { lr } => lr,
            LRSchedule::Cosine {
                start,
                end,
                total_steps,
            } => {
                if total_steps == 0 {
                    return end;
                }
                let s = step.min(total_steps) as f64 / total_steps as f64;
                end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * s).cos())
            }
        }
    }

    /// Replaces an open-ended cosine length (`total_steps = 0`) by `run_steps`.
    pub fn resolved(&self, run_steps: u64) -> LRSchedule {
        match *self {
            LRSchedule::Cosine { start, end, total_steps: 0 } => LRSchedule::Cosine {
                start,
                end,
                total_steps: run_steps,
            },
            ref s => s.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            LRSchedule::Constant { lr } => lr > 0.0,
            LRSchedule::Cosine { start, end, .. } => start > 0.0 && end > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("learning rates must be positive: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    /// One update with the learning rate the schedule gives for the current
    /// step count.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], schedule: &LRSchedule) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let lr = schedule.lr(self.step);
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let wd = self.config.weight_decay;
        let decoupled = self.config.kind == OptimizerKind::AdamW;
        for i in 0..params.len() {
            let mut g = grads[i];
            if !decoupled && wd != 0.0 {
                g += wd * params[i];
            }
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            if decoupled && wd != 0.0 {
                params[i] -= lr * wd * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + self.config.eps);
        }
    }
}

/// Rescales `grads` in place so that its Euclidean norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let sq: Vec<f64> = grads.iter().map(|g| g * g).collect();
    let norm = pairwise_sum(&sq).sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
