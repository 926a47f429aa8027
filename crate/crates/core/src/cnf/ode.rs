//! Dormand–Prince 5(4) with a PI step-size controller.
//!
//! [`dopri5_batch`] advances many independent systems ("chains") of the same
//! dimension at once. Every chain keeps its own time, step size and error
//! history; only the right-hand-side evaluations are batched. A chain's
//! trajectory therefore does not depend on which other chains share the
//! batch, provided the right-hand side evaluates rows independently.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dopri5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ODESolverConfig {
    pub method: Method,
    pub atol: f64,
    pub rtol: f64,
    /// Attempted steps (accepted + rejected) allowed per chain.
    pub max_steps: usize,
    /// Fixed first step; `None` uses the error-based starter.
    #[serde(default)]
    pub initial_step: Option<f64>,
}

impl Default for ODESolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            atol: 1e-4,
            rtol: 1e-4,
            max_steps: 100_000,
            initial_step: None,
        }
    }
}

impl ODESolverConfig {
    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.atol > 0.0 && self.rtol > 0.0) || self.max_steps == 0 {
            return Err(OdeError::InvalidConfig(format!(
                "tolerances must be > 0 and max_steps >= 1: {self:?}"
            )));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(OdeError::InvalidConfig(format!("initial_step must be > 0, got {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("chain {chain}: step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { chain: usize, t: f64, h: f64 },
    #[error("chain {chain}: exceeded {steps} steps at t = {t}")]
    MaxStepsExceeded { chain: usize, t: f64, steps: usize },
    #[error("chain {chain}: non-finite derivative at t = {t}")]
    NonFinite { chain: usize, t: f64 },
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
}

impl OdeError {
    /// Same error with the chain index shifted by `offset`.
    pub fn offset_chain(self, offset: usize) -> Self {
        match self {
            OdeError::StepUnderflow { chain, t, h } => OdeError::StepUnderflow { chain: chain + offset, t, h },
            OdeError::MaxStepsExceeded { chain, t, steps } => OdeError::MaxStepsExceeded {
                chain: chain + offset,
                t,
                steps,
            },
            OdeError::NonFinite { chain, t } => OdeError::NonFinite { chain: chain + offset, t },
            e => e,
        }
    }

    pub fn chain(&self) -> Option<usize> {
        match *self {
            OdeError::StepUnderflow { chain, .. }
            | OdeError::MaxStepsExceeded { chain, .. }
            | OdeError::NonFinite { chain, .. } => Some(chain),
            OdeError::InvalidConfig(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;

struct Chain {
    t: f64,
    h: f64,
    err_old: f64,
    stats: SolverStats,
    done: bool,
    rejected_last: bool,
}

fn rms_error(y0: &[f64], y1: &[f64], err: &[f64], atol: f64, rtol: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..err.len() {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        acc += (err[i] / sc).powi(2);
    }
    (acc / err.len() as f64).sqrt()
}

/// Right-hand side over a batch: `f(t, y, dy)` where `t` has one entry per
/// row and `y`, `dy` are row-major `rows × dim`.
pub trait BatchRhs {
    fn eval(&mut self, t: &[f64], y: &[f64], dy: &mut [f64]);
}

impl<F: FnMut(&[f64], &[f64], &mut [f64])> BatchRhs for F {
    fn eval(&mut self, t: &[f64], y: &[f64], dy: &mut [f64]) {
        self(t, y, dy)
    }
}

/// Integrates every row of `y0` (`n × dim`) from `t0` to `t1` (either
/// direction). Returns the final states and per-chain statistics.
pub fn dopri5_batch<F: BatchRhs>(
    mut f: F,
    y0: &[f64],
    dim: usize,
    t0: f64,
    t1: f64,
    cfg: &ODESolverConfig,
) -> Result<(Vec<f64>, Vec<SolverStats>), OdeError> {
    cfg.validate()?;
    assert!(dim > 0 && y0.len() % dim == 0, "state length must be a multiple of dim");
    let n = y0.len() / dim;
    let mut y = y0.to_vec();
    if n == 0 || t0 == t1 {
        return Ok((y, vec![SolverStats::default(); n]));
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();

    // FSAL derivative at the current point of each chain.
    let mut k1 = vec![0.0; n * dim];
    f.eval(&vec![t0; n], &y, &mut k1);
    for c in 0..n {
        if k1[c * dim..(c + 1) * dim].iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite { chain: c, t: t0 });
        }
    }
    let h_init = match cfg.initial_step {
        Some(h) => vec![h.min(span); n],
        None => initial_steps(&mut f, &y, &k1, dim, t0, dir, span, cfg),
    };
    let mut chains: Vec<Chain> = h_init
        .iter()
        .map(|&h| Chain {
            t: t0,
            h,
            err_old: 1e-4,
            stats: SolverStats {
                evaluations: if cfg.initial_step.is_some() { 1 } else { 2 },
                ..Default::default()
            },
            done: false,
            rejected_last: false,
        })
        .collect();

    let mut k = vec![vec![0.0; n * dim]; 7];
    let mut ys = vec![0.0; n * dim];
    let mut ts = vec![0.0; n];
    let mut active: Vec<usize> = (0..n).collect();
    // Scratch buffers for the active subset.
    let mut sub_y = Vec::new();
    let mut sub_t = Vec::new();
    let mut sub_k = Vec::new();

    while !active.is_empty() {
        for &c in &active {
            let ch = &mut chains[c];
            let remaining = (t1 - ch.t).abs();
            if ch.h >= remaining {
                ch.h = remaining;
            }
            let tiny = 16.0 * f64::EPSILON * ch.t.abs().max(span);
            if ch.h < tiny {
                return Err(OdeError::StepUnderflow {
                    chain: c,
                    t: ch.t,
                    h: ch.h,
                });
            }
            if ch.stats.accepted + ch.stats.rejected >= cfg.max_steps {
                return Err(OdeError::MaxStepsExceeded {
                    chain: c,
                    t: ch.t,
                    steps: ch.stats.accepted + ch.stats.rejected,
                });
            }
            k[0][c * dim..(c + 1) * dim].copy_from_slice(&k1[c * dim..(c + 1) * dim]);
        }
        for s in 1..7 {
            sub_y.clear();
            sub_t.clear();
            for &c in &active {
                let ch = &chains[c];
                let h = dir * ch.h;
                sub_t.push(ch.t + C[s] * h);
                for d in 0..dim {
                    let i = c * dim + d;
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += A[s][j] * kj[i];
                    }
                    ys[i] = y[i] + h * acc;
                    sub_y.push(ys[i]);
                }
            }
            sub_k.clear();
            sub_k.resize(sub_y.len(), 0.0);
            f.eval(&sub_t, &sub_y, &mut sub_k);
            for (a, &c) in active.iter().enumerate() {
                k[s][c * dim..(c + 1) * dim].copy_from_slice(&sub_k[a * dim..(a + 1) * dim]);
                chains[c].stats.evaluations += 1;
                if s == 6 {
                    ts[c] = sub_t[a];
                }
            }
        }
        // ys now holds the fifth-order solution (stage 7 uses the b weights).
        let mut errv = vec![0.0; dim];
        for &c in &active {
            let r = c * dim..(c + 1) * dim;
            if k[6][r.clone()].iter().chain(&ys[r.clone()]).any(|v| !v.is_finite()) {
                // Treat as a failed step with a forced reduction.
                let ch = &mut chains[c];
                ch.stats.rejected += 1;
                ch.h *= FAC_MIN;
                ch.rejected_last = true;
                continue;
            }
            let ch = &mut chains[c];
            let h = dir * ch.h;
            for d in 0..dim {
                let i = c * dim + d;
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += E[j] * kj[i];
                }
                errv[d] = h * acc;
            }
            let err = rms_error(&y[r.clone()], &ys[r.clone()], &errv, cfg.atol, cfg.rtol);
            if err <= 1.0 {
                let mut fac = if err == 0.0 {
                    FAC_MAX
                } else {
                    SAFETY * err.powf(-ALPHA) * ch.err_old.powf(BETA)
                };
                fac = fac.clamp(FAC_MIN, FAC_MAX);
                if ch.rejected_last {
                    fac = fac.min(1.0);
                }
                ch.err_old = err.max(1e-4);
                ch.stats.accepted += 1;
                ch.rejected_last = false;
                let finished = (t1 - ts[c]).abs() <= 0.0 || ch.h >= (t1 - ch.t).abs();
                ch.t = if finished { t1 } else { ts[c] };
                y[r.clone()].copy_from_slice(&ys[r.clone()]);
                k1[r.clone()].copy_from_slice(&k[6][r]);
                ch.h *= fac;
                ch.done = finished;
            } else {
                let fac = (SAFETY * err.powf(-ALPHA)).max(FAC_MIN);
                ch.h *= fac.min(1.0);
                ch.stats.rejected += 1;
                ch.rejected_last = true;
            }
        }
        active.retain(|&c| !chains[c].done);
    }
    Ok((y, chains.into_iter().map(|c| c.stats).collect()))
}

/// Hairer's starting-step heuristic, applied per chain (one extra batched
/// evaluation).
#[allow(clippy::too_many_arguments)]
fn initial_steps<F: BatchRhs>(
    f: &mut F,
    y0: &[f64],
    f0: &[f64],
    dim: usize,
    t0: f64,
    dir: f64,
    span: f64,
    cfg: &ODESolverConfig,
) -> Vec<f64> {
    let n = y0.len() / dim;
    let norm = |v: &[f64], y: &[f64]| {
        let s: f64 = v
            .iter()
            .zip(y)
            .map(|(a, yi)| (a / (cfg.atol + cfg.rtol * yi.abs())).powi(2))
            .sum();
        (s / v.len() as f64).sqrt()
    };
    let mut h0 = vec![0.0; n];
    let mut y1 = vec![0.0; n * dim];
    let mut t = vec![0.0; n];
    for c in 0..n {
        let r = c * dim..(c + 1) * dim;
        let d0 = norm(&y0[r.clone()], &y0[r.clone()]);
        let d1 = norm(&f0[r.clone()], &y0[r.clone()]);
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0[c] = h.min(span);
        t[c] = t0 + dir * h0[c];
        for i in r {
            y1[i] = y0[i] + dir * h0[c] * f0[i];
        }
    }
    let mut f1 = vec![0.0; n * dim];
    f.eval(&t, &y1, &mut f1);
    (0..n)
        .map(|c| {
            let r = c * dim..(c + 1) * dim;
            let diff: Vec<f64> = f1[r.clone()].iter().zip(&f0[r.clone()]).map(|(a, b)| a - b).collect();
            let d1 = norm(&f0[r.clone()], &y0[r.clone()]);
            let d2 = norm(&diff, &y0[r]) / h0[c];
            let m = d1.max(d2);
            let h1 = if !(m > 1e-15) || !m.is_finite() {
                (h0[c] * 1e-3).max(1e-6)
            } else {
                (0.01 / m).powf(0.2)
            };
            (100.0 * h0[c]).min(h1).min(span)
        })
        .collect()
}

/// Single system `dy/dt = f(t, y)`.
pub fn dopri5_integrate(
    mut f: impl FnMut(f64, &[f64], &mut [f64]),
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &ODESolverConfig,
) -> Result<(Vec<f64>, SolverStats), OdeError> {
    let dim = y0.len();
    let (y, stats) = dopri5_batch(
        |t: &[f64], y: &[f64], dy: &mut [f64]| {
            for (row, &ti) in t.iter().enumerate() {
                f(ti, &y[row * dim..(row + 1) * dim], &mut dy[row * dim..(row + 1) * dim]);
            }
        },
        y0,
        dim,
        t0,
        t1,
        cfg,
    )?;
    Ok((y, stats[0]))
}
