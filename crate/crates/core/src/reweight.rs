//! Self-normalized importance weights, weight clipping, effective sample size
//! and bootstrap uncertainties.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, FormatError};
use crate::potential::ThermoState;
use crate::rng::{streams, substream};
use crate::sum::{log_sum_exp, pairwise_sum};

pub const ENSEMBLE_MAGIC: &[u8] = b"CGBG-ENS1";

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error("non-finite {what} at index {index}")]
    NonFiniteInput { what: &'static str, index: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("every sample was clipped")]
    AllClipped,
    #[error("invalid clip policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `log w_i = -β E_i - log q_i`.
pub fn log_weights(energies: &[f64], log_q: &[f64], thermo: &ThermoState) -> Result<Vec<f64>, ReweightError> {
    if energies.len() != log_q.len() {
        return Err(ReweightError::LengthMismatch(energies.len(), log_q.len()));
    }
    energies
        .iter()
        .zip(log_q)
        .enumerate()
        .map(|(index, (&e, &lq))| {
            if !e.is_finite() {
                return Err(ReweightError::NonFiniteInput { what: "energy", index });
            }
            if !lq.is_finite() {
                return Err(ReweightError::NonFiniteInput { what: "log_q", index });
            }
            Ok(-thermo.beta * e - lq)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Drop the largest log-weights.
    #[default]
    Discard,
    /// Keep every sample but lower the largest log-weights to the highest
    /// surviving value.
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipPolicy {
    pub fraction: f64,
    #[serde(default)]
    pub mode: ClipMode,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            mode: ClipMode::Discard,
        }
    }
}

impl ClipPolicy {
    pub fn discard(fraction: f64) -> Self {
        Self {
            fraction,
            mode: ClipMode::Discard,
        }
    }

    pub fn validate(&self) -> Result<(), ReweightError> {
        if !(0.0..0.5).contains(&self.fraction) {
            return Err(ReweightError::InvalidPolicy(format!(
                "fraction must lie in [0, 0.5), got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Indices of the `⌊fraction·B⌋` largest log-weights. Among equal values the
/// higher index is removed first.
fn clipped_indices(log_w: &[f64], fraction: f64) -> Vec<usize> {
    let k = (fraction * log_w.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..log_w.len()).collect();
    idx.sort_by(|&a, &b| log_w[b].total_cmp(&log_w[a]).then(b.cmp(&a)));
    idx.truncate(k);
    idx
}

/// Survivor mask under the discard rule.
pub fn clip(log_w: &[f64], policy: &ClipPolicy) -> Result<Vec<bool>, ReweightError> {
    policy.validate()?;
    let mut keep = vec![true; log_w.len()];
    for i in clipped_indices(log_w, policy.fraction) {
        keep[i] = false;
    }
    Ok(keep)
}

/// Applies a policy: returns the survivor mask and the (possibly capped)
/// log-weights.
pub fn apply_clip(log_w: &[f64], policy: &ClipPolicy) -> Result<(Vec<bool>, Vec<f64>), ReweightError> {
    match policy.mode {
        ClipMode::Discard => Ok((clip(log_w, policy)?, log_w.to_vec())),
        ClipMode::Cap => {
            let mask = clip(log_w, policy)?;
            let ceiling = log_w
                .iter()
                .zip(&mask)
                .filter(|(_, &k)| k)
                .map(|(w, _)| *w)
                .fold(f64::NEG_INFINITY, f64::max);
            let capped = log_w.iter().map(|&w| w.min(ceiling)).collect();
            Ok((vec![true; log_w.len()], capped))
        }
    }
}

/// Normalized weights over survivors (zero for clipped samples).
pub fn normalize(log_w: &[f64], keep: &[bool]) -> Result<Vec<f64>, ReweightError> {
    if log_w.len() != keep.len() {
        return Err(ReweightError::LengthMismatch(log_w.len(), keep.len()));
    }
    let surv: Vec<f64> = log_w.iter().zip(keep).filter(|(_, &k)| k).map(|(w, _)| *w).collect();
    if surv.is_empty() {
        return Err(ReweightError::AllClipped);
    }
    let lse = log_sum_exp(&surv);
    Ok(log_w
        .iter()
        .zip(keep)
        .map(|(&w, &k)| if k { (w - lse).exp() } else { 0.0 })
        .collect())
}

/// Kish effective sample size of normalized weights: `(1/Σw², ess/len)`.
pub fn ess(weights: &[f64]) -> (f64, f64) {
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    let total = pairwise_sum(weights);
    let abs = total * total / pairwise_sum(&sq);
    (abs, abs / weights.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEnsemble {
    pub r: Vec<f64>,
    pub log_q: Vec<f64>,
    pub energy: Vec<f64>,
    /// Log-weights after clipping (capped values in cap mode).
    pub log_w: Vec<f64>,
    pub keep: Vec<bool>,
    pub weights: Vec<f64>,
    pub ess_abs: f64,
    /// Relative to the number of survivors.
    pub ess_norm: f64,
    /// Relative to the full sample count.
    pub ess_norm_total: f64,
    pub policy: ClipPolicy,
    pub kt: f64,
}

impl WeightedEnsemble {
    pub fn build(
        r: Vec<f64>,
        log_q: Vec<f64>,
        energy: Vec<f64>,
        thermo: &ThermoState,
        policy: ClipPolicy,
    ) -> Result<Self, ReweightError> {
        if r.len() != log_q.len() {
            return Err(ReweightError::LengthMismatch(r.len(), log_q.len()));
        }
        let raw = log_weights(&energy, &log_q, thermo)?;
        let (keep, log_w) = apply_clip(&raw, &policy)?;
        let weights = normalize(&log_w, &keep)?;
        let surv: Vec<f64> = weights.iter().zip(&keep).filter(|(_, &k)| k).map(|(w, _)| *w).collect();
        let (ess_abs, ess_norm) = ess(&surv);
        Ok(Self {
            ess_norm_total: ess_abs / r.len() as f64,
            r,
            log_q,
            energy,
            log_w,
            keep,
            weights,
            ess_abs,
            ess_norm,
            policy,
            kt: thermo.kt,
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn survivors(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let header = EnsembleHeader {
            count: self.len(),
            policy: self.policy,
            kt: self.kt,
            ess_abs: self.ess_abs,
            ess_norm: self.ess_norm,
            ess_norm_total: self.ess_norm_total,
        };
        let mut rec = Vec::with_capacity(self.len() * 6);
        for i in 0..self.len() {
            rec.extend_from_slice(&[
                self.r[i],
                self.log_q[i],
                self.energy[i],
                self.log_w[i],
                if self.keep[i] { 1.0 } else { 0.0 },
                self.weights[i],
            ]);
        }
        container::encode(ENSEMBLE_MAGIC, &header, &rec)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (h, rec): (EnsembleHeader, _) =
            container::decode(ENSEMBLE_MAGIC, bytes, |h: &EnsembleHeader| 6 * h.count)?;
        let col = |j: usize| -> Vec<f64> { rec.chunks_exact(6).map(|c| c[j]).collect() };
        Ok(Self {
            r: col(0),
            log_q: col(1),
            energy: col(2),
            log_w: col(3),
            keep: col(4).into_iter().map(|k| k != 0.0).collect(),
            weights: col(5),
            ess_abs: h.ess_abs,
            ess_norm: h.ess_norm,
            ess_norm_total: h.ess_norm_total,
            policy: h.policy,
            kt: h.kt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReweightError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReweightError> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ReweightError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "R,log_q,energy,log_w,keep,weight")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.r[i], self.log_q[i], self.energy[i], self.log_w[i], self.keep[i] as u8, self.weights[i]
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    count: usize,
    policy: ClipPolicy,
    kt: f64,
    ess_abs: f64,
    ess_norm: f64,
    ess_norm_total: f64,
}

/// `Σ w_i O(R_i)` over survivors.
pub fn expectation(ens: &WeightedEnsemble, obs: impl Fn(f64) -> f64) -> f64 {
    let terms: Vec<f64> = ens
        .survivors()
        .into_iter()
        .map(|i| ens.weights[i] * obs(ens.r[i]))
        .collect();
    pairwise_sum(&terms)
}

fn resampled_estimate(ens: &WeightedEnsemble, surv: &[usize], pick: &[usize], obs: &impl Fn(f64) -> f64) -> f64 {
    let lw: Vec<f64> = pick.iter().map(|&j| ens.log_w[surv[j]]).collect();
    let lse = log_sum_exp(&lw);
    let terms: Vec<f64> = pick
        .iter()
        .zip(&lw)
        .map(|(&j, &l)| (l - lse).exp() * obs(ens.r[surv[j]]))
        .collect();
    pairwise_sum(&terms)
}

/// Bootstrap over survivors with replicate `b` drawn from its own stream.
/// Returns the replicate mean and standard deviation.
pub fn bootstrap(ens: &WeightedEnsemble, obs: impl Fn(f64) -> f64, n_boot: usize, seed: u64) -> (f64, f64) {
    bootstrap_with(ens, obs, n_boot, |b, n| bootstrap_indices(seed, b, n))
}

/// Resample of `0..n` with replacement for replicate `b`.
pub fn bootstrap_indices(seed: u64, replicate: usize, n: usize) -> Vec<usize> {
    let mut rng = substream(seed, streams::BOOTSTRAP + replicate as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstrap with a caller-supplied resampler `(replicate, n) -> indices`
/// into the survivor list.
pub fn bootstrap_with(
    ens: &WeightedEnsemble,
    obs: impl Fn(f64) -> f64,
    n_boot: usize,
    mut resample: impl FnMut(usize, usize) -> Vec<usize>,
) -> (f64, f64) {
    assert!(n_boot >= 2, "bootstrap needs at least two replicates");
    let surv = ens.survivors();
    let est: Vec<f64> = (0..n_boot)
        .map(|b| resampled_estimate(ens, &surv, &resample(b, surv.len()), &obs))
        .collect();
    mean_std(&est)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let var = if xs.len() > 1 { pairwise_sum(&dev) / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSweepRow {
    pub fraction: f64,
    pub ess_abs: f64,
    pub ess_norm: f64,
    pub ess_norm_total: f64,
}

pub const DEFAULT_CLIP_SWEEP: [f64; 6] = [0.0, 0.001, 0.01, 0.05, 0.1, 0.2];

/// ESS of the same proposal samples under each discard fraction.
pub fn clip_sweep(
    log_q: &[f64],
    energy: &[f64],
    thermo: &ThermoState,
    fractions: &[f64],
) -> Result<Vec<ClipSweepRow>, ReweightError> {
    let lw = log_weights(energy, log_q, thermo)?;
    fractions
        .iter()
        .map(|&f| {
            let keep = clip(&lw, &ClipPolicy::discard(f))?;
            let w = normalize(&lw, &keep)?;
            let surv: Vec<f64> = w.iter().zip(&keep).filter(|(_, &k)| k).map(|(w, _)| *w).collect();
            let (a, n) = ess(&surv);
            Ok(ClipSweepRow {
                fraction: f,
                ess_abs: a,
                ess_norm: n,
                ess_norm_total: a / lw.len() as f64,
            })
        })
        .collect()
}
