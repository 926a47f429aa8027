//! Coarse-graining map, force projection, standardization and persistence of
//! coarse-grained training data.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, FormatError};
use crate::langevin::AtomisticDataset;
use crate::potential::Point2;
use crate::rng::{streams, substream};
use crate::sum::pairwise_sum;

pub const CG_MAGIC: &[u8] = b"CGBG-CG1";

#[derive(Debug, Error)]
pub enum CgDataError {
    #[error("degenerate variance: std {0:e} < 1e-12")]
    DegenerateVariance(f64),
    #[error("need at least {needed} samples, have {have}")]
    TooFewSamples { needed: usize, have: usize },
    #[error("split ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Linear slice map: the CG coordinate is one Cartesian component, and the
/// projected force is the same component of the atomistic force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CGMapping {
    pub component: Axis,
}

impl Default for CGMapping {
    fn default() -> Self {
        Self { component: Axis::X }
    }
}

impl CGMapping {
    pub fn coordinate(&self, p: Point2) -> f64 {
        match self.component {
            Axis::X => p.x,
            Axis::Y => p.y,
        }
    }

    pub fn project_force(&self, f: [f64; 2]) -> f64 {
        match self.component {
            Axis::X => f[0],
            Axis::Y => f[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CGSample {
    pub r: f64,
    pub force: f64,
}

/// Affine map `R' = (R - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn forward(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }

    pub fn inverse(&self, r: f64) -> f64 {
        r * self.std + self.mean
    }

    /// `ln |dR'/dR|`, to be added to log-densities taken in standardized
    /// coordinates to obtain raw-coordinate log-densities.
    pub fn log_jacobian(&self) -> f64 {
        -self.std.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_hash: String,
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CGDataset {
    pub samples: Vec<CGSample>,
    pub standardizer: Option<Standardizer>,
    pub provenance: Provenance,
}

pub fn apply_mapping(ds: &AtomisticDataset, mapping: &CGMapping) -> Result<CGDataset, FormatError> {
    let samples = ds
        .records
        .iter()
        .map(|rec| CGSample {
            r: mapping.coordinate(rec.position),
            force: mapping.project_force(rec.force),
        })
        .collect();
    Ok(CGDataset {
        samples,
        standardizer: None,
        provenance: Provenance {
            source_hash: ds.content_hash()?,
            bias: ds.metadata.bias.clone(),
        },
    })
}

/// Mean and population standard deviation.
pub fn fit_standardizer(ds: &CGDataset) -> Result<Standardizer, CgDataError> {
    let n = ds.samples.len();
    if n < 2 {
        return Err(CgDataError::TooFewSamples { needed: 2, have: n });
    }
    let rs: Vec<f64> = ds.samples.iter().map(|s| s.r).collect();
    let mean = pairwise_sum(&rs) / n as f64;
    let sq: Vec<f64> = rs.iter().map(|r| (r - mean) * (r - mean)).collect();
    let std = (pairwise_sum(&sq) / n as f64).sqrt();
    if !(std >= 1e-12) {
        return Err(CgDataError::DegenerateVariance(std));
    }
    Ok(Standardizer { mean, std })
}

/// Maps coordinates to standardized units and scales forces by `std`
/// (chain rule: `dU/dR' = std · dU/dR`).
pub fn standardize(ds: &CGDataset, s: &Standardizer) -> CGDataset {
    CGDataset {
        samples: ds
            .samples
            .iter()
            .map(|x| CGSample {
                r: s.forward(x.r),
                force: x.force * s.std,
            })
            .collect(),
        standardizer: Some(*s),
        provenance: ds.provenance.clone(),
    }
}

pub fn destandardize(r: f64, s: &Standardizer) -> f64 {
    s.inverse(r)
}

/// Deterministic shuffled partition into `(train, val)`; `train` receives
/// `round(ratio · n)` samples.
pub fn split(ds: &CGDataset, ratio: f64, seed: u64) -> Result<(CGDataset, CGDataset), CgDataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CgDataError::BadRatio(ratio));
    }
    let n = ds.samples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, streams::SPLIT));
    let n_train = (ratio * n as f64).round() as usize;
    let take = |ids: &[usize]| CGDataset {
        samples: ids.iter().map(|&i| ds.samples[i]).collect(),
        standardizer: ds.standardizer,
        provenance: ds.provenance.clone(),
    };
    Ok((take(&idx[..n_train]), take(&idx[n_train..])))
}

#[derive(Serialize, Deserialize)]
struct CgHeader {
    provenance: Provenance,
    standardizer: Option<Standardizer>,
    count: usize,
}

impl CGDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn coordinates(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.r).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let flat: Vec<f64> = self.samples.iter().flat_map(|s| [s.r, s.force]).collect();
        let header = CgHeader {
            provenance: self.provenance.clone(),
            standardizer: self.standardizer,
            count: self.samples.len(),
        };
        container::encode(CG_MAGIC, &header, &flat)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (h, flat) = container::decode::<CgHeader>(CG_MAGIC, bytes, |h| h.count * 2)?;
        Ok(Self {
            samples: flat
                .chunks_exact(2)
                .map(|c| CGSample { r: c[0], force: c[1] })
                .collect(),
            standardizer: h.standardizer,
            provenance: h.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
