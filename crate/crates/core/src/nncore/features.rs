//! Input feature maps: Gaussian radial basis functions of a scalar coordinate
//! and sinusoidal embeddings of flow time.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::LayoutBuilder;
use super::tape::Var;
use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfLayerSpec {
    pub n_centers: usize,
    /// Fixed width σ.
    pub width: f64,
    /// Interval the trainable centers are drawn from at initialization.
    pub init_range: (f64, f64),
}

impl Default for RbfLayerSpec {
    fn default() -> Self {
        Self {
            n_centers: 100,
            width: 5.0,
            init_range: (10.0, 50.0),
        }
    }
}

/// `φ_k(R) = exp(-(R - c_k)² / (2σ²))` with trainable centers `c_k`.
#[derive(Debug, Clone)]
pub struct Rbf {
    spec: RbfLayerSpec,
    offset: usize,
}

/// Features and their derivative with respect to the input coordinate.
pub struct RbfPass {
    pub phi: Array2<f64>,
    pub dphi: Array2<f64>,
}

impl Rbf {
    pub fn new(spec: RbfLayerSpec, layout: &mut LayoutBuilder, name: &str) -> Result<Self, NnError> {
        if spec.n_centers == 0 || !(spec.width > 0.0) {
            return Err(NnError::Spec(format!(
                "RBF layer needs n_centers >= 1 and width > 0: {spec:?}"
            )));
        }
        let offset = layout.push(name, &[spec.n_centers]);
        Ok(Self { spec, offset })
    }

    pub fn spec(&self) -> &RbfLayerSpec {
        &self.spec
    }

    pub fn centers<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.spec.n_centers]
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let (lo, hi) = self.spec.init_range;
        for c in &mut params[self.offset..self.offset + self.spec.n_centers] {
            *c = lo + (hi - lo) * rng.random::<f64>();
        }
    }

    pub fn forward(&self, params: &[f64], r: &[f64]) -> RbfPass {
        let centers = self.centers(params);
        let inv_w2 = 1.0 / (self.spec.width * self.spec.width);
        let k = centers.len();
        let mut phi = Array2::zeros((r.len(), k));
        let mut dphi = Array2::zeros((r.len(), k));
        for (b, &x) in r.iter().enumerate() {
            for (j, &c) in centers.iter().enumerate() {
                let d = x - c;
                let p = (-0.5 * d * d * inv_w2).exp();
                phi[[b, j]] = p;
                dphi[[b, j]] = -p * d * inv_w2;
            }
        }
        RbfPass { phi, dphi }
    }

    /// Accumulates center gradients from cotangents of `phi` and `dphi`.
    pub fn backward(
        &self,
        params: &[f64],
        r: &[f64],
        g_phi: &Array2<f64>,
        g_dphi: Option<&Array2<f64>>,
        grad: &mut [f64],
    ) {
        let centers = self.centers(params);
        let inv_w2 = 1.0 / (self.spec.width * self.spec.width);
        let g = &mut grad[self.offset..self.offset + centers.len()];
        for (b, &x) in r.iter().enumerate() {
            for (j, &c) in centers.iter().enumerate() {
                let d = x - c;
                let p = (-0.5 * d * d * inv_w2).exp();
                let mut acc = g_phi[[b, j]] * p * d * inv_w2;
                if let Some(gd) = g_dphi {
                    acc += gd[[b, j]] * p * (1.0 - d * d * inv_w2) * inv_w2;
                }
                g[j] += acc;
            }
        }
    }

    /// Features of one input on the tape: `(φ, dφ/dR)`.
    pub fn forward_tape<'t>(&self, params: &[Var<'t>], r: Var<'t>) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
        let inv_w2 = 1.0 / (self.spec.width * self.spec.width);
        (0..self.spec.n_centers)
            .map(|j| {
                let d = r - params[self.offset + j];
                let p = (d * d * (-0.5 * inv_w2)).exp();
                (p, -(p * d) * inv_w2)
            })
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbeddingSpec {
    pub dimension: usize,
    /// Frequencies are geometrically spaced in `[1, max_frequency]`.
    pub max_frequency: f64,
}

impl Default for TimeEmbeddingSpec {
    fn default() -> Self {
        Self {
            dimension: 16,
            max_frequency: 30.0,
        }
    }
}

impl TimeEmbeddingSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.dimension < 2 || self.dimension % 2 != 0 || !(self.max_frequency >= 1.0) {
            return Err(NnError::Spec(format!(
                "time embedding needs an even dimension >= 2 and max_frequency >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let k = self.dimension / 2;
        if k == 1 {
            return vec![1.0];
        }
        (0..k)
            .map(|i| self.max_frequency.powf(i as f64 / (k - 1) as f64))
            .collect()
    }

    /// `[sin(ω_1 t) .. sin(ω_K t), cos(ω_1 t) .. cos(ω_K t)]` written into `out`.
    pub fn embed_into(&self, freqs: &[f64], t: f64, out: &mut [f64]) {
        let k = freqs.len();
        for (i, w) in freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            out[i] = s;
            out[k + i] = c;
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        self.embed_into(&self.frequencies(), t, &mut out);
        out
    }
}
