//! JSON checkpoints: model description, flat parameters as base64 of
//! little-endian f64, optional optimizer state.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::params::{ParamVector, Segment};
use super::NnError;

pub const CHECKPOINT_FORMAT: &str = "CGBG-CKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// Model kind tag, e.g. "pmf" or "cnf".
    pub kind: String,
    /// Model-specific description (architecture, standardizer, ...).
    pub model: serde_json::Value,
    pub layout: Vec<Segment>,
    pub params: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
}

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>, NnError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| NnError::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(NnError::Checkpoint(format!(
            "parameter payload of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        model: serde_json::Value,
        params: &ParamVector,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            kind: kind.into(),
            model,
            layout: params.layout.clone(),
            params: encode_f64(&params.data),
            optimizer,
        }
    }

    pub fn param_vector(&self) -> Result<ParamVector, NnError> {
        let pv = ParamVector {
            data: decode_f64(&self.params)?,
            layout: self.layout.clone(),
        };
        pv.validate()?;
        Ok(pv)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), NnError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!("unknown format tag {:?}", self.format)));
        }
        if self.kind != kind {
            return Err(NnError::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
