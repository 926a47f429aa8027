use serde::{Deserialize, Serialize};

use super::NnError;

/// Named slice of the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Appends segments back to back.
#[derive(Debug, Default, Clone)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    next: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.next;
        let seg = Segment {
            name: name.into(),
            offset,
            shape: shape.to_vec(),
        };
        self.next += seg.len();
        self.segments.push(seg);
        offset
    }

    pub fn total(&self) -> usize {
        self.next
    }

    pub fn finish(self) -> Vec<Segment> {
        self.segments
    }
}

/// Flat 64-bit parameter array with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.iter().map(Segment::len).sum();
        Self {
            data: vec![0.0; n],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[range])
    }

    /// The layout must tile `data` exactly, in order, without overlap.
    pub fn validate(&self) -> Result<(), NnError> {
        let mut cursor = 0;
        for s in &self.layout {
            if s.offset != cursor {
                return Err(NnError::Layout(format!(
                    "segment {} starts at {} but previous coverage ends at {cursor}",
                    s.name, s.offset
                )));
            }
            cursor += s.len();
        }
        if cursor != self.data.len() {
            return Err(NnError::Layout(format!(
                "layout covers {cursor} values, array has {}",
                self.data.len()
            )));
        }
        Ok(())
    }
}
