//! Language-side inputs: frame sequences with optional unit ids.

use crate::tensor::Tensor;

use super::{EncoderError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Text,
    /// Frames and unit ids together; runs the audio path and makes swap and
    /// prediction targets available.
    Fused,
}

impl Modality {
    pub fn as_u8(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Text => 1,
            Modality::Fused => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Text),
            2 => Some(Modality::Fused),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub modality: Modality,
    /// [T, f] frames. Ignored on the text path but always present.
    pub frames: Tensor,
    /// Per-frame unit ids; required for text input, swapping, and
    /// prediction targets.
    pub unit_ids: Option<Vec<u32>>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, frames: Tensor, unit_ids: Option<Vec<u32>>) -> Result<Self> {
        if frames.shape().len() != 2 || frames.shape()[0] == 0 {
            return Err(EncoderError::EmptySequence);
        }
        if let Some(ids) = &unit_ids {
            if ids.len() != frames.shape()[0] {
                return Err(EncoderError::UnitIdLength {
                    ids: ids.len(),
                    frames: frames.shape()[0],
                });
            }
        }
        if modality == Modality::Text && unit_ids.is_none() {
            return Err(EncoderError::MissingUnitIds);
        }
        Ok(FeatureSequence {
            modality,
            frames,
            unit_ids,
        })
    }

    /// A pure-text sequence from unit ids alone.
    pub fn text(unit_ids: Vec<u32>, feat_dim: usize) -> Result<Self> {
        let t = unit_ids.len();
        if t == 0 {
            return Err(EncoderError::EmptySequence);
        }
        FeatureSequence::new(
            Modality::Text,
            Tensor::zeros(vec![t, feat_dim]),
            Some(unit_ids),
        )
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.shape()[1]
    }
}
