//! The two towers mapping feature maps and feature sequences into one shared
//! unit-norm embedding space.

pub mod image;
pub mod language;
pub mod layers;
pub mod masking;
pub mod sequence;

pub use image::{average_pool, extract_patches, self_attention_block, ImageEncoder, ImageEncoderConfig};
pub use language::{
    layer_weighted_pool, Corruption, LanguageEncoder, LanguageEncoderConfig, LanguageForward,
};
pub use layers::{EncoderLayer, LayerNormParams, Linear, Mlp, MultiHeadAttention};
pub use masking::{draw_span_mask, draw_swap_positions, SpanMask};
pub use sequence::{FeatureSequence, Modality};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Anything that exposes its parameters as a stable named list.
pub trait ParamSet {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

impl ParamSet for ImageEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params()
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params_mut()
    }
}

impl ParamSet for LanguageEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params()
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params_mut()
    }
}

impl ParamSet for Mlp {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params("")
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params_mut("")
    }
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model dim {dim} is not divisible by {heads} heads")]
    HeadCount { dim: usize, heads: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("unit ids required but absent")]
    MissingUnitIds,
    #[error("unit_ids length {ids} does not match sequence length {frames}")]
    UnitIdLength { ids: usize, frames: usize },
    #[error("unit id {id} out of range for vocabulary of {n_units}")]
    UnitIdOutOfRange { id: u32, n_units: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("encoder configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;
