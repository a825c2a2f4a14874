//! Paired datasets: synthetic generation with known latent structure, the
//! FEAT on-disk format, and deterministic batching.

pub mod batching;
pub mod feat;
pub mod synthetic;

pub use batching::batch_iter;
pub use feat::{read_feature_file, write_feature_file};
pub use synthetic::{generate_synthetic_pairs, SyntheticSpec};

use std::path::PathBuf;

use thiserror::Error;

use crate::encoders::{EncoderError, FeatureSequence};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic {found:?} at offset 0 (expected \"FEAT\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found}")]
    Version { found: u32 },
    #[error("truncated file at offset {offset}: {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("malformed record at offset {offset}: {what}")]
    Malformed { offset: u64, what: String },
    #[error("degenerate synthetic spec: {0}")]
    DegenerateSpec(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One aligned pair: an image-side feature map and a language-side feature
/// sequence that derive from the same source.
#[derive(Debug, Clone)]
pub struct PairedRecord {
    pub pair_id: u64,
    pub class_label: u32,
    /// [H, W, f] feature map.
    pub image: Tensor,
    pub language: FeatureSequence,
}

/// Shapes shared by every record of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub image: (usize, usize, usize),
    pub seq_len: usize,
    pub lang_feat: usize,
    /// Unit vocabulary implied by the records (max id + 1).
    pub n_units: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub records: Vec<PairedRecord>,
}

impl PairedDataset {
    pub fn new(records: Vec<PairedRecord>) -> Result<Self> {
        let ds = PairedDataset { records };
        if !ds.records.is_empty() {
            ds.dims()?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Common dims across records; records must agree.
    pub fn dims(&self) -> Result<DataDims> {
        let first = self
            .records
            .first()
            .ok_or_else(|| DataError::Inconsistent("empty dataset".into()))?;
        let ishape = first.image.shape();
        let image = (ishape[0], ishape[1], ishape[2]);
        let seq_len = first.language.len();
        let lang_feat = first.language.feat_dim();
        let mut n_units = 0usize;
        let mut n_classes = 0usize;
        for r in &self.records {
            let s = r.image.shape();
            if s.len() != 3 || (s[0], s[1], s[2]) != image {
                return Err(DataError::Inconsistent(format!(
                    "image shape {s:?} differs from {image:?} (pair {})",
                    r.pair_id
                )));
            }
            if r.language.len() != seq_len || r.language.feat_dim() != lang_feat {
                return Err(DataError::Inconsistent(format!(
                    "sequence shape differs (pair {})",
                    r.pair_id
                )));
            }
            if let Some(ids) = &r.language.unit_ids {
                for id in ids {
                    n_units = n_units.max(*id as usize + 1);
                }
            }
            n_classes = n_classes.max(r.class_label as usize + 1);
        }
        Ok(DataDims {
            image,
            seq_len,
            lang_feat,
            n_units: n_units.max(n_classes),
            n_classes,
        })
    }

    pub fn labels(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.class_label).collect()
    }
}
