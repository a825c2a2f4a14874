//! Dual-tower cross-modal contrastive representation learning over paired
//! feature streams, with the downstream evaluation protocol (linear probe,
//! zero-shot, cross-modal retrieval, segment F1) and a matching-score
//! candidate reranker.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor core
//! drives two encoder towers trained with temperature-scaled contrastive
//! losses, either against in-batch negatives or against momentum-encoder
//! negative queues.

pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod rng;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
