//! Training-free alignment of foundation-model embeddings to an LLM's input
//! space: PCA stringification, zero padding, random-noise controls, untrained
//! random projection and per-dimension moment alignment, plus few-shot prompt
//! assembly and Monte Carlo diagnostics.

pub mod diagnostics;
pub mod embed_store;
pub mod error;
pub mod ot_align;
pub mod pca;
pub mod projector;
pub mod prompting;
pub mod rng;
pub mod stats;
pub mod synthetic;

pub use embed_store::{EmbeddingMatrix, LabeledDataset, NormalizationParams};
pub use error::{Error, Result};
