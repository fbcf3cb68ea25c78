//! Citation intent classification with structural scaffolds.
//!
//! A shared BiLSTM encoder with dot-product attention pooling feeds one MLP
//! head per task: the main citation-intent task plus auxiliary "scaffold"
//! tasks (citation worthiness, section title) whose labels come for free from
//! document structure. The crate bundles everything around that model:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: a small reverse-mode autodiff
//!   engine over dense `f64` tensors.
//! * [`layers`] and [`model`]: the encoder, heads, joint loss and inference.
//! * [`data`]: tokenization, vocabulary, JSONL readers, word vectors.
//! * [`scaffold`] and [`annotate`]: scaffold dataset construction and crowd
//!   annotation aggregation.
//! * [`trainer`]: mixed-task batching, AdaDelta, clipping, early stopping.
//! * [`eval`]: macro F1, confusion matrices, attention heatmaps.

pub mod annotate;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod scaffold;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Seeded RNG used throughout for reproducibility.
pub type Rng = rand_chacha::ChaCha8Rng;
