//! Similarity-representation alignment between toy image and text encoders.
//!
//! The pipeline: encode an image into local patch tokens plus a global vector,
//! encode a report into local word tokens plus a global vector, then score
//! every (text, image) pair with a shared cross-attention block whose output
//! is projected down to a single similarity logit. Training pulls matched
//! pairs together with a bidirectional InfoNCE loss; evaluation reuses the
//! same logits for zero-shot classification and the attention weights for
//! pointing-game grounding.

pub mod alignment;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
