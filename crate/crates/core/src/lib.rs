//! Multi-task speech emotion recognition on per-layer backbone features.
//!
//! The pipeline fuses all hidden layers with learned softmax weights, pools
//! frames with attentive statistics, and feeds four task branches (emotion,
//! gender, speaker, CTC speech recognition). A co-attention block mixes the
//! auxiliary branches' first-layer features into the emotion branch, and a
//! sample-weighted focal contrastive loss acts on the pooled representation.

pub mod checkpoint;
pub mod coattention;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod gradcheck;
pub mod numerics;
pub mod params;
pub mod heads;
pub mod losses;
pub mod model;
pub mod pooling;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Tensor;
