//! Confidence machinery for panoptic self-training with mask transformers.
//!
//! The crate covers the loss-side pipeline of a mean-teacher setup:
//! pixel-level confidence and panoptic fusion, mask-wide loss scaling,
//! confidence-based point filtering, bipartite matching with point-sampled
//! mask losses, SegMix augmentation, PQ/SQ/RQ evaluation, and a desk-scale
//! self-training simulator with analytic gradients.

pub mod confidence;
pub mod ema;
pub mod error;
pub mod loss;
pub mod panoptic;
pub mod pq;
pub mod rng;
pub mod segmix;
pub mod sim;
pub mod tensor;

mod assign;

pub use error::{Error, Result};
pub use tensor::{read_tensor, write_tensor, Dtype, SegmentEntry, SegmentTable, Tensor};
