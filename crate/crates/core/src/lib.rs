//! Training-free semantic segmentation from serialized diffusion-model
//! attention activations.
//!
//! An [`ActivationBundle`](bundle::ActivationBundle) holds one image's
//! cross-attention maps, per-head output summands, self-attention maps and a
//! dense feature. [`segment`](correlation::segment) aggregates the
//! cross-attention heads and layers with activation-derived weights, turns
//! the global map into per-class scores and labels every pixel.

pub mod aggregation;
pub mod bench;
pub mod bundle;
pub mod config;
pub mod correlation;
pub mod eval;
pub mod fixture;
pub mod mask;
pub mod tensor;

pub use bundle::{load_bundle, write_bundle, ActivationBundle};
pub use config::EngineConfig;
pub use correlation::{segment, segment_traced, GlobalAttentionMap, Stage};
pub use mask::SegmentationMask;
pub use tensor::Tensor;
