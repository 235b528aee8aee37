//! Multimodal guidance network for missing-modality image classification.
//!
//! During training a caption and an image are fused, and the self-attention
//! map of the fused block re-weights the image embedding before
//! classification. At inference only the image encoder and classifier run.

pub mod data;
pub mod error;
pub mod model;
pub mod numeric;
pub mod seed;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{GuidanceModel, ModelConfig, Vocab};
pub use numeric::{Graph, Tensor, Var};
