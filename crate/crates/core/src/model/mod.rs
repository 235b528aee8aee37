//! Text-guided image embedding re-weighting.

pub mod checkpoint;
mod config;
mod network;
mod params;
mod vocab;

pub use config::{InferenceAttention, ModelConfig};
pub use network::{reweight, AttentionOverride, Bindings, GuidanceModel, Mode, MIN_IMAGE_SIDE};
pub use params::{Group, Param, ParamStore};
pub use vocab::{Vocab, PAD, UNK};
