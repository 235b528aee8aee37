use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the single-modality inference path does with the attention machinery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceAttention {
    /// Image encoder and classifier only.
    #[default]
    None,
    /// Self-attention over image tokens with the trained Q/K projections.
    /// Requires `image_embed_channels == fusion_channels`.
    ImageSelf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token count per caption; must be a perfect square.
    pub max_seq_len: usize,
    pub text_hidden_dim: usize,
    pub vocab_size: usize,
    pub image_channels_in: usize,
    /// Output channels of the four strided encoder blocks.
    pub image_encoder_channels: [usize; 4],
    pub image_embed_channels: usize,
    pub fusion_channels: usize,
    /// Intermediate widths of the fusion CNN. `None` uses
    /// `round(max(fusion_channels, fusion_in) / 2)` for both.
    pub fusion_hidden: Option<[usize; 2]>,
    pub attention_dim: usize,
    pub num_classes: usize,
    pub inference_attention: InferenceAttention,
    pub text_frozen: bool,
}

impl ModelConfig {
    /// Small configuration used for training experiments.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            max_seq_len: 16,
            text_hidden_dim: 64,
            vocab_size,
            image_channels_in: 3,
            image_encoder_channels: [8, 16, 32, 64],
            image_embed_channels: 128,
            fusion_channels: 128,
            fusion_hidden: Some([64, 64]),
            attention_dim: 32,
            num_classes: 2,
            inference_attention: InferenceAttention::None,
            text_frozen: false,
        }
    }

    /// Full-size dimensions: 121 tokens of width 768 and a 1024-channel
    /// fusion block.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            max_seq_len: 121,
            text_hidden_dim: 768,
            vocab_size,
            image_channels_in: 3,
            image_encoder_channels: [16, 32, 64, 128],
            image_embed_channels: 256,
            fusion_channels: 1024,
            fusion_hidden: None,
            attention_dim: 64,
            num_classes: 2,
            inference_attention: InferenceAttention::None,
            text_frozen: false,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab_size)),
            "paper" => Ok(Self::paper(vocab_size)),
            other => Err(Error::Config(format!("unknown model preset `{other}` (expected desk or paper)"))),
        }
    }

    /// Side length of the square token grid.
    pub fn grid_side(&self) -> usize {
        exact_sqrt(self.max_seq_len).unwrap_or(0)
    }

    pub fn fusion_in(&self) -> usize {
        self.text_hidden_dim + self.image_embed_channels
    }

    /// Channel plan `[in, hidden1, hidden2, out]` of the fusion CNN.
    pub fn fusion_plan(&self) -> [usize; 4] {
        let [h1, h2] = self.fusion_hidden.unwrap_or_else(|| {
            let mid = self.fusion_channels.max(self.fusion_in()).div_ceil(2);
            [mid, mid]
        });
        [self.fusion_in(), h1, h2, self.fusion_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if exact_sqrt(self.max_seq_len).is_none() || self.max_seq_len == 0 {
            return fail(format!("max_seq_len {} is not a positive perfect square", self.max_seq_len));
        }
        let positive = [
            ("text_hidden_dim", self.text_hidden_dim),
            ("image_channels_in", self.image_channels_in),
            ("image_embed_channels", self.image_embed_channels),
            ("fusion_channels", self.fusion_channels),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.image_encoder_channels.contains(&0) || self.fusion_plan().contains(&0) {
            return fail("encoder and fusion channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.vocab_size < 2 {
            return fail("vocabulary must hold at least PAD and UNK".into());
        }
        if self.inference_attention == InferenceAttention::ImageSelf && self.image_embed_channels != self.fusion_channels {
            return fail(format!(
                "image-self inference attention needs image_embed_channels ({}) == fusion_channels ({})",
                self.image_embed_channels, self.fusion_channels
            ));
        }
        Ok(())
    }
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk(40).validate().unwrap();
        ModelConfig::paper(40).validate().unwrap();
        assert_eq!(ModelConfig::paper(40).grid_side(), 11);
        assert_eq!(ModelConfig::paper(40).fusion_plan(), [1024, 512, 512, 1024]);
        assert_eq!(ModelConfig::desk(40).fusion_plan(), [192, 64, 64, 128]);
    }

    #[test]
    fn rejects_non_square_sequence() {
        let cfg = ModelConfig { max_seq_len: 120, ..ModelConfig::desk(40) };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn image_self_needs_matching_widths() {
        let mut cfg = ModelConfig { inference_attention: InferenceAttention::ImageSelf, ..ModelConfig::desk(40) };
        cfg.validate().unwrap();
        cfg.fusion_channels = 96;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_fusion_plan_halves_the_wider_side() {
        let cfg = ModelConfig { fusion_hidden: None, ..ModelConfig::desk(40) };
        assert_eq!(cfg.fusion_plan(), [192, 96, 96, 128]);
    }
}
