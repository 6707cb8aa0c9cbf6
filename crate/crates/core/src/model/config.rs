use serde::{Deserialize, Serialize};

use super::ModelError;

/// Token indices in the text vocabulary.
pub mod tokens {
    /// Nine semantic class tokens occupy indices `0..9`.
    pub const CLASS_COUNT: usize = 9;
    pub const HIGH_QUALITY: usize = 9;
    pub const LOW_QUALITY: usize = 10;
    /// Fixed four-token prefix of the hard prompt ("a photo of a").
    pub const HARD_PREFIX: [usize; 4] = [11, 12, 13, 14];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub context_length: usize,
    pub temperature: f64,
    /// Seed of the frozen encoder weights.
    pub init_seed: u64,
    /// Trailing image blocks unfrozen during fine-tuning.
    pub finetune_image_blocks: usize,
    /// Trailing text blocks unfrozen during fine-tuning.
    pub finetune_text_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            image_layers: 4,
            text_layers: 2,
            heads: 4,
            mlp_ratio: 4,
            vocab: 32,
            context_length: 4,
            temperature: 0.07,
            init_seed: 0,
            finetune_image_blocks: 2,
            finetune_text_blocks: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &'static str, reason: &str| {
            Err(ModelError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("heads", "embed_dim must be a positive multiple of heads");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("patch_size", "must divide image_size");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.image_layers == 0 || self.text_layers == 0 {
            return bad("image_layers", "encoders need at least one layer");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive");
        }
        if self.vocab <= tokens::HARD_PREFIX[3] {
            return bad("vocab", "must hold class, quality and prefix tokens");
        }
        if self.context_length == 0 {
            return bad("context_length", "must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        if self.finetune_image_blocks > self.image_layers {
            return bad("finetune_image_blocks", "exceeds image_layers");
        }
        if self.finetune_text_blocks > self.text_layers {
            return bad("finetune_text_blocks", "exceeds text_layers");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Text positions: soft prompts use `M + 1`, hard prompts 5.
    pub fn text_positions(&self) -> usize {
        (self.context_length + 1).max(tokens::HARD_PREFIX.len() + 1)
    }
}
