//! Compact CLIP-shaped dual encoder with deep visual prompts and learned
//! text context.

mod config;
mod encoder;

pub use config::{tokens, ModelConfig};
pub use encoder::{
    encode_images, encode_texts, inverse_temperature, patchify, similarity_distribution,
    transformer_block, Bound, LayerTrace, TextPrompt,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::image::Image;
use crate::params::{ParamError, ParamGroup, ParameterStore};

/// Canonical parameter names.
pub mod names {
    pub use crate::params::LOG_TEMPERATURE;

    pub const IMAGE_PATCH_W: &str = "image.patch_w";
    pub const IMAGE_PATCH_B: &str = "image.patch_b";
    pub const IMAGE_CLS: &str = "image.cls";
    pub const IMAGE_POS: &str = "image.pos";
    pub const IMAGE_LN_POST_G: &str = "image.ln_post_g";
    pub const IMAGE_LN_POST_B: &str = "image.ln_post_b";
    pub const IMAGE_PROJ: &str = "image.proj";
    pub const TEXT_TOKEN_EMBEDDING: &str = "text.token_embedding";
    pub const TEXT_POS: &str = "text.pos";
    pub const TEXT_LN_FINAL_G: &str = "text.ln_final_g";
    pub const TEXT_LN_FINAL_B: &str = "text.ln_final_b";
    pub const TEXT_PROJ: &str = "text.proj";
    pub const TEXT_CONTEXT: &str = "prompt.text.context";

    pub fn image_block(layer: usize) -> String {
        format!("image.blocks.{layer}")
    }

    pub fn text_block(layer: usize) -> String {
        format!("text.blocks.{layer}")
    }

    pub fn visual_prompt(layer: usize) -> String {
        format!("prompt.visual.{layer}")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid model config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("image shape {actual:?} does not match expected {expected:?}")]
    ImageShape {
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("token {index} outside vocabulary of {vocab}")]
    Token { index: usize, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("prompts in one batch must have equal length")]
    MixedPromptLengths,
    #[error("sequence of {len} tokens exceeds {max} positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

/// Whether a model is the frozen semantic reference or the tunable copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    SemanticFrozen,
    QualityTunable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub role: ModelRole,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParameterStore,
}

impl Init<'_> {
    fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data).expect("valid shape"));
    }

    fn fill(&mut self, name: impl Into<String>, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::filled(shape, value));
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig) {
        let d = cfg.embed_dim;
        let m = cfg.mlp_dim();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        self.fill(format!("{prefix}.ln1_g"), &[d], 1.0);
        self.fill(format!("{prefix}.ln1_b"), &[d], 0.0);
        self.normal(format!("{prefix}.attn.qkv_w"), &[d, 3 * d], fan(d));
        self.fill(format!("{prefix}.attn.qkv_b"), &[3 * d], 0.0);
        self.normal(format!("{prefix}.attn.out_w"), &[d, d], fan(d));
        self.fill(format!("{prefix}.attn.out_b"), &[d], 0.0);
        self.fill(format!("{prefix}.ln2_g"), &[d], 1.0);
        self.fill(format!("{prefix}.ln2_b"), &[d], 0.0);
        self.normal(format!("{prefix}.mlp.fc1_w"), &[d, m], fan(d));
        self.fill(format!("{prefix}.mlp.fc1_b"), &[m], 0.0);
        self.normal(format!("{prefix}.mlp.fc2_w"), &[m, d], fan(m));
        self.fill(format!("{prefix}.mlp.fc2_b"), &[d], 0.0);
    }
}

/// Standard deviation of freshly initialized prompt vectors.
pub const PROMPT_INIT_STD: f64 = 0.02;

impl DualEncoder {
    /// Encoder weights come from `config.init_seed`; prompt tokens from
    /// `prompt_seed`.
    pub fn init(config: &ModelConfig, prompt_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let d = config.embed_dim;
        {
            let mut w = Init {
                rng: ChaCha8Rng::seed_from_u64(config.init_seed),
                store: &mut params,
            };
            w.normal(names::IMAGE_PATCH_W, &[config.patch_dim(), d], 1.0 / (config.patch_dim() as f64).sqrt());
            w.fill(names::IMAGE_PATCH_B, &[d], 0.0);
            w.normal(names::IMAGE_CLS, &[1, d], 0.02);
            w.normal(names::IMAGE_POS, &[config.num_patches() + 1, d], 0.02);
            for l in 0..config.image_layers {
                w.block(&names::image_block(l), config);
            }
            w.fill(names::IMAGE_LN_POST_G, &[d], 1.0);
            w.fill(names::IMAGE_LN_POST_B, &[d], 0.0);
            w.normal(names::IMAGE_PROJ, &[d, d], 1.0 / (d as f64).sqrt());
            w.normal(names::TEXT_TOKEN_EMBEDDING, &[config.vocab, d], 0.02);
            w.normal(names::TEXT_POS, &[config.text_positions(), d], 0.01);
            for l in 0..config.text_layers {
                w.block(&names::text_block(l), config);
            }
            w.fill(names::TEXT_LN_FINAL_G, &[d], 1.0);
            w.fill(names::TEXT_LN_FINAL_B, &[d], 0.0);
            w.normal(names::TEXT_PROJ, &[d, d], 1.0 / (d as f64).sqrt());
            w.fill(names::LOG_TEMPERATURE, &[1], config.temperature.ln());
        }
        {
            let mut w = Init {
                rng: ChaCha8Rng::seed_from_u64(prompt_seed),
                store: &mut params,
            };
            w.normal(names::TEXT_CONTEXT, &[config.context_length, d], PROMPT_INIT_STD);
            for l in 0..config.image_layers {
                w.normal(names::visual_prompt(l), &[1, d], PROMPT_INIT_STD);
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            role: ModelRole::QualityTunable,
        })
    }

    /// Frozen semantic reference sharing this model's current values.
    pub fn frozen_copy(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            role: ModelRole::SemanticFrozen,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.params
            .get(names::LOG_TEMPERATURE)
            .map(|t| t.item().exp())
            .unwrap_or(self.config.temperature)
    }

    /// Prompt tokens and temperature: what meta pre-training optimizes.
    pub fn meta_trainable(&self) -> Vec<String> {
        self.params.names_in(&[
            ParamGroup::TextPrompt,
            ParamGroup::VisualPrompt,
            ParamGroup::Temperature,
        ])
    }

    /// Prompts, the trailing encoder blocks and both projections.
    pub fn finetune_trainable(&self) -> Vec<String> {
        let cfg = &self.config;
        let image_blocks: Vec<String> = (cfg.image_layers - cfg.finetune_image_blocks
            ..cfg.image_layers)
            .map(|l| format!("{}.", names::image_block(l)))
            .collect();
        let text_blocks: Vec<String> = (cfg.text_layers - cfg.finetune_text_blocks
            ..cfg.text_layers)
            .map(|l| format!("{}.", names::text_block(l)))
            .collect();
        self.params
            .names()
            .filter(|n| {
                matches!(
                    ParamGroup::of(n),
                    ParamGroup::TextPrompt | ParamGroup::VisualPrompt
                ) || n.as_str() == names::IMAGE_PROJ
                    || n.as_str() == names::TEXT_PROJ
                    || image_blocks.iter().any(|p| n.starts_with(p.as_str()))
                    || text_blocks.iter().any(|p| n.starts_with(p.as_str()))
            })
            .cloned()
            .collect()
    }

    /// Registers every parameter in `graph`; names in `trainable` as
    /// gradient-carrying leaves, the rest as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: &[String]) -> Bound {
        let mut bound = Bound::new();
        for (name, t) in self.params.iter() {
            let leaf = if self.role == ModelRole::QualityTunable
                && trainable.contains(name)
            {
                graph.param(t)
            } else {
                graph.constant(t)
            };
            bound.insert(name.clone(), leaf);
        }
        bound
    }

    pub fn encode_image(&self, image: &Image) -> Result<Vec<f64>, ModelError> {
        Ok(self.encode_images(&[image])?.remove(0))
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, &[]);
        let f = encode_images(&mut g, &p, &self.config, images, None)?;
        Ok(rows(&f))
    }

    /// Features plus per-layer sequence lengths.
    pub fn encode_image_traced(
        &self,
        image: &Image,
    ) -> Result<(Vec<f64>, Vec<LayerTrace>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, &[]);
        let mut trace = Vec::new();
        let f = encode_images(&mut g, &p, &self.config, &[image], Some(&mut trace))?;
        Ok((f.to_vec(), trace))
    }

    pub fn encode_text(&self, prompt: &TextPrompt) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, &[]);
        let f = encode_texts(&mut g, &p, &self.config, std::slice::from_ref(prompt))?;
        Ok(f.to_vec())
    }

    /// Probability of "high quality" for each image.
    pub fn quality_scores(&self, images: &[&Image]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, &[]);
        let dist = quality_distribution(&mut g, &p, &self.config, images)?;
        Ok(dist.data().chunks(2).map(|r| r[0]).collect())
    }

    /// Zero-shot distribution over the nine content classes for each image.
    pub fn semantic_distributions(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, &[]);
        let dist = semantic_distribution(&mut g, &p, &self.config, images)?;
        Ok(rows(&dist))
    }

    pub fn semantic_distribution(&self, image: &Image) -> Result<Vec<f64>, ModelError> {
        Ok(self.semantic_distributions(&[image])?.remove(0))
    }

    /// Keeps encoder weights, takes every tensor present in `overlay`.
    pub fn with_overlay(&self, overlay: &ParameterStore) -> Result<Self, ModelError> {
        let mut out = self.clone();
        for (name, t) in overlay.iter() {
            out.params.replace(name, t.clone())?;
        }
        Ok(out)
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

/// `[B, 2]` softmax over (high, low) quality prompts.
pub fn quality_distribution(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    images: &[&Image],
) -> Result<Tensor, ModelError> {
    let f = encode_images(g, p, cfg, images, None)?;
    quality_distribution_from_features(g, p, cfg, &f)
}

pub fn quality_distribution_from_features(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image_features: &Tensor,
) -> Result<Tensor, ModelError> {
    let text = encode_texts(
        g,
        p,
        cfg,
        &[TextPrompt::high_quality(), TextPrompt::low_quality()],
    )?;
    similarity_distribution(g, p, image_features, &text)
}

/// `[B, 9]` softmax over the hard class prompts.
pub fn semantic_distribution(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    images: &[&Image],
) -> Result<Tensor, ModelError> {
    let f = encode_images(g, p, cfg, images, None)?;
    semantic_distribution_from_features(g, p, cfg, &f)
}

pub fn semantic_distribution_from_features(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image_features: &Tensor,
) -> Result<Tensor, ModelError> {
    let prompts: Vec<TextPrompt> = (0..tokens::CLASS_COUNT).map(TextPrompt::class).collect();
    let text = encode_texts(g, p, cfg, &prompts)?;
    similarity_distribution(g, p, image_features, &text)
}

/// Two-way softmax of cosine similarities over a temperature.
pub fn quality_probability(
    image_feature: &[f64],
    high: &[f64],
    low: &[f64],
    tau: f64,
) -> Result<f64, ModelError> {
    if !(tau > 0.0) {
        return Err(ModelError::Temperature(tau));
    }
    let s_high = cosine(high, image_feature) / tau;
    let s_low = cosine(low, image_feature) / tau;
    let m = s_high.max(s_low);
    let eh = (s_high - m).exp();
    let el = (s_low - m).exp();
    Ok(eh / (eh + el))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
    dot / (na * nb)
}

#[cfg(test)]
mod tests;
