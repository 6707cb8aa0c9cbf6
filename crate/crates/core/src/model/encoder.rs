//! Graph builders for the image and text towers.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Tensor};
use crate::image::Image;

use super::config::{tokens, ModelConfig};
use super::names;
use super::ModelError;

/// Parameters registered in one graph, keyed by name.
pub type Bound = BTreeMap<String, Tensor>;

/// Sequence lengths seen by one image layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerTrace {
    pub input_len: usize,
    pub output_len: usize,
    pub forwarded_len: usize,
}

/// A text encoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextPrompt {
    /// Learned context vectors followed by one quality token.
    Soft { quality_token: usize },
    /// Fixed prefix tokens followed by one class token.
    Hard { class_token: usize },
    /// Raw token indices, embedded from the token table.
    Tokens(Vec<usize>),
}

impl TextPrompt {
    pub fn high_quality() -> Self {
        Self::Soft {
            quality_token: tokens::HIGH_QUALITY,
        }
    }

    pub fn low_quality() -> Self {
        Self::Soft {
            quality_token: tokens::LOW_QUALITY,
        }
    }

    pub fn class(class_token: usize) -> Self {
        Self::Hard { class_token }
    }

    pub fn len(&self, cfg: &ModelConfig) -> usize {
        match self {
            Self::Soft { .. } => cfg.context_length + 1,
            Self::Hard { .. } => tokens::HARD_PREFIX.len() + 1,
            Self::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self, cfg: &ModelConfig) -> bool {
        self.len(cfg) == 0
    }
}

fn param<'a>(p: &'a Bound, name: &str) -> Result<&'a Tensor, ModelError> {
    p.get(name)
        .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
}

/// Pixels to `[N, patch_dim]` rows, centred and scaled.
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Result<Vec<f64>, ModelError> {
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != expected || image.data.len() != expected.iter().product::<usize>() {
        return Err(ModelError::ImageShape {
            expected,
            actual: image.shape(),
        });
    }
    let ps = cfg.patch_size;
    let side = cfg.image_size / ps;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for y in 0..ps {
                for x in 0..ps {
                    for c in 0..cfg.channels {
                        let v = image.get(py * ps + y, px * ps + x, c);
                        out.push((v - 0.5) / 0.25);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn affine_norm(
    g: &mut Graph,
    p: &Bound,
    x: &Tensor,
    gain: &str,
    bias: &str,
) -> Result<Tensor, ModelError> {
    let n = g.layer_norm(x)?;
    let n = g.mul(&n, param(p, gain)?)?;
    Ok(g.add(&n, param(p, bias)?)?)
}

fn linear(
    g: &mut Graph,
    p: &Bound,
    x: &Tensor,
    weight: &str,
    bias: &str,
) -> Result<Tensor, ModelError> {
    let y = g.matmul(x, param(p, weight)?)?;
    Ok(g.add(&y, param(p, bias)?)?)
}

/// Pre-norm transformer block over `groups` independent sequences of
/// `seq_len` rows each, stacked as `[groups * seq_len, d]`.
pub fn transformer_block(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    x: &Tensor,
    groups: usize,
    seq_len: usize,
) -> Result<Tensor, ModelError> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let h = affine_norm(g, p, x, &format!("{prefix}.ln1_g"), &format!("{prefix}.ln1_b"))?;
    let qkv = linear(g, p, &h, &format!("{prefix}.attn.qkv_w"), &format!("{prefix}.attn.qkv_b"))?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut per_group = Vec::with_capacity(groups);
    for b in 0..groups {
        let rows = g.slice_rows(&qkv, b * seq_len, (b + 1) * seq_len)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = g.slice_cols(&rows, head * dh, (head + 1) * dh)?;
            let k = g.slice_cols(&rows, d + head * dh, d + (head + 1) * dh)?;
            let v = g.slice_cols(&rows, 2 * d + head * dh, 2 * d + (head + 1) * dh)?;
            let kt = g.transpose(&k)?;
            let scores = g.matmul(&q, &kt)?;
            let scores = g.scale(&scores, scale)?;
            let weights = g.softmax(&scores)?;
            heads.push(g.matmul(&weights, &v)?);
        }
        per_group.push(g.concat_cols(&heads)?);
    }
    let attn = if per_group.len() == 1 {
        per_group.pop().expect("one group")
    } else {
        g.concat_rows(&per_group)?
    };
    let attn = linear(g, p, &attn, &format!("{prefix}.attn.out_w"), &format!("{prefix}.attn.out_b"))?;
    let x = g.add(x, &attn)?;

    let h = affine_norm(g, p, &x, &format!("{prefix}.ln2_g"), &format!("{prefix}.ln2_b"))?;
    let h = linear(g, p, &h, &format!("{prefix}.mlp.fc1_w"), &format!("{prefix}.mlp.fc1_b"))?;
    let h = g.gelu_tanh(&h)?;
    let h = linear(g, p, &h, &format!("{prefix}.mlp.fc2_w"), &format!("{prefix}.mlp.fc2_b"))?;
    Ok(g.add(&x, &h)?)
}

/// Image features `[B, d]`, unit norm per row.
///
/// Each layer sees `[CLS, P^l, patches]`; the prompt row of the block output
/// is dropped before the next layer inserts its own prompt token.
pub fn encode_images(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    images: &[&Image],
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Tensor, ModelError> {
    if images.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = cfg.num_patches();
    let b = images.len();
    let mut pixels = Vec::with_capacity(b * n * cfg.patch_dim());
    for img in images {
        pixels.extend(patchify(img, cfg)?);
    }
    let pixels = Tensor::new(vec![b * n, cfg.patch_dim()], pixels)?;
    let patches = linear(g, p, &pixels, names::IMAGE_PATCH_W, names::IMAGE_PATCH_B)?;
    let pos = param(p, names::IMAGE_POS)?;
    let pos_cls = g.slice_rows(pos, 0, 1)?;
    let pos_patch = g.slice_rows(pos, 1, n + 1)?;
    let pos_all = if b == 1 {
        pos_patch
    } else {
        g.concat_rows(&vec![pos_patch; b])?
    };
    let patches = g.add(&patches, &pos_all)?;
    let cls = g.add(param(p, names::IMAGE_CLS)?, &pos_cls)?;

    let mut cls_rows = vec![cls; b];
    let mut patch_rows = Vec::with_capacity(b);
    for i in 0..b {
        patch_rows.push(if b == 1 {
            patches.clone()
        } else {
            g.slice_rows(&patches, i * n, (i + 1) * n)?
        });
    }

    let seq = n + 2;
    for layer in 0..cfg.image_layers {
        let prompt = param(p, &names::visual_prompt(layer))?.clone();
        let mut parts = Vec::with_capacity(3 * b);
        for i in 0..b {
            parts.push(cls_rows[i].clone());
            parts.push(prompt.clone());
            parts.push(patch_rows[i].clone());
        }
        let x = g.concat_rows(&parts)?;
        let y = transformer_block(g, p, cfg, &names::image_block(layer), &x, b, seq)?;
        for i in 0..b {
            cls_rows[i] = g.slice_rows(&y, i * seq, i * seq + 1)?;
            patch_rows[i] = g.slice_rows(&y, i * seq + 2, (i + 1) * seq)?;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(LayerTrace {
                input_len: x.rows() / b,
                output_len: y.rows() / b,
                forwarded_len: cls_rows[0].rows() + patch_rows[0].rows(),
            });
        }
    }

    let cls = if b == 1 {
        cls_rows.pop().expect("one image")
    } else {
        g.concat_rows(&cls_rows)?
    };
    let cls = affine_norm(g, p, &cls, names::IMAGE_LN_POST_G, names::IMAGE_LN_POST_B)?;
    let proj = g.matmul(&cls, param(p, names::IMAGE_PROJ)?)?;
    Ok(g.l2_normalize(&proj)?)
}

fn embed_prompt(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    prompt: &TextPrompt,
) -> Result<Tensor, ModelError> {
    let table = param(p, names::TEXT_TOKEN_EMBEDDING)?;
    let token = |g: &mut Graph, idx: usize| -> Result<Tensor, ModelError> {
        if idx >= cfg.vocab {
            return Err(ModelError::Token { index: idx, vocab: cfg.vocab });
        }
        Ok(g.slice_rows(table, idx, idx + 1)?)
    };
    let rows = match prompt {
        TextPrompt::Soft { quality_token } => {
            let ctx = param(p, names::TEXT_CONTEXT)?.clone();
            let q = token(g, *quality_token)?;
            g.concat_rows(&[ctx, q])?
        }
        TextPrompt::Hard { class_token } => {
            let first = tokens::HARD_PREFIX[0];
            let prefix = g.slice_rows(table, first, first + tokens::HARD_PREFIX.len())?;
            let c = token(g, *class_token)?;
            g.concat_rows(&[prefix, c])?
        }
        TextPrompt::Tokens(indices) => {
            let parts = indices
                .iter()
                .map(|&i| token(g, i))
                .collect::<Result<Vec<_>, _>>()?;
            g.concat_rows(&parts)?
        }
    };
    Ok(rows)
}

/// Text features `[S, d]` for prompts of equal length, unit norm per row.
pub fn encode_texts(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    prompts: &[TextPrompt],
) -> Result<Tensor, ModelError> {
    let first = prompts.first().ok_or(ModelError::EmptyBatch)?;
    let len = first.len(cfg);
    if len == 0 {
        return Err(ModelError::EmptySequence);
    }
    if prompts.iter().any(|q| q.len(cfg) != len) {
        return Err(ModelError::MixedPromptLengths);
    }
    if len > cfg.text_positions() {
        return Err(ModelError::SequenceTooLong {
            len,
            max: cfg.text_positions(),
        });
    }
    let pos = g.slice_rows(param(p, names::TEXT_POS)?, 0, len)?;
    let mut seqs = Vec::with_capacity(prompts.len());
    for q in prompts {
        let e = embed_prompt(g, p, cfg, q)?;
        seqs.push(g.add(&e, &pos)?);
    }
    let s = prompts.len();
    let mut x = g.concat_rows(&seqs)?;
    for layer in 0..cfg.text_layers {
        x = transformer_block(g, p, cfg, &names::text_block(layer), &x, s, len)?;
    }
    let x = affine_norm(g, p, &x, names::TEXT_LN_FINAL_G, names::TEXT_LN_FINAL_B)?;
    // mean pool each sequence with a fixed averaging matrix
    let mut pool = vec![0.0; s * s * len];
    for i in 0..s {
        for j in 0..len {
            pool[i * s * len + i * len + j] = 1.0 / len as f64;
        }
    }
    let pool = Tensor::new(vec![s, s * len], pool)?;
    let pooled = g.matmul(&pool, &x)?;
    let proj = g.matmul(&pooled, param(p, names::TEXT_PROJ)?)?;
    Ok(g.l2_normalize(&proj)?)
}

/// `1 / tau` as a graph scalar, from the stored log-temperature.
pub fn inverse_temperature(g: &mut Graph, p: &Bound) -> Result<Tensor, ModelError> {
    let neg = g.scale(param(p, names::LOG_TEMPERATURE)?, -1.0)?;
    Ok(g.exp(&neg)?)
}

/// Row-wise softmax over cosine similarities divided by tau: `[B, K]`.
pub fn similarity_distribution(
    g: &mut Graph,
    p: &Bound,
    image_features: &Tensor,
    text_features: &Tensor,
) -> Result<Tensor, ModelError> {
    let sims = g.cosine_similarity(image_features, text_features)?;
    let inv_tau = inverse_temperature(g, p)?;
    let logits = g.mul(&sims, &inv_tau)?;
    Ok(g.softmax(&logits)?)
}
