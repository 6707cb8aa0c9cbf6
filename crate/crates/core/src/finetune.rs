//! Few-shot fine-tuning with gradient regularization against a frozen
//! semantic reference.
//!
//! Each step computes the quality gradient `G_qua` and the gradient
//! `G_sem` of the divergence from the frozen model's class distribution. When
//! the two point the same way, `G_qua` loses `lambda` times its component
//! along `G_sem` before it reaches the optimizer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, Tensor};
use crate::image::Image;
use crate::losses::{quality_loss_graph, rescale_mos, semantic_kl_graph, LossError};
use crate::metrics::{plcc, srcc, MetricError};
use crate::model::{
    encode_images, quality_distribution_from_features, semantic_distribution_from_features,
    DualEncoder, ModelError,
};
use crate::optim::{cosine_lr, Adam};
use crate::params::{GradientVector, ParamError};
use crate::seed;
use crate::synth::{Dataset, Split};

/// Below this norm a gradient has no usable direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Attempts at drawing a label sample with more than one distinct value.
pub const MAX_SAMPLE_ATTEMPTS: u64 = 10;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QgrError {
    #[error("gradient layouts differ")]
    Layout,
    #[error("lambda {0} must be finite and >= 0")]
    Lambda(f64),
    #[error("gradient norm below {DEGENERATE_NORM}")]
    DegenerateNorm,
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("invalid fine-tuning config: {0}")]
    Config(String),
    #[error("asked for {need} labels from a pool of {have}")]
    PoolTooSmall { need: usize, have: usize },
    #[error("split {split}: every label sample was constant after {attempts} attempts")]
    DegenerateLabels { split: usize, attempts: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Which rule produced the regulated gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `dot <= 0`: returned unchanged.
    Conflict,
    /// `dot > 0`: aligned component scaled out.
    Projected,
    /// `dot > 0` but `G_sem` is numerically zero: returned unchanged.
    Degenerate,
    /// Regularization switched off.
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regulated {
    pub gradient: GradientVector,
    pub branch: Branch,
    pub dot: f64,
}

fn check_pair(g_qua: &GradientVector, g_sem: &GradientVector) -> Result<(), QgrError> {
    if !g_qua.same_layout(g_sem) {
        return Err(QgrError::Layout);
    }
    Ok(())
}

fn regulate_values(qua: &[f64], sem: &[f64], lambda: f64) -> (Vec<f64>, Branch, f64) {
    let dot: f64 = qua.iter().zip(sem).map(|(a, b)| a * b).sum();
    if dot <= 0.0 {
        return (qua.to_vec(), Branch::Conflict, dot);
    }
    let sem_sq: f64 = sem.iter().map(|v| v * v).sum();
    if sem_sq.sqrt() < DEGENERATE_NORM {
        log::warn!("semantic gradient norm {:e} is degenerate; quality gradient kept", sem_sq.sqrt());
        return (qua.to_vec(), Branch::Degenerate, dot);
    }
    let c = lambda * dot / sem_sq;
    let out = qua.iter().zip(sem).map(|(q, s)| q - c * s).collect();
    (out, Branch::Projected, dot)
}

/// Global rule over the whole flat vector.
pub fn regulate(
    g_qua: &GradientVector,
    g_sem: &GradientVector,
    lambda: f64,
) -> Result<Regulated, QgrError> {
    check_pair(g_qua, g_sem)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(QgrError::Lambda(lambda));
    }
    if !g_qua.is_finite() || !g_sem.is_finite() {
        return Err(QgrError::NonFinite {
            what: "gradient",
            step: 0,
        });
    }
    let (values, branch, dot) = regulate_values(g_qua.values(), g_sem.values(), lambda);
    Ok(Regulated {
        gradient: g_qua.with_values(values)?,
        branch,
        dot,
    })
}

/// The same rule applied to each tensor's slice separately. The reported
/// branch and dot are those of the global pair.
pub fn regulate_per_tensor(
    g_qua: &GradientVector,
    g_sem: &GradientVector,
    lambda: f64,
) -> Result<Regulated, QgrError> {
    let global = regulate(g_qua, g_sem, lambda)?;
    let mut values = Vec::with_capacity(g_qua.len());
    for slot in g_qua.layout() {
        let r = slot.offset..slot.offset + slot.len();
        let (part, _, _) =
            regulate_values(&g_qua.values()[r.clone()], &g_sem.values()[r], lambda);
        values.extend(part);
    }
    Ok(Regulated {
        gradient: g_qua.with_values(values)?,
        ..global
    })
}

/// Angle in degrees, in `[0, 180]`.
pub fn gradient_angle(a: &GradientVector, b: &GradientVector) -> Result<f64, QgrError> {
    check_pair(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Err(QgrError::DegenerateNorm);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub labels: usize,
    pub splits: usize,
    /// Apply the rule per tensor instead of over the global vector.
    pub per_tensor: bool,
    /// When false, `G_sem` is still measured but never applied.
    pub qgr: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            lr: 5e-6,
            epochs: 9,
            batch_size: 16,
            weight_decay: 0.01,
            labels: 50,
            splits: 10,
            per_tensor: false,
            qgr: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), QgrError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(QgrError::Lambda(self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(QgrError::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(QgrError::Config("batch_size must be positive".into()));
        }
        if self.labels < 2 {
            return Err(QgrError::Config("labels must be at least 2".into()));
        }
        if self.splits == 0 {
            return Err(QgrError::Config("splits must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(QgrError::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Both losses and both gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub g_qua: GradientVector,
    pub g_sem: GradientVector,
}

fn flatten_grads(
    grads: &Gradients,
    bound: &BTreeMap<String, Tensor>,
    trainable: &[String],
) -> Result<GradientVector, ParamError> {
    let mut by_name = BTreeMap::new();
    for name in trainable {
        let leaf = bound.get(name).ok_or_else(|| ParamError::Unknown(name.clone()))?;
        let g = grads
            .get(leaf)
            .cloned()
            .ok_or_else(|| ParamError::Unknown(name.clone()))?;
        by_name.insert(name.clone(), g);
    }
    GradientVector::from_tensors(trainable, &by_name)
}

/// One shared forward pass, two backward sweeps.
pub fn step_gradients(
    model: &DualEncoder,
    trainable: &[String],
    images: &[&Image],
    labels: &[f64],
    p_sem: &[Vec<f64>],
) -> Result<StepGradients, QgrError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, trainable);
    let f = encode_images(&mut g, &p, &model.config, images, None)?;
    let q = quality_distribution_from_features(&mut g, &p, &model.config, &f)?;
    let s = semantic_distribution_from_features(&mut g, &p, &model.config, &f)?;
    let loss_ce = quality_loss_graph(&mut g, &q, labels)?;
    let loss_kl = semantic_kl_graph(&mut g, &s, p_sem)?;
    let g_ce = g.backward(&loss_ce).map_err(ModelError::from)?;
    let g_kl = g.backward(&loss_kl).map_err(ModelError::from)?;
    Ok(StepGradients {
        loss_ce: loss_ce.item(),
        loss_kl: loss_kl.item(),
        g_qua: flatten_grads(&g_ce, &p, trainable)?,
        g_sem: flatten_grads(&g_kl, &p, trainable)?,
    })
}

/// Gradient of the mean divergence between `v_sem`'s class distribution
/// (held constant) and `v_qua`'s, over `trainable`.
pub fn semantic_gradient(
    v_sem: &DualEncoder,
    v_qua: &DualEncoder,
    trainable: &[String],
    images: &[&Image],
) -> Result<(f64, GradientVector), QgrError> {
    let p_sem = v_sem.semantic_distributions(images)?;
    let mut g = Graph::new();
    let p = v_qua.bind(&mut g, trainable);
    let f = encode_images(&mut g, &p, &v_qua.config, images, None)?;
    let s = semantic_distribution_from_features(&mut g, &p, &v_qua.config, &f)?;
    let loss = semantic_kl_graph(&mut g, &s, &p_sem)?;
    let grads = g.backward(&loss).map_err(ModelError::from)?;
    Ok((loss.item(), flatten_grads(&grads, &p, trainable)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Telemetry {
    pub step: usize,
    pub loss_ce: f64,
    pub loss_kl: f64,
    /// `None` while `G_sem` is numerically zero.
    pub angle_deg: Option<f64>,
    pub dot_sign: i8,
    pub norm_qua: f64,
    pub norm_sem: f64,
    pub lambda: f64,
    pub branch: Branch,
}

/// Tunable model plus optimizer state.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub model: DualEncoder,
    pub trainable: Vec<String>,
    pub optimizer: Adam,
    pub step: usize,
}

impl FinetuneState {
    pub fn new(model: DualEncoder, weight_decay: f64) -> Self {
        let trainable = model.finetune_trainable();
        Self {
            model,
            trainable,
            optimizer: Adam::adamw(weight_decay),
            step: 0,
        }
    }
}

/// Applies one regulated update and reports what happened. Returns the
/// telemetry and the gradients it was computed from.
pub fn finetune_step(
    state: &mut FinetuneState,
    images: &[&Image],
    labels: &[f64],
    p_sem: &[Vec<f64>],
    config: &FinetuneConfig,
    lr: f64,
) -> Result<(Telemetry, StepGradients, Regulated), QgrError> {
    let step = state.step;
    let grads = step_gradients(&state.model, &state.trainable, images, labels, p_sem)?;
    let bad = |what| QgrError::NonFinite { what, step };
    if !grads.loss_ce.is_finite() || !grads.loss_kl.is_finite() {
        return Err(bad("loss"));
    }
    if !grads.g_qua.is_finite() {
        return Err(bad("quality gradient"));
    }
    if !grads.g_sem.is_finite() {
        return Err(bad("semantic gradient"));
    }
    let regulated = if !config.qgr {
        let dot = grads.g_qua.dot(&grads.g_sem);
        Regulated {
            gradient: grads.g_qua.clone(),
            branch: Branch::Disabled,
            dot,
        }
    } else if config.per_tensor {
        regulate_per_tensor(&grads.g_qua, &grads.g_sem, config.lambda)?
    } else {
        regulate(&grads.g_qua, &grads.g_sem, config.lambda)?
    };
    let params = state
        .optimizer
        .step(&state.model.params, &regulated.gradient, lr)?;
    if params.iter().any(|(_, t)| !t.is_finite()) {
        return Err(bad("parameter"));
    }
    state.model.params = params;
    state.step += 1;
    let telemetry = Telemetry {
        step,
        loss_ce: grads.loss_ce,
        loss_kl: grads.loss_kl,
        angle_deg: gradient_angle(&grads.g_qua, &grads.g_sem).ok(),
        dot_sign: if regulated.dot > 0.0 {
            1
        } else if regulated.dot < 0.0 {
            -1
        } else {
            0
        },
        norm_qua: grads.g_qua.norm(),
        norm_sem: grads.g_sem.norm(),
        lambda: config.lambda,
        branch: regulated.branch,
    };
    Ok((telemetry, grads, regulated))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
}

/// Predicted high-quality probability for each index.
pub fn predict(model: &DualEncoder, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>, QgrError> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| dataset.image(i)).collect();
        out.extend(model.quality_scores(&imgs)?);
    }
    Ok(out)
}

/// Correlation of predictions with the proxy labels on `indices`.
pub fn evaluate(model: &DualEncoder, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation, QgrError> {
    let pred = predict(model, dataset, indices)?;
    let target: Vec<f64> = indices.iter().map(|&i| dataset.record(i).y).collect();
    Ok(Evaluation {
        srcc: srcc(&pred, &target)?,
        plcc: plcc(&pred, &target)?,
        n: indices.len(),
    })
}

/// Zero-shot correlation on the evaluation test pool.
pub fn evaluate_zero_shot(model: &DualEncoder, dataset: &Dataset) -> Result<Evaluation, QgrError> {
    evaluate(model, dataset, &dataset.indices(Split::Test))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitResult {
    pub split: usize,
    pub attempts: u64,
    pub srcc: f64,
    pub plcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotResult {
    pub lambda: f64,
    pub labels: usize,
    pub splits: Vec<SplitResult>,
    pub median_srcc: f64,
    pub median_plcc: f64,
    #[serde(skip)]
    pub telemetry: Vec<Vec<Telemetry>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Draws `n` indices from `pool` whose labels are not all equal.
fn draw_sample(
    dataset: &Dataset,
    pool: &[usize],
    n: usize,
    seed: u64,
    split: usize,
) -> Result<(Vec<usize>, Vec<f64>, u64), QgrError> {
    for attempt in 0..MAX_SAMPLE_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5a3e, split as u64, attempt]));
        let mut ids: Vec<usize> = pool.choose_multiple(&mut rng, n).copied().collect();
        ids.sort_unstable();
        let raw: Vec<f64> = ids.iter().map(|&i| dataset.record(i).y).collect();
        match rescale_mos(&raw) {
            Ok(labels) => return Ok((ids, labels, attempt + 1)),
            Err(LossError::DegenerateLabels) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(QgrError::DegenerateLabels {
        split,
        attempts: MAX_SAMPLE_ATTEMPTS,
    })
}

/// Fine-tunes a fresh copy of `init` on `labels` samples, returning the
/// tuned model and per-step telemetry.
pub fn finetune_on(
    init: &DualEncoder,
    dataset: &Dataset,
    ids: &[usize],
    labels: &[f64],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(DualEncoder, Vec<Telemetry>), QgrError> {
    let v_sem = init.frozen_copy();
    let imgs: Vec<&Image> = ids.iter().map(|&i| dataset.image(i)).collect();
    let p_sem = if config.epochs > 0 {
        v_sem.semantic_distributions(&imgs)?
    } else {
        Vec::new()
    };
    let mut state = FinetuneState::new(init.clone(), config.weight_decay);
    let mut telemetry = Vec::new();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.lr, epoch, config.epochs);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0xe90c, epoch as u64])));
        for batch in order.chunks(config.batch_size) {
            let b_imgs: Vec<&Image> = batch.iter().map(|&k| imgs[k]).collect();
            let b_labels: Vec<f64> = batch.iter().map(|&k| labels[k]).collect();
            let b_sem: Vec<Vec<f64>> = batch.iter().map(|&k| p_sem[k].clone()).collect();
            let (t, _, _) = finetune_step(&mut state, &b_imgs, &b_labels, &b_sem, config, lr)?;
            telemetry.push(t);
        }
    }
    Ok((state.model, telemetry))
}

fn check_pool(dataset: &Dataset, config: &FinetuneConfig) -> Result<Vec<usize>, QgrError> {
    config.validate()?;
    let pool = dataset.indices(Split::TrainPool);
    if config.labels > pool.len() {
        return Err(QgrError::PoolTooSmall {
            need: config.labels,
            have: pool.len(),
        });
    }
    Ok(pool)
}

fn split_seed(seed: u64, split: usize) -> u64 {
    seed::derive(seed, &[0x7e11, split as u64])
}

/// Repeats sample, fine-tune and evaluate over `config.splits` label draws
/// from the train pool; evaluation always uses the fixed test pool.
pub fn run_few_shot(
    dataset: &Dataset,
    init: &DualEncoder,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FewShotResult, QgrError> {
    let pool = check_pool(dataset, config)?;
    let test = dataset.indices(Split::Test);
    let mut splits = Vec::with_capacity(config.splits);
    let mut telemetry = Vec::with_capacity(config.splits);
    for split in 0..config.splits {
        let (ids, labels, attempts) = draw_sample(dataset, &pool, config.labels, seed, split)?;
        let (model, trace) = finetune_on(init, dataset, &ids, &labels, config, split_seed(seed, split))?;
        let eval = evaluate(&model, dataset, &test)?;
        log::info!(
            "split {split}: srcc {:.4} plcc {:.4} ({} steps)",
            eval.srcc,
            eval.plcc,
            trace.len()
        );
        splits.push(SplitResult {
            split,
            attempts,
            srcc: eval.srcc,
            plcc: eval.plcc,
        });
        telemetry.push(trace);
    }
    let s: Vec<f64> = splits.iter().map(|r| r.srcc).collect();
    let p: Vec<f64> = splits.iter().map(|r| r.plcc).collect();
    Ok(FewShotResult {
        lambda: config.lambda,
        labels: config.labels,
        median_srcc: median(&s),
        median_plcc: median(&p),
        splits,
        telemetry,
    })
}

/// Telemetry of the run `run_few_shot` would perform for `split`.
pub fn trace_split(
    dataset: &Dataset,
    init: &DualEncoder,
    config: &FinetuneConfig,
    seed: u64,
    split: usize,
) -> Result<Vec<Telemetry>, QgrError> {
    let pool = check_pool(dataset, config)?;
    let (ids, labels, _) = draw_sample(dataset, &pool, config.labels, seed, split)?;
    Ok(finetune_on(init, dataset, &ids, &labels, config, split_seed(seed, split))?.1)
}

/// Angle statistics over the steps of one or more runs, skipping each
/// run's first `skip` steps and any step without a defined angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngleSummary {
    pub count: usize,
    pub mean_angle: f64,
    /// Mean of `|angle - 90|`.
    pub mean_abs_deviation: f64,
}

impl AngleSummary {
    pub fn from_trace(trace: &[Telemetry], skip: usize) -> Option<Self> {
        Self::from_runs(std::slice::from_ref(&trace.to_vec()), skip)
    }

    pub fn from_runs(runs: &[Vec<Telemetry>], skip: usize) -> Option<Self> {
        let angles: Vec<f64> = runs
            .iter()
            .flat_map(|r| r.iter().filter(|t| t.step >= skip).filter_map(|t| t.angle_deg))
            .collect();
        if angles.is_empty() {
            return None;
        }
        let n = angles.len() as f64;
        Some(Self {
            count: angles.len(),
            mean_angle: angles.iter().sum::<f64>() / n,
            mean_abs_deviation: angles.iter().map(|a| (a - 90.0).abs()).sum::<f64>() / n,
        })
    }
}
