//! Bi-level meta pre-training of the prompt tokens and temperature.
//!
//! Every distortion type in the meta-training split is one task. Each task
//! adapts a private copy of the parameters with one SGD step on its support
//! set and one on its query set (gradient taken at the adapted point). The
//! shared parameters then move toward the mean of the adapted copies, with
//! the difference treated as a pseudo-gradient for the meta optimizer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::image::Image;
use crate::losses::{quality_loss_graph, rescale_mos, LossError};
use crate::model::{quality_distribution, DualEncoder, ModelError};
use crate::optim::{sgd_step, Adam};
use crate::params::{GradientVector, ParamError, ParameterStore};
use crate::seed;
use crate::synth::{Dataset, DistortionType, Split};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetaError {
    #[error("invalid meta config: {0}")]
    Config(String),
    #[error("distortion type {kind} has {have} images, a task needs {need}")]
    TaskTooSmall {
        kind: &'static str,
        have: usize,
        need: usize,
    },
    #[error("meta-training split is empty")]
    NoTasks,
    #[error("non-finite {what} at epoch {epoch}, batch {batch}, task {task}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        task: usize,
    },
    #[error("meta update needs at least one task")]
    EmptyUpdate,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaOptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub epochs: usize,
    pub tasks_per_batch: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub optimizer: MetaOptimizerKind,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-4,
            meta_lr: 1e-2,
            epochs: 50,
            tasks_per_batch: 2,
            support_size: 8,
            query_size: 8,
            optimizer: MetaOptimizerKind::Adam,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, tasks: usize) -> Result<(), MetaError> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(MetaError::Config(format!("inner_lr {} must be >= 0", self.inner_lr)));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(MetaError::Config(format!("meta_lr {} must be > 0", self.meta_lr)));
        }
        if self.tasks_per_batch == 0 || self.tasks_per_batch > tasks {
            return Err(MetaError::Config(format!(
                "tasks_per_batch {} must lie in 1..={tasks}",
                self.tasks_per_batch
            )));
        }
        if self.support_size == 0 || self.query_size == 0 {
            return Err(MetaError::Config("support and query sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Dataset index and rescaled label.
pub type Sample = (usize, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub distortion_type: DistortionType,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

/// One task per distortion type in the meta-training split, with support
/// and query drawn for `epoch`. Labels are rescaled over each type's pool.
pub fn build_meta_tasks(
    dataset: &Dataset,
    config: &MetaConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<MetaTask>, MetaError> {
    let mut by_type: BTreeMap<DistortionType, Vec<usize>> = BTreeMap::new();
    for i in dataset.indices(Split::MetaTrain) {
        by_type.entry(dataset.record(i).distortion_type).or_default().push(i);
    }
    if by_type.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let need = config.support_size + config.query_size;
    let mut tasks = Vec::with_capacity(by_type.len());
    for (kind, mut pool) in by_type {
        if pool.len() < need {
            return Err(MetaError::TaskTooSmall {
                kind: kind.name(),
                have: pool.len(),
                need,
            });
        }
        let raw: Vec<f64> = pool.iter().map(|&i| dataset.record(i).y).collect();
        let scaled = rescale_mos(&raw)?;
        let label: BTreeMap<usize, f64> = pool.iter().copied().zip(scaled).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            seed,
            &[0x7a5c, epoch as u64, kind.id() as u64],
        ));
        pool.shuffle(&mut rng);
        let pick = |ids: &[usize]| ids.iter().map(|&i| (i, label[&i])).collect::<Vec<_>>();
        tasks.push(MetaTask {
            distortion_type: kind,
            support: pick(&pool[..config.support_size]),
            query: pick(&pool[config.support_size..need]),
        });
    }
    Ok(tasks)
}

/// Anything that can report a loss and its gradient over named parameters.
pub trait Objective {
    fn loss_and_grad(
        &self,
        params: &ParameterStore,
        trainable: &[String],
    ) -> Result<(f64, GradientVector), MetaError>;
}

/// Mean binary cross-entropy of the quality prompts over a labelled set.
pub struct QualityObjective<'a> {
    pub model: &'a DualEncoder,
    pub images: Vec<&'a Image>,
    pub labels: Vec<f64>,
}

impl<'a> QualityObjective<'a> {
    pub fn new(model: &'a DualEncoder, dataset: &'a Dataset, samples: &[Sample]) -> Self {
        Self {
            model,
            images: samples.iter().map(|&(i, _)| dataset.image(i)).collect(),
            labels: samples.iter().map(|&(_, y)| y).collect(),
        }
    }
}

impl Objective for QualityObjective<'_> {
    fn loss_and_grad(
        &self,
        params: &ParameterStore,
        trainable: &[String],
    ) -> Result<(f64, GradientVector), MetaError> {
        let model = DualEncoder {
            config: self.model.config.clone(),
            params: params.clone(),
            role: self.model.role,
        };
        let mut g = Graph::new();
        let p = model.bind(&mut g, trainable);
        let dist = quality_distribution(&mut g, &p, &model.config, &self.images)?;
        let loss = quality_loss_graph(&mut g, &dist, &self.labels)?;
        let grads = g.backward(&loss).map_err(LossError::from)?;
        let mut by_name = BTreeMap::new();
        for name in trainable {
            let leaf = &p[name];
            let grad = grads
                .get(leaf)
                .cloned()
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            by_name.insert(name.clone(), grad);
        }
        Ok((loss.item(), GradientVector::from_tensors(trainable, &by_name)?))
    }
}

/// Where a step happened, for error reports.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepSite {
    pub epoch: usize,
    pub batch: usize,
    pub task: usize,
}

fn checked_step(
    params: &ParameterStore,
    objective: &dyn Objective,
    trainable: &[String],
    lr: f64,
    what: &'static str,
    site: StepSite,
) -> Result<(ParameterStore, f64), MetaError> {
    let (loss, grad) = objective.loss_and_grad(params, trainable)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(MetaError::NonFinite {
            what,
            epoch: site.epoch,
            batch: site.batch,
            task: site.task,
        });
    }
    Ok((sgd_step(params, &grad, lr)?, loss))
}

/// Support-set adaptation; returns the adapted copy and the support loss
/// at `params`.
pub fn inner_step(
    params: &ParameterStore,
    support: &dyn Objective,
    trainable: &[String],
    alpha: f64,
    site: StepSite,
) -> Result<(ParameterStore, f64), MetaError> {
    checked_step(params, support, trainable, alpha, "support gradient", site)
}

/// Query-set step taken from the adapted point; returns the task
/// parameters and the query loss at `adapted`.
pub fn outer_step(
    adapted: &ParameterStore,
    query: &dyn Objective,
    trainable: &[String],
    alpha: f64,
    site: StepSite,
) -> Result<(ParameterStore, f64), MetaError> {
    checked_step(adapted, query, trainable, alpha, "query gradient", site)
}

/// Optimizer for the shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaOptimizer {
    Adam(Adam),
    Sgd,
}

impl MetaOptimizer {
    pub fn new(kind: MetaOptimizerKind) -> Self {
        match kind {
            MetaOptimizerKind::Adam => Self::Adam(Adam::standard()),
            MetaOptimizerKind::Sgd => Self::Sgd,
        }
    }
}

/// Element-wise mean of the task parameters, taken as the first task plus
/// the mean offset of the others so identical inputs give their own value.
fn task_mean(task_params: &[GradientVector]) -> Vec<f64> {
    let first = task_params[0].values();
    let k = task_params.len() as f64;
    (0..first.len())
        .map(|j| {
            let offset: f64 = task_params[1..]
                .iter()
                .map(|t| t.values()[j] - first[j])
                .sum();
            first[j] + offset / k
        })
        .collect()
}

/// Moves `theta` toward the mean of `task_params`. With [`MetaOptimizer::Sgd`]
/// the result is `(1 - beta) * theta + beta * mean`, computed as
/// `mean + (1 - beta) * (theta - mean)`.
pub fn meta_update(
    theta: &ParameterStore,
    task_params: &[ParameterStore],
    trainable: &[String],
    beta: f64,
    optimizer: &mut MetaOptimizer,
) -> Result<ParameterStore, MetaError> {
    if task_params.is_empty() {
        return Err(MetaError::EmptyUpdate);
    }
    let base = theta.flatten(trainable)?;
    let flats = task_params
        .iter()
        .map(|p| p.flatten(trainable))
        .collect::<Result<Vec<_>, _>>()?;
    if flats.iter().any(|f| !f.same_layout(&base)) {
        return Err(ParamError::LayoutMismatch.into());
    }
    let mean = task_mean(&flats);
    match optimizer {
        MetaOptimizer::Sgd => {
            let values = base
                .values()
                .iter()
                .zip(&mean)
                .map(|(&t, &m)| m + (1.0 - beta) * (t - m))
                .collect();
            let mut out = theta.clone();
            out.assign(&base.with_values(values)?)?;
            Ok(out)
        }
        MetaOptimizer::Adam(adam) => {
            let pseudo = base
                .values()
                .iter()
                .zip(&mean)
                .map(|(&t, &m)| t - m)
                .collect();
            Ok(adam.step(theta, &base.with_values(pseudo)?, beta)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub task_id: usize,
    pub support_loss: f64,
    pub query_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub support_loss: f64,
    pub query_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaRun {
    pub model: DualEncoder,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

/// Runs meta pre-training from `init`. Epochs and batches are numbered
/// from 1 in the log.
pub fn run_meta_pretraining(
    dataset: &Dataset,
    init: &DualEncoder,
    config: &MetaConfig,
    seed: u64,
) -> Result<MetaRun, MetaError> {
    let trainable = init.meta_trainable();
    let probe = build_meta_tasks(dataset, config, seed, 0)?;
    config.validate(probe.len())?;
    let mut theta = init.params.clone();
    let mut optimizer = MetaOptimizer::new(config.optimizer);
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let tasks = build_meta_tasks(dataset, config, seed, epoch)?;
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x0bd3, epoch as u64])));
        let (mut s_sum, mut q_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(config.tasks_per_batch).enumerate() {
            let mut ids = batch.to_vec();
            ids.sort_unstable();
            let mut adapted_all = Vec::with_capacity(ids.len());
            for &t in &ids {
                let task = &tasks[t];
                let site = StepSite {
                    epoch,
                    batch: b + 1,
                    task: task.distortion_type.id(),
                };
                let support = QualityObjective::new(init, dataset, &task.support);
                let query = QualityObjective::new(init, dataset, &task.query);
                let (adapted, s_loss) =
                    inner_step(&theta, &support, &trainable, config.inner_lr, site)?;
                let (task_theta, q_loss) =
                    outer_step(&adapted, &query, &trainable, config.inner_lr, site)?;
                adapted_all.push(task_theta);
                s_sum += s_loss;
                q_sum += q_loss;
                log.push(LogRow {
                    epoch,
                    batch: b + 1,
                    task_id: site.task,
                    support_loss: s_loss,
                    query_loss: q_loss,
                });
            }
            theta = meta_update(&theta, &adapted_all, &trainable, config.meta_lr, &mut optimizer)?;
        }
        let n = tasks.len() as f64;
        epochs.push(EpochSummary {
            epoch,
            support_loss: s_sum / n,
            query_loss: q_sum / n,
        });
        log::info!(
            "meta epoch {epoch}: support {:.6} query {:.6}",
            s_sum / n,
            q_sum / n
        );
    }
    Ok(MetaRun {
        model: DualEncoder {
            params: theta,
            ..init.clone()
        },
        log,
        epochs,
    })
}

#[cfg(test)]
mod tests;
