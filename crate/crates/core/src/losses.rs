//! Quality cross-entropy, semantic KL divergence and label rescaling.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, LOG_EPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("quality label {0} outside [0, 1]")]
    LabelRange(f64),
    #[error("probability {0} is not finite")]
    NonFinite(f64),
    #[error("not a probability distribution: {0}")]
    NotDistribution(String),
    #[error("degenerate label set: all scores equal")]
    DegenerateLabels,
    #[error("need at least {needed} scores, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn clamped_ln(v: f64) -> f64 {
    v.max(LOG_EPS).ln()
}

/// Binary cross-entropy between `p_high` and a label in `[0, 1]`.
pub fn quality_loss(p_high: f64, y: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(LossError::LabelRange(y));
    }
    if !p_high.is_finite() {
        return Err(LossError::NonFinite(p_high));
    }
    Ok(-(y * clamped_ln(p_high) + (1.0 - y) * clamped_ln(1.0 - p_high)))
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), LossError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LossError::NotDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LossError::NotDistribution(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// `KL(p_sem || p_qua)` with both logs floored at `LOG_EPS`.
pub fn semantic_kl_loss(p_sem: &[f64], p_qua: &[f64]) -> Result<f64, LossError> {
    if p_sem.len() != p_qua.len() || p_sem.is_empty() {
        return Err(LossError::NotDistribution(format!(
            "lengths {} and {}",
            p_sem.len(),
            p_qua.len()
        )));
    }
    check_distribution(p_sem, "p_sem")?;
    check_distribution(p_qua, "p_qua")?;
    Ok(p_sem
        .iter()
        .zip(p_qua)
        .map(|(&s, &q)| s * (clamped_ln(s) - clamped_ln(q)))
        .sum())
}

/// Min-max rescaling to `[0, 1]`.
pub fn rescale_mos(scores: &[f64]) -> Result<Vec<f64>, LossError> {
    if scores.len() < 2 {
        return Err(LossError::TooFew {
            needed: 2,
            got: scores.len(),
        });
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(LossError::DegenerateLabels);
    }
    Ok(scores.iter().map(|s| (s - min) / (max - min)).collect())
}

/// Mean cross-entropy over a batch, given the `[B, 2]` (high, low)
/// distribution from the model.
pub fn quality_loss_graph(
    g: &mut Graph,
    distribution: &Tensor,
    labels: &[f64],
) -> Result<Tensor, LossError> {
    let b = distribution.rows();
    if labels.len() != b {
        return Err(LossError::LengthMismatch {
            predictions: b,
            labels: labels.len(),
        });
    }
    let mut targets = Vec::with_capacity(2 * b);
    for &y in labels {
        if !(0.0..=1.0).contains(&y) {
            return Err(LossError::LabelRange(y));
        }
        targets.push(y);
        targets.push(1.0 - y);
    }
    let targets = Tensor::new(vec![b, 2], targets)?;
    let logp = g.log(distribution)?;
    let weighted = g.mul(&logp, &targets)?;
    let total = g.sum(&weighted)?;
    Ok(g.scale(&total, -1.0 / b as f64)?)
}

/// Mean `KL(p_sem || p_qua)` over a batch. `p_sem` rows are constants.
pub fn semantic_kl_graph(
    g: &mut Graph,
    p_qua: &Tensor,
    p_sem: &[Vec<f64>],
) -> Result<Tensor, LossError> {
    let (b, k) = (p_qua.rows(), p_qua.cols());
    if p_sem.len() != b || p_sem.iter().any(|r| r.len() != k) {
        return Err(LossError::LengthMismatch {
            predictions: b,
            labels: p_sem.len(),
        });
    }
    for row in p_sem {
        check_distribution(row, "p_sem")?;
    }
    let sem: Vec<f64> = p_sem.iter().flatten().copied().collect();
    let log_sem: Vec<f64> = sem.iter().map(|&s| clamped_ln(s)).collect();
    let sem = Tensor::new(vec![b, k], sem)?;
    let log_sem = Tensor::new(vec![b, k], log_sem)?;
    let log_qua = g.log(p_qua)?;
    let diff = g.sub(&log_sem, &log_qua)?;
    let weighted = g.mul(&diff, &sem)?;
    let total = g.sum(&weighted)?;
    Ok(g.scale(&total, 1.0 / b as f64)?)
}
