//! Softmax and cross-entropy variants.

use log::warn;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    logits.ensure_finite("softmax input")?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, stabilised.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-example cross-entropy `-log softmax(z)_y`.
pub fn cross_entropy_per_example(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(logits
        .rows_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .collect())
}

/// Result of a class-balanced loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedLoss {
    pub value: f64,
    /// Classes with no examples among the scored rows; they contribute nothing.
    pub skipped_classes: Vec<usize>,
}

/// Per-example weights `1 / count(class of i)`, so that `Σ wᵢ·ℓᵢ` is the
/// sum over present classes of that class's mean loss.
pub fn class_balanced_weights(labels: &[usize], n_classes: usize) -> (Vec<f64>, Vec<usize>) {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let skipped: Vec<usize> = (0..n_classes).filter(|&c| counts[c] == 0).collect();
    let weights = labels.iter().map(|&y| 1.0 / counts[y] as f64).collect();
    (weights, skipped)
}

/// Sum over classes of the mean cross-entropy of that class's examples.
///
/// Classes absent from `labels` are skipped with a warning.
pub fn balanced_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<BalancedLoss> {
    let n_classes = logits.cols();
    let per_example = cross_entropy_per_example(logits, labels)?;
    let (weights, skipped) = class_balanced_weights(labels, n_classes);
    if !skipped.is_empty() {
        warn!("balanced cross-entropy: no examples for classes {skipped:?}; skipping them");
    }
    let value = per_example.iter().zip(&weights).map(|(l, w)| l * w).sum();
    Ok(BalancedLoss {
        value,
        skipped_classes: skipped,
    })
}

/// `Σ wᵢ·CEᵢ` together with its gradient with respect to the logits,
/// `wᵢ·(softmax(zᵢ) − onehot(yᵢ))`.
pub fn weighted_cross_entropy_with_grad(
    logits: &Matrix,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    if weights.len() != labels.len() {
        return Err(Error::shape("example weights", labels.len(), weights.len()));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = grad.row_mut(i);
        let lse = log_sum_exp(row);
        loss += w * (lse - row[y]);
        for v in row.iter_mut() {
            *v = w * (*v - lse).exp();
        }
        row[y] -= w;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("labels", logits.rows(), labels.len()));
    }
    logits.ensure_finite("logits")?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}
