//! Worst-group and worst-class accuracy.

use serde::{Deserialize, Serialize};

use crate::datasets::GroupIndex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    /// Minimum over non-empty groups.
    pub worst: f64,
    /// Overall accuracy across all examples.
    pub average: f64,
    /// `None` for empty groups, which are excluded from the minimum.
    pub per_group: Vec<Option<f64>>,
}

impl GroupAccuracy {
    pub fn best(&self) -> f64 {
        self.per_group.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn empty_groups(&self) -> Vec<usize> {
        (0..self.per_group.len())
            .filter(|&g| self.per_group[g].is_none())
            .collect()
    }
}

fn grouped_accuracy(
    preds: &[usize],
    labels: &[usize],
    group_of: &[usize],
    n_groups: usize,
) -> Result<GroupAccuracy> {
    if preds.len() != labels.len() || group_of.len() != labels.len() {
        return Err(Error::shape("accuracy inputs", labels.len(), preds.len()));
    }
    let mut correct = vec![0usize; n_groups];
    let mut total = vec![0usize; n_groups];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(group_of) {
        total[g] += 1;
        correct[g] += usize::from(p == y);
    }
    let per_group: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let worst = per_group
        .iter()
        .flatten()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::EmptyGroup("every group is empty".into()))?;
    let average = correct.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok(GroupAccuracy {
        worst,
        average,
        per_group,
    })
}

pub fn worst_group_accuracy(
    preds: &[usize],
    labels: &[usize],
    groups: &GroupIndex,
) -> Result<GroupAccuracy> {
    grouped_accuracy(preds, labels, groups.group_of(), groups.n_groups())
}

/// Per-class breakdown; classes absent from `labels` are excluded.
pub fn class_accuracy(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<GroupAccuracy> {
    grouped_accuracy(preds, labels, labels, n_classes)
}

pub fn worst_class_accuracy(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    Ok(class_accuracy(preds, labels, n_classes)?.worst)
}
