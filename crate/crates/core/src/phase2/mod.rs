//! Phase-2 training on (possibly discovered) groups: ERM, GroupDRO, RWG and
//! SUBG, group metrics, and checkpoint selection on validation data.

mod metrics;
mod results;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{GroupDataset, GroupIndex};
use crate::error::{Error, Result};
use crate::models::ModelParams;

pub use metrics::{class_accuracy, worst_class_accuracy, worst_group_accuracy, GroupAccuracy};
pub use results::{read_results_csv, write_results_csv, ResultRow};
pub use train::{
    erm_train, groupdro_train, groupdro_train_with_weights, rwg_train, rwg_weights, subg_train,
    subsample_groups, train_streaming, BatchSampling, OnCheckpoint, TrainOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Erm,
    GroupDro,
    Rwg,
    Subg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Erm,
        Algorithm::GroupDro,
        Algorithm::Rwg,
        Algorithm::Subg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::GroupDro => "groupdro",
            Algorithm::Rwg => "rwg",
            Algorithm::Subg => "subg",
        }
    }

    /// Whether training consumes group annotations.
    pub fn uses_groups(self) -> bool {
        self != Algorithm::Erm
    }

    pub fn train(
        self,
        data: &GroupDataset,
        groups: &GroupIndex,
        spec: &crate::models::ModelSpec,
        hp: &crate::harness::HyperParams,
        seed: u64,
        opts: &TrainOptions,
    ) -> Result<Vec<Checkpoint>> {
        match self {
            Algorithm::Erm => erm_train(data, spec, hp, seed, opts),
            Algorithm::GroupDro => groupdro_train(data, groups, spec, hp, seed, opts),
            Algorithm::Rwg => rwg_train(data, groups, spec, hp, seed, opts),
            Algorithm::Subg => subg_train(data, groups, spec, hp, seed, opts),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm `{s}`")))
    }
}

/// GroupDRO's distribution over groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    q: Vec<f64>,
}

impl GroupWeights {
    pub fn uniform(n_groups: usize) -> Self {
        Self {
            q: vec![1.0 / n_groups as f64; n_groups],
        }
    }

    /// Uniform over groups with at least one member; empty groups get 0.
    pub fn uniform_over_nonempty(sizes: &[usize]) -> Self {
        let live = sizes.iter().filter(|&&s| s > 0).count().max(1) as f64;
        Self {
            q: sizes
                .iter()
                .map(|&s| if s > 0 { 1.0 / live } else { 0.0 })
                .collect(),
        }
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// `q_g ← q_g · exp(η ℓ_g)` for groups seen in the batch, renormalised
    /// so that those groups keep their combined mass. Groups with `None`
    /// loss keep their weight unchanged.
    pub fn update(&mut self, losses: &[Option<f64>], eta: f64) {
        debug_assert_eq!(losses.len(), self.q.len());
        let present: Vec<usize> = (0..self.q.len()).filter(|&g| losses[g].is_some()).collect();
        let mass: f64 = present.iter().map(|&g| self.q[g]).sum();
        if present.is_empty() || mass <= 0.0 {
            return;
        }
        // shift exponents by their max so exp never overflows
        let top = present
            .iter()
            .map(|&g| eta * losses[g].unwrap_or(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &g in &present {
            self.q[g] *= (eta * losses[g].unwrap_or(0.0) - top).exp();
            total += self.q[g];
        }
        if total > 0.0 {
            for &g in &present {
                self.q[g] *= mass / total;
            }
        }
        let sum: f64 = self.q.iter().sum();
        for v in &mut self.q {
            *v /= sum;
        }
    }
}

/// Parameters snapshot taken during phase-2 training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub params: ModelParams,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    WorstGroup,
    WorstClass,
}

/// Scores every checkpoint on `val` and returns the index of the best;
/// ties go to the earliest. `val_groups` is only used for
/// [`Criterion::WorstGroup`].
pub fn select_checkpoint(
    checkpoints: &mut [Checkpoint],
    criterion: Criterion,
    val: &GroupDataset,
    val_groups: &GroupIndex,
) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument(
            "no checkpoints to select from".into(),
        ));
    }
    let mut scores = Vec::with_capacity(checkpoints.len());
    for cp in checkpoints.iter_mut() {
        let score = validation_score(&cp.params, criterion, val, val_groups)?;
        cp.val_metric = Some(score);
        scores.push(score);
    }
    Ok(argmax_earliest(&scores))
}

pub fn validation_score(
    params: &ModelParams,
    criterion: Criterion,
    val: &GroupDataset,
    val_groups: &GroupIndex,
) -> Result<f64> {
    let preds = params.predict(val.x())?;
    match criterion {
        Criterion::WorstGroup => Ok(worst_group_accuracy(&preds, val.y(), val_groups)?.worst),
        Criterion::WorstClass => worst_class_accuracy(&preds, val.y(), val.n_classes()),
    }
}

/// Streaming counterpart of [`select_checkpoint`]: keeps only the best
/// checkpoint seen so far (earliest on ties) plus the metric trajectory.
pub struct BestCheckpoint<'v> {
    criterion: Criterion,
    val: &'v GroupDataset,
    val_groups: &'v GroupIndex,
    best: Option<Checkpoint>,
    trajectory: Vec<(usize, f64)>,
}

impl<'v> BestCheckpoint<'v> {
    pub fn new(criterion: Criterion, val: &'v GroupDataset, val_groups: &'v GroupIndex) -> Self {
        Self {
            criterion,
            val,
            val_groups,
            best: None,
            trajectory: Vec::new(),
        }
    }

    pub fn observe(&mut self, iteration: usize, params: &ModelParams) -> Result<()> {
        let score = validation_score(params, self.criterion, self.val, self.val_groups)?;
        self.trajectory.push((iteration, score));
        let better = match &self.best {
            None => true,
            Some(b) => score > b.val_metric.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            self.best = Some(Checkpoint {
                iteration,
                params: params.clone(),
                val_metric: Some(score),
            });
        }
        Ok(())
    }

    /// `(iteration, validation metric)` for every observed checkpoint.
    pub fn trajectory(&self) -> &[(usize, f64)] {
        &self.trajectory
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<Checkpoint> {
        self.best
    }
}

/// Index of the largest value; the first wins ties.
pub fn argmax_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_earliest(&[0.4]), 0);
        assert_eq!(argmax_earliest(&[0.2, 0.7, 0.5]), 1);
        assert_eq!(argmax_earliest(&[0.7, 0.7]), 0);
    }

    #[test]
    fn zero_eta_is_identity() {
        let mut q = GroupWeights::uniform(4);
        q.update(&[Some(3.0), Some(0.1), None, Some(2.0)], 0.0);
        assert_eq!(q, GroupWeights::uniform(4));
    }

    #[test]
    fn absent_groups_keep_weight() {
        let mut q = GroupWeights::uniform(3);
        q.update(&[Some(5.0), Some(1.0), None], 0.5);
        assert!((q.q()[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!(q.q()[0] > q.q()[1]);
    }

    #[test]
    fn update_matches_direct_formula() {
        let mut q = GroupWeights::uniform(3);
        let losses = [0.2, 1.3, 0.7];
        q.update(&losses.map(Some), 0.1);
        let raw: Vec<f64> = losses.iter().map(|l| (0.1 * l).exp()).collect();
        let z: f64 = raw.iter().sum();
        for (a, b) in q.q().iter().zip(&raw) {
            assert!((a - b / z).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_losses_stay_finite() {
        let mut q = GroupWeights::uniform(2);
        q.update(&[Some(1e6), Some(0.0)], 1.0);
        assert!(q.q().iter().all(|v| v.is_finite()));
        assert!((q.q()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_groups_get_zero_weight() {
        let q = GroupWeights::uniform_over_nonempty(&[3, 0, 5, 0]);
        assert_eq!(q.q(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("irm".parse::<Algorithm>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn weights_stay_on_simplex(
            steps in prop::collection::vec(
                (prop::collection::vec(prop::option::of(0.0f64..50.0), 5), 1e-4f64..1.0),
                1..30,
            )
        ) {
            let mut q = GroupWeights::uniform(5);
            for (losses, eta) in steps {
                q.update(&losses, eta);
                let sum: f64 = q.q().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(q.q().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
