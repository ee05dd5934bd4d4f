//! Phase 1: twin training with label flipping, and cross-mistake
//! environment discovery.
//!
//! Two predictors each train on a random half of the data ("held-in") and
//! score the other half ("held-out"). After every update, each label is
//! replaced by the held-out prediction with a probability that grows with
//! the held-out confidence, which pushes both twins towards whatever
//! shortcut makes the held-out predictions confident. Examples that either
//! final twin misclassifies form environment 1.

mod calibrate;
mod export;
mod holdout;
mod select;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelParams;
use rand::Rng;

use crate::numerics::{argmax, Matrix, RngStream};

pub use calibrate::{calibrate, fit_temperatures, Calibration, TemperatureFit};
pub use export::{read_environments_csv, write_environments_csv};
pub use holdout::{assign_holdout, MAX_HOLDOUT_ATTEMPTS};
pub use select::{select_twins, TwinRun, TwinSelection};
pub use train::{xrm_train, XrmOptions, XrmTrainer};

/// Both twins, their data assignment, and the moving labels.
#[derive(Debug, Clone)]
pub struct TwinState {
    pub params_a: ModelParams,
    pub params_b: ModelParams,
    /// `true` where twin `a` holds the example in; twin `b` holds in the rest.
    pub mask_a: Vec<bool>,
    pub temps_a: Vec<f64>,
    pub temps_b: Vec<f64>,
    pub y_original: Vec<usize>,
    pub y_current: Vec<usize>,
    /// Flip fraction before training, then after every iteration.
    pub flip_trajectory: Vec<f64>,
    /// Some class has below-chance held-out accuracy at the end of training.
    pub degenerate: bool,
}

impl TwinState {
    pub fn mask_b(&self) -> Vec<bool> {
        self.mask_a.iter().map(|&a| !a).collect()
    }

    pub fn flip_fraction(&self) -> f64 {
        count_flips(&self.y_original, &self.y_current)
    }

    /// Logits of both twins on `x`.
    pub fn logits(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.params_a.forward(x)?, self.params_b.forward(x)?))
    }

    /// Cross-mistake environments for `(x, y)`.
    pub fn discover(&self, x: &Matrix, y: &[usize]) -> Result<Vec<usize>> {
        let (a, b) = self.logits(x)?;
        cross_mistake(&a, &b, y)
    }
}

/// Binary environments discovered for the training and validation splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveredEnvironments {
    pub train_env: Vec<usize>,
    pub val_env: Vec<usize>,
}

impl DiscoveredEnvironments {
    pub const N_ENVS: usize = 2;
}

/// `(p_max − 1/K) · K / (K − 1)`, clamped to `[0, 1]`.
pub fn flip_probability(p_out_max: f64, n_classes: usize) -> f64 {
    let k = n_classes as f64;
    ((p_out_max - 1.0 / k) * k / (k - 1.0)).clamp(0.0, 1.0)
}

/// One flip draw for a held-out probability row: the predicted class with
/// probability [`flip_probability`] of its confidence, otherwise `None`.
pub fn draw_flip(held_out_probs: &[f64], rng: &mut RngStream) -> Option<usize> {
    let predicted = argmax(held_out_probs);
    let p = flip_probability(held_out_probs[predicted], held_out_probs.len());
    (rng.random::<f64>() < p).then_some(predicted)
}

/// Fraction of labels that currently differ from the originals. A label
/// flipped away and back counts as unflipped.
pub fn count_flips(y_original: &[usize], y_current: &[usize]) -> f64 {
    if y_original.is_empty() {
        return 0.0;
    }
    let changed = y_original
        .iter()
        .zip(y_current)
        .filter(|(a, b)| a != b)
        .count();
    changed as f64 / y_original.len() as f64
}

/// Environment 1 iff `y` is not the argmax of either twin's logits.
pub fn cross_mistake(logits_a: &Matrix, logits_b: &Matrix, y: &[usize]) -> Result<Vec<usize>> {
    if logits_a.shape() != logits_b.shape() {
        return Err(Error::shape(
            "cross_mistake logits",
            format!("{:?}", logits_a.shape()),
            format!("{:?}", logits_b.shape()),
        ));
    }
    if logits_a.rows() != y.len() {
        return Err(Error::shape(
            "cross_mistake labels",
            logits_a.rows(),
            y.len(),
        ));
    }
    let pred_a = logits_a.argmax_rows();
    let pred_b = logits_b.argmax_rows();
    Ok(y.iter()
        .zip(pred_a.iter().zip(&pred_b))
        .map(|(&label, (&a, &b))| usize::from(a != label || b != label))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn flip_probability_examples() {
        assert_eq!(flip_probability(0.5, 2), 0.0);
        assert_eq!(flip_probability(1.0, 2), 1.0);
        assert_eq!(flip_probability(1.0, 10), 1.0);
        assert_abs_diff_eq!(flip_probability(0.9, 2), 0.8, epsilon = 1e-15);
        assert_eq!(flip_probability(0.1, 10), 0.0);
        // float slop below chance and above one is clamped
        assert_eq!(flip_probability(0.4999999, 2), 0.0);
        assert_eq!(flip_probability(1.0 + 1e-12, 2), 1.0);
    }

    #[test]
    fn count_flips_examples() {
        assert_eq!(count_flips(&[0, 1, 1, 0], &[0, 1, 1, 0]), 0.0);
        assert_eq!(count_flips(&[0, 1, 1, 0], &[1, 0, 0, 1]), 1.0);
        let original = [0, 1, 1, 0];
        let mut current = original;
        current[2] = 0; // flip
        current[2] = 1; // and back
        current[3] = 1;
        assert_eq!(count_flips(&original, &current), 0.25);
    }

    #[test]
    fn cross_mistake_truth_table() {
        // rows: both right, a wrong, b wrong, both wrong (label 0)
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let env = cross_mistake(&a, &b, &[0, 0, 0, 0]).unwrap();
        assert_eq!(env, vec![0, 1, 1, 1]);
        assert!(cross_mistake(&a, &b, &[0, 0]).is_err());
    }

    #[test]
    fn cross_mistake_ties_follow_smallest_index() {
        let tie = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        assert_eq!(cross_mistake(&tie, &tie, &[0]).unwrap(), vec![0]);
        assert_eq!(cross_mistake(&tie, &tie, &[1]).unwrap(), vec![1]);
    }
}
