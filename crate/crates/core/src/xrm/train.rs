//! The twin training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::calibrate::calibrate;
use super::holdout::assign_holdout;
use super::{count_flips, draw_flip, TwinState};
use crate::datasets::GroupDataset;
use crate::error::{Error, Result};
use crate::harness::HyperParams;
use crate::models::{init_params, FoldMode, ModelSpec};
use crate::numerics::{
    class_balanced_weights, softmax_in_place, Matrix, OptimizerState, RngStream, StreamLabel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XrmOptions {
    pub iters: usize,
    pub calibration_lr: f64,
    pub calibration_iters: usize,
    pub fold_mode: FoldMode,
    /// Update and flip over the whole training set each iteration. When
    /// false, `hp.batch_size` examples are drawn per iteration and only
    /// they are flipped.
    pub full_batch: bool,
}

impl Default for XrmOptions {
    fn default() -> Self {
        Self {
            iters: 2000,
            calibration_lr: 1e-2,
            calibration_iters: 1000,
            fold_mode: FoldMode::WeightsAndBias,
            full_batch: true,
        }
    }
}

/// Step-by-step twin training over one training split.
pub struct XrmTrainer<'a> {
    x: &'a Matrix,
    n_classes: usize,
    state: TwinState,
    opt_a: OptimizerState,
    opt_b: OptimizerState,
    held_in_a: Vec<usize>,
    held_in_b: Vec<usize>,
    /// Held-in features of each twin, kept for full-batch training.
    cached: Option<(Matrix, Matrix)>,
    batch_size: Option<usize>,
    order: Vec<usize>,
    cursor: usize,
    flip_rng: RngStream,
    batch_rng: RngStream,
    iteration: usize,
}

impl<'a> XrmTrainer<'a> {
    /// Assigns held-in halves, initialises and calibrates both twins.
    ///
    /// Reads features and labels only.
    pub fn new(
        train: &'a GroupDataset,
        spec: &ModelSpec,
        hp: &HyperParams,
        seed: u64,
        opts: &XrmOptions,
    ) -> Result<Self> {
        spec.validate()?;
        hp.validate(train.len())?;
        if spec.input_dim != train.dim() || spec.n_classes != train.n_classes() {
            return Err(Error::shape(
                "xrm model spec",
                format!("{} inputs, {} classes", train.dim(), train.n_classes()),
                format!("{} inputs, {} classes", spec.input_dim, spec.n_classes),
            ));
        }
        let counts = train.class_counts();
        if let Some(c) = counts.iter().position(|&k| k < 2) {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} examples; twins need at least 2 per class",
                counts[c]
            )));
        }
        let y = train.y().to_vec();
        let mask_a = assign_holdout(
            &y,
            train.n_classes(),
            &mut RngStream::new(seed, StreamLabel::Mask),
        )?;
        let mut init_rng = RngStream::new(seed, StreamLabel::Init);
        let params_a = init_params(spec, &mut init_rng)?;
        let params_b = init_params(spec, &mut init_rng)?;
        let cal = calibrate(
            &params_a,
            &params_b,
            train.x(),
            &y,
            &mask_a,
            opts.calibration_lr,
            opts.calibration_iters,
            opts.fold_mode,
        )?;

        let held_in_a: Vec<usize> = (0..y.len()).filter(|&i| mask_a[i]).collect();
        let held_in_b: Vec<usize> = (0..y.len()).filter(|&i| !mask_a[i]).collect();
        let batch_size = if opts.full_batch { None } else { hp.batch_size };
        let cached = batch_size.is_none().then(|| {
            (
                train.x().select_rows(&held_in_a),
                train.x().select_rows(&held_in_b),
            )
        });

        Ok(Self {
            x: train.x(),
            n_classes: train.n_classes(),
            state: TwinState {
                params_a: cal.params_a,
                params_b: cal.params_b,
                mask_a,
                temps_a: cal.temps_a,
                temps_b: cal.temps_b,
                y_original: y.clone(),
                y_current: y,
                flip_trajectory: vec![0.0],
                degenerate: false,
            },
            opt_a: OptimizerState::new(hp.optimizer, hp.lr, hp.weight_decay)?,
            opt_b: OptimizerState::new(hp.optimizer, hp.lr, hp.weight_decay)?,
            held_in_a,
            held_in_b,
            cached,
            batch_size,
            order: Vec::new(),
            cursor: 0,
            flip_rng: RngStream::new(seed, StreamLabel::Flip),
            batch_rng: RngStream::new(seed, StreamLabel::Data),
            iteration: 0,
        })
    }

    pub fn state(&self) -> &TwinState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.state.y_original.len();
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.batch_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer step on each twin followed by one round of flips.
    /// Returns the flip fraction afterwards.
    pub fn step(&mut self) -> Result<f64> {
        let (rows_a, rows_b, features) = match self.batch_size {
            None => (
                self.held_in_a.clone(),
                self.held_in_b.clone(),
                self.cached.take().expect("full-batch cache"),
            ),
            Some(size) => {
                let batch = self.next_batch(size);
                let (a, b): (Vec<usize>, Vec<usize>) =
                    batch.into_iter().partition(|&i| self.state.mask_a[i]);
                let features = (self.x.select_rows(&a), self.x.select_rows(&b));
                (a, b, features)
            }
        };
        let result = self.update_and_flip(&rows_a, &rows_b, &features);
        if self.batch_size.is_none() {
            self.cached = Some(features);
        }
        result
    }

    fn update_and_flip(
        &mut self,
        rows_a: &[usize],
        rows_b: &[usize],
        (x_a, x_b): &(Matrix, Matrix),
    ) -> Result<f64> {
        let it = self.iteration;
        let state = &mut self.state;

        // class balance over the moving labels of every row in play
        let rows: Vec<usize> = rows_a.iter().chain(rows_b).copied().collect();
        let labels: Vec<usize> = rows.iter().map(|&i| state.y_current[i]).collect();
        let (weights, _) = class_balanced_weights(&labels, self.n_classes);
        let (w_a, w_b) = weights.split_at(rows_a.len());
        let (y_a, y_b) = labels.split_at(rows_a.len());

        // held-out predictions come from the pre-update twins
        let out_a = state.params_b.forward(x_a)?;
        let out_b = state.params_a.forward(x_b)?;

        let back_a = state.params_a.backward(x_a, y_a, w_a)?;
        let back_b = state.params_b.backward(x_b, y_b, w_b)?;
        let loss = back_a.loss + back_b.loss;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("held-in loss {loss}"),
            });
        }
        self.opt_a
            .step(&mut state.params_a.blocks_mut(), &back_a.grads.blocks())
            .map_err(|e| Error::Diverged {
                iteration: it,
                detail: e.to_string(),
            })?;
        self.opt_b
            .step(&mut state.params_b.blocks_mut(), &back_b.grads.blocks())
            .map_err(|e| Error::Diverged {
                iteration: it,
                detail: e.to_string(),
            })?;

        for (held_out, idx) in [(&out_a, rows_a), (&out_b, rows_b)] {
            let mut probs = vec![0.0; self.n_classes];
            for (r, &i) in idx.iter().enumerate() {
                probs.copy_from_slice(held_out.row(r));
                softmax_in_place(&mut probs);
                if let Some(predicted) = draw_flip(&probs, &mut self.flip_rng) {
                    state.y_current[i] = predicted;
                }
            }
        }

        let fraction = count_flips(&state.y_original, &state.y_current);
        state.flip_trajectory.push(fraction);
        self.iteration += 1;
        Ok(fraction)
    }

    /// Ends training and flags runs where some class has held-out accuracy
    /// below chance (`1/K`) against the original labels. Zero accuracy on a
    /// class and twins locked onto the inverted labelling both qualify.
    pub fn finish(mut self) -> Result<TwinState> {
        let state = &mut self.state;
        let out_a = state
            .params_b
            .forward(&self.x.select_rows(&self.held_in_a))?;
        let out_b = state
            .params_a
            .forward(&self.x.select_rows(&self.held_in_b))?;
        let mut correct = vec![0usize; self.n_classes];
        let mut total = vec![0usize; self.n_classes];
        for (logits, idx) in [(&out_a, &self.held_in_a), (&out_b, &self.held_in_b)] {
            for (pred, &i) in logits.argmax_rows().into_iter().zip(idx.iter()) {
                let y = state.y_original[i];
                total[y] += 1;
                correct[y] += usize::from(pred == y);
            }
        }
        let chance = 1.0 / self.n_classes as f64;
        state.degenerate = (0..self.n_classes)
            .any(|c| total[c] > 0 && (correct[c] as f64) < chance * total[c] as f64);
        Ok(self.state)
    }
}

/// Runs `opts.iters` iterations of twin training on `train`.
pub fn xrm_train(
    train: &GroupDataset,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &XrmOptions,
) -> Result<TwinState> {
    let mut trainer = XrmTrainer::new(train, spec, hp, seed, opts)?;
    for _ in 0..opts.iters {
        trainer.step()?;
    }
    trainer.finish()
}
