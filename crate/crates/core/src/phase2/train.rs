//! Minibatch training loops for ERM, GroupDRO, RWG and SUBG.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Algorithm, Checkpoint, GroupWeights};
use crate::datasets::{GroupDataset, GroupIndex};
use crate::error::{Error, Result};
use crate::harness::HyperParams;
use crate::models::{init_params, ModelParams, ModelSpec};
use crate::numerics::{cross_entropy_per_example, OptimizerState, RngStream, StreamLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSampling {
    /// Shuffled passes over all examples.
    #[default]
    Uniform,
    /// Equal share of every non-empty group per batch, drawn with replacement.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub iters: usize,
    pub eval_every: usize,
    pub sampling: BatchSampling,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iters: 2000,
            eval_every: 50,
            sampling: BatchSampling::Uniform,
        }
    }
}

enum Objective<'g> {
    Mean,
    /// Fixed per-example weights, averaged over the batch.
    Weighted(Vec<f64>),
    GroupDro {
        groups: &'g GroupIndex,
        eta: f64,
    },
}

struct Sampler {
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    strata: Option<Vec<Vec<usize>>>,
}

impl Sampler {
    fn new(n: usize, strata: Option<Vec<Vec<usize>>>, seed: u64) -> Self {
        Self {
            rng: RngStream::new(seed, StreamLabel::Data),
            order: (0..n).collect(),
            cursor: n,
            strata,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        if let Some(strata) = &self.strata {
            return (0..size)
                .map(|k| {
                    let s = &strata[k % strata.len()];
                    s[self.rng.random_range(0..s.len())]
                })
                .collect();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Callback receiving `(iteration, params)` at every checkpoint.
pub type OnCheckpoint<'f> = dyn FnMut(usize, &ModelParams) -> Result<()> + 'f;

#[allow(clippy::too_many_arguments)]
fn run(
    data: &GroupDataset,
    objective: Objective<'_>,
    strata: Option<Vec<Vec<usize>>>,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
    on_checkpoint: &mut OnCheckpoint<'_>,
) -> Result<Option<Vec<GroupWeights>>> {
    hp.validate(data.len())?;
    if opts.eval_every == 0 {
        return Err(Error::InvalidArgument("eval_every must be positive".into()));
    }
    let mut params = init_params(spec, &mut RngStream::new(seed, StreamLabel::Init))?;
    let mut opt = OptimizerState::new(hp.optimizer, hp.lr, hp.weight_decay)?;
    let batch_size = hp.batch_size.unwrap_or(data.len());
    let full_batch = hp.batch_size.is_none() && opts.sampling == BatchSampling::Uniform;
    let strata = if opts.sampling == BatchSampling::Stratified {
        strata
    } else {
        None
    };
    let mut sampler = Sampler::new(data.len(), strata, seed);
    let mut q = match &objective {
        Objective::GroupDro { groups, .. } => {
            Some(GroupWeights::uniform_over_nonempty(groups.sizes()))
        }
        _ => None,
    };
    let mut q_history = q.as_ref().map(|q| vec![q.clone()]);
    // the untrained model is a candidate too
    on_checkpoint(0, &params)?;

    for it in 1..=opts.iters {
        let batch: Vec<usize> = if full_batch {
            (0..data.len()).collect()
        } else {
            sampler.batch(batch_size)
        };
        let xb = data.x().select_rows(&batch);
        let yb: Vec<usize> = batch.iter().map(|&i| data.y()[i]).collect();
        let b = batch.len() as f64;
        let back = params.backward_with(&xb, &yb, |logits| match &objective {
            Objective::Mean => Ok(vec![1.0 / b; batch.len()]),
            Objective::Weighted(w) => Ok(batch.iter().map(|&i| w[i] / b).collect()),
            Objective::GroupDro { groups, eta } => {
                let q = q.as_mut().expect("groupdro weights");
                let ce = cross_entropy_per_example(logits, &yb)?;
                let n_groups = groups.n_groups();
                let mut sum = vec![0.0; n_groups];
                let mut count = vec![0usize; n_groups];
                for (&i, l) in batch.iter().zip(&ce) {
                    let g = groups.group_of()[i];
                    sum[g] += l;
                    count[g] += 1;
                }
                let losses: Vec<Option<f64>> = sum
                    .iter()
                    .zip(&count)
                    .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                    .collect();
                q.update(&losses, *eta);
                Ok(batch
                    .iter()
                    .map(|&i| {
                        let g = groups.group_of()[i];
                        q.q()[g] / count[g] as f64
                    })
                    .collect())
            }
        })?;
        if !back.loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss {}", back.loss),
            });
        }
        opt.step(&mut params.blocks_mut(), &back.grads.blocks())
            .map_err(|e| Error::Diverged {
                iteration: it,
                detail: e.to_string(),
            })?;
        if let (Some(h), Some(q)) = (q_history.as_mut(), q.as_ref()) {
            h.push(q.clone());
        }
        if it % opts.eval_every == 0 || it == opts.iters {
            on_checkpoint(it, &params)?;
        }
    }
    Ok(q_history)
}

fn collecting(out: &mut Vec<Checkpoint>) -> impl FnMut(usize, &ModelParams) -> Result<()> + '_ {
    |iteration, params| {
        out.push(Checkpoint {
            iteration,
            params: params.clone(),
            val_metric: None,
        });
        Ok(())
    }
}

/// Plain cross-entropy minimisation.
pub fn erm_train(
    data: &GroupDataset,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    run(
        data,
        Objective::Mean,
        None,
        spec,
        hp,
        seed,
        opts,
        &mut collecting(&mut out),
    )?;
    Ok(out)
}

fn strata_of(groups: &GroupIndex) -> Vec<Vec<usize>> {
    (0..groups.n_groups())
        .map(|g| groups.members(g))
        .filter(|m| !m.is_empty())
        .collect()
}

fn check_groups(data: &GroupDataset, groups: &GroupIndex) -> Result<()> {
    if groups.len() != data.len() {
        return Err(Error::shape("group index", data.len(), groups.len()));
    }
    let empty = groups.empty_groups();
    if empty.len() == groups.n_groups() {
        return Err(Error::EmptyGroup("every group is empty".into()));
    }
    if !empty.is_empty() {
        warn!("dropping empty groups {empty:?}");
    }
    Ok(())
}

/// GroupDRO: exponentiated-gradient weights `q` over groups, updated from
/// per-group batch losses, and descent on the `q`-weighted loss.
///
/// Also returns `q` before the first and after every step.
pub fn groupdro_train_with_weights(
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(Vec<Checkpoint>, Vec<GroupWeights>)> {
    let mut out = Vec::new();
    let history = groupdro_stream(
        data,
        groups,
        spec,
        hp,
        seed,
        opts,
        &mut collecting(&mut out),
    )?;
    Ok((out, history))
}

fn groupdro_stream(
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
    on_checkpoint: &mut OnCheckpoint<'_>,
) -> Result<Vec<GroupWeights>> {
    check_groups(data, groups)?;
    let eta = hp
        .groupdro_eta
        .ok_or_else(|| Error::InvalidArgument("GroupDRO needs groupdro_eta".into()))?;
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "GroupDRO eta must be positive, got {eta}"
        )));
    }
    let history = run(
        data,
        Objective::GroupDro { groups, eta },
        Some(strata_of(groups)),
        spec,
        hp,
        seed,
        opts,
        on_checkpoint,
    )?;
    Ok(history.expect("groupdro history"))
}

pub fn groupdro_train(
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<Checkpoint>> {
    Ok(groupdro_train_with_weights(data, groups, spec, hp, seed, opts)?.0)
}

/// `1 / |group(i)|` per example, rescaled to mean 1.
pub fn rwg_weights(groups: &GroupIndex) -> Vec<f64> {
    let raw: Vec<f64> = groups
        .group_of()
        .iter()
        .map(|&g| 1.0 / groups.sizes()[g] as f64)
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Group re-weighting: ERM with inverse-group-size example weights.
pub fn rwg_train(
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    rwg_stream(
        data,
        groups,
        spec,
        hp,
        seed,
        opts,
        &mut collecting(&mut out),
    )?;
    Ok(out)
}

fn rwg_stream(
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
    on_checkpoint: &mut OnCheckpoint<'_>,
) -> Result<()> {
    check_groups(data, groups)?;
    let weights = rwg_weights(groups);
    let strata = Some(strata_of(groups));
    run(
        data,
        Objective::Weighted(weights),
        strata,
        spec,
        hp,
        seed,
        opts,
        on_checkpoint,
    )?;
    Ok(())
}

/// Indices keeping `min group size` examples of every non-empty group,
/// drawn without replacement, in ascending order.
pub fn subsample_groups(groups: &GroupIndex, seed: u64) -> Result<Vec<usize>> {
    let members: Vec<Vec<usize>> = strata_of(groups);
    let smallest = members
        .iter()
        .map(Vec::len)
        .min()
        .ok_or_else(|| Error::EmptyGroup("every group is empty".into()))?;
    let mut rng = RngStream::new(seed, StreamLabel::Data);
    let mut keep = Vec::with_capacity(smallest * members.len());
    for mut m in members {
        m.shuffle(&mut rng);
        keep.extend_from_slice(&m[..smallest]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Group sub-sampling: ERM on a subsample with every group cut to the
/// smallest group's size.
pub fn subg_train(
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    subg_stream(
        data,
        groups,
        spec,
        hp,
        seed,
        opts,
        &mut collecting(&mut out),
    )?;
    Ok(out)
}

fn subg_stream(
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
    on_checkpoint: &mut OnCheckpoint<'_>,
) -> Result<()> {
    check_groups(data, groups)?;
    let keep = subsample_groups(groups, seed)?;
    let sub = data.subset(&keep);
    let mut hp = hp.clone();
    if let Some(b) = hp.batch_size {
        hp.batch_size = Some(b.min(sub.len()));
    }
    let sub_groups = GroupIndex::from_labels_and_envs(
        sub.y(),
        &keep
            .iter()
            .map(|&i| groups.label_env(groups.group_of()[i]).1)
            .collect::<Vec<_>>(),
        groups.n_classes(),
        groups.n_envs(),
    )?;
    let strata = Some(strata_of(&sub_groups));
    run(
        &sub,
        Objective::Mean,
        strata,
        spec,
        &hp,
        seed,
        opts,
        on_checkpoint,
    )?;
    Ok(())
}

/// Trains `algorithm`, handing every checkpoint to `on_checkpoint` instead
/// of keeping it. `groups` is ignored by ERM.
#[allow(clippy::too_many_arguments)]
pub fn train_streaming(
    algorithm: Algorithm,
    data: &GroupDataset,
    groups: &GroupIndex,
    spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
    on_checkpoint: &mut OnCheckpoint<'_>,
) -> Result<()> {
    match algorithm {
        Algorithm::Erm => {
            run(
                data,
                Objective::Mean,
                None,
                spec,
                hp,
                seed,
                opts,
                on_checkpoint,
            )?;
            Ok(())
        }
        Algorithm::GroupDro => {
            groupdro_stream(data, groups, spec, hp, seed, opts, on_checkpoint).map(drop)
        }
        Algorithm::Rwg => rwg_stream(data, groups, spec, hp, seed, opts, on_checkpoint),
        Algorithm::Subg => subg_stream(data, groups, spec, hp, seed, opts, on_checkpoint),
    }
}
