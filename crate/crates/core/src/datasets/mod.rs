//! Group-shift datasets: features, labels, optional ground-truth
//! environments, and the `(label, environment)` group structure.
//!
//! Ground-truth environments sit behind [`GroupDataset::ground_truth_env`],
//! which bumps a shared read counter. Callers on the discovery path can
//! therefore prove they never consulted the annotations.

mod colormnist;
mod csv_io;
mod idx;
mod synthetic;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use colormnist::{color_of, colormnist_source_indices, generate_colormnist, ColorMnistConfig};
pub use csv_io::{read_dataset_csv, write_dataset_csv};
pub use idx::{load_idx, RawImages};
pub use synthetic::{generate_synthetic_groupshift, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupDataset {
    x: Matrix,
    y: Vec<usize>,
    env: Option<Vec<usize>>,
    split: Split,
    n_classes: usize,
    n_envs: usize,
    env_reads: Arc<AtomicUsize>,
}

impl GroupDataset {
    pub fn new(
        x: Matrix,
        y: Vec<usize>,
        env: Option<Vec<usize>>,
        split: Split,
        n_classes: usize,
        n_envs: usize,
    ) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::shape("dataset labels", x.rows(), y.len()));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if let Some(env) = &env {
            if env.len() != y.len() {
                return Err(Error::shape("dataset environments", y.len(), env.len()));
            }
            if let Some(&bad) = env.iter().find(|&&v| v >= n_envs) {
                return Err(Error::InvalidArgument(format!(
                    "environment {bad} outside [0, {n_envs})"
                )));
            }
        }
        x.ensure_finite("dataset features")?;
        Ok(Self {
            x,
            y,
            env,
            split,
            n_classes,
            n_envs,
            env_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_envs(&self) -> usize {
        self.n_envs
    }

    /// Whether ground-truth annotations exist; does not count as a read.
    pub fn has_ground_truth_env(&self) -> bool {
        self.env.is_some()
    }

    /// Ground-truth environment annotations. Every call is counted.
    pub fn ground_truth_env(&self) -> Option<&[usize]> {
        self.env_reads.fetch_add(1, Ordering::SeqCst);
        self.env.as_deref()
    }

    /// Number of [`Self::ground_truth_env`] calls on this dataset and on
    /// every subset or clone derived from it.
    pub fn ground_truth_reads(&self) -> usize {
        self.env_reads.load(Ordering::SeqCst)
    }

    pub(crate) fn env_unaudited(&self) -> Option<&[usize]> {
        self.env.as_deref()
    }

    /// Rows `indices`, in order. Shares the audit counter with `self`.
    pub fn subset(&self, indices: &[usize]) -> GroupDataset {
        GroupDataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            env: self
                .env
                .as_ref()
                .map(|e| indices.iter().map(|&i| e[i]).collect()),
            split: self.split,
            n_classes: self.n_classes,
            n_envs: self.n_envs,
            env_reads: Arc::clone(&self.env_reads),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }
}

/// Where group environments come from.
#[derive(Debug, Clone, Copy)]
pub enum EnvSource<'a> {
    GroundTruth,
    /// One environment id per example, e.g. from cross-mistake discovery.
    Discovered {
        env: &'a [usize],
        n_envs: usize,
    },
}

/// Dense `(label, environment)` group ids: `group = label · n_envs + env`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupIndex {
    group_of: Vec<usize>,
    sizes: Vec<usize>,
    n_classes: usize,
    n_envs: usize,
}

impl GroupIndex {
    pub fn from_labels_and_envs(
        labels: &[usize],
        env: &[usize],
        n_classes: usize,
        n_envs: usize,
    ) -> Result<Self> {
        if labels.len() != env.len() {
            return Err(Error::shape("group environments", labels.len(), env.len()));
        }
        let mut sizes = vec![0; n_classes * n_envs];
        let mut group_of = Vec::with_capacity(labels.len());
        for (&y, &e) in labels.iter().zip(env) {
            if y >= n_classes || e >= n_envs {
                return Err(Error::InvalidArgument(format!(
                    "(label {y}, env {e}) outside {n_classes}x{n_envs} groups"
                )));
            }
            let g = y * n_envs + e;
            sizes[g] += 1;
            group_of.push(g);
        }
        Ok(Self {
            group_of,
            sizes,
            n_classes,
            n_envs,
        })
    }

    /// One group per class; what evaluation falls back to without environments.
    pub fn classes_only(labels: &[usize], n_classes: usize) -> Self {
        Self::from_labels_and_envs(labels, &vec![0; labels.len()], n_classes, 1)
            .expect("labels already validated")
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_envs(&self) -> usize {
        self.n_envs
    }

    pub fn label_env(&self, group: usize) -> (usize, usize) {
        (group / self.n_envs, group % self.n_envs)
    }

    pub fn empty_groups(&self) -> Vec<usize> {
        (0..self.sizes.len())
            .filter(|&g| self.sizes[g] == 0)
            .collect()
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&i| self.group_of[i] == group)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }
}

/// Groups of `dataset` under the chosen environment source. Empty groups are
/// kept (with size 0) and logged.
pub fn group_index(dataset: &GroupDataset, source: EnvSource<'_>) -> Result<GroupIndex> {
    let index = match source {
        EnvSource::GroundTruth => {
            let env = dataset.ground_truth_env().ok_or_else(|| {
                Error::MissingEnvironments(format!(
                    "{} split has no ground-truth environments",
                    dataset.split()
                ))
            })?;
            GroupIndex::from_labels_and_envs(
                dataset.y(),
                env,
                dataset.n_classes(),
                dataset.n_envs(),
            )?
        }
        EnvSource::Discovered { env, n_envs } => {
            GroupIndex::from_labels_and_envs(dataset.y(), env, dataset.n_classes(), n_envs)?
        }
    };
    let empty = index.empty_groups();
    if !empty.is_empty() {
        warn!("{} split: groups {empty:?} are empty", dataset.split());
    }
    Ok(index)
}
