//! Building the train / validation / test splits a config asks for.

use std::path::Path;

use super::config::{DatasetConfig, DatasetKind, ExperimentConfig};
use crate::datasets::{
    generate_colormnist, generate_synthetic_groupshift, load_idx, read_dataset_csv, GroupDataset,
    RawImages, Split,
};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

/// Seed-stream prefix of dataset generation.
pub(crate) const STAGE_DATA: u64 = 0;

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: GroupDataset,
    pub val: GroupDataset,
    pub test: GroupDataset,
}

/// Loads `train-*` and, when present, `t10k-*` IDX pairs from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<RawImages> {
    let pair = |prefix: &str| {
        (
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    };
    let (images, labels) = pair("train");
    let mut raw = load_idx(&images, &labels)?;
    let (images, labels) = pair("t10k");
    if images.exists() && labels.exists() {
        raw.extend(load_idx(&images, &labels)?)?;
    }
    Ok(raw)
}

/// The splits of an experiment, generated from its master seed.
pub fn experiment_splits(config: &ExperimentConfig) -> Result<Splits> {
    load_splits(&config.dataset, derive_seed(config.seed, &[STAGE_DATA]))
}

pub fn load_splits(config: &DatasetConfig, seed: u64) -> Result<Splits> {
    let (train, val, test) = match config.kind {
        DatasetKind::ColorMnist => {
            let dir = config
                .mnist_dir
                .as_deref()
                .ok_or_else(|| Error::Config("colormnist needs dataset.mnist_dir".into()))?;
            let raw = load_mnist_dir(dir)?;
            generate_colormnist(&raw, &config.colormnist, seed)?
        }
        DatasetKind::Synthetic => generate_synthetic_groupshift(&config.synthetic, seed)?,
        DatasetKind::Csv => {
            let path = config
                .csv
                .as_deref()
                .ok_or_else(|| Error::Config("csv datasets need dataset.csv".into()))?;
            let mut splits = read_dataset_csv(path)?.into_iter();
            let mut next = |want: Split| {
                splits
                    .next()
                    .filter(|d| d.split() == want)
                    .ok_or_else(|| Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("missing {want} split"),
                    })
            };
            (next(Split::Train)?, next(Split::Val)?, next(Split::Test)?)
        }
    };
    Ok(Splits { train, val, test })
}
