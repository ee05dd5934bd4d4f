//! Experiment configuration, read from TOML. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{HyperGrid, LogUniform};
use crate::datasets::{ColorMnistConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelSpec};
use crate::numerics::OptimizerKind;
use crate::phase2::{Algorithm, TrainOptions};
use crate::xrm::XrmOptions;

/// Where phase-2 group annotations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvSourceKind {
    /// No environments: groups are classes, selection by worst-class accuracy.
    None,
    GroundTruth,
    /// Environments discovered by phase 1.
    Xrm,
}

impl EnvSourceKind {
    pub const ALL: [EnvSourceKind; 3] = [
        EnvSourceKind::None,
        EnvSourceKind::GroundTruth,
        EnvSourceKind::Xrm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvSourceKind::None => "none",
            EnvSourceKind::GroundTruth => "ground-truth",
            EnvSourceKind::Xrm => "xrm",
        }
    }
}

impl fmt::Display for EnvSourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvSourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvSourceKind::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown env source `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    ColorMnist,
    Synthetic,
    /// Pre-built splits in the CSV layout written by `generate-data`.
    Csv,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::ColorMnist => "colormnist",
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding `train-*` and optionally `t10k-*` MNIST IDX files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub colormnist: ColorMnistConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

/// Architecture without the data-dependent input and output sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, n_classes: usize) -> ModelSpec {
        match self.architecture {
            Architecture::Linear => ModelSpec::linear(input_dim, n_classes),
            Architecture::Mlp => ModelSpec::mlp(input_dim, self.hidden_dims.clone(), n_classes),
        }
    }
}

fn default_combos() -> usize {
    16
}

fn default_seeds() -> usize {
    10
}

fn default_retries() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase1Config {
    pub grid: HyperGrid,
    #[serde(default = "default_combos")]
    pub combos: usize,
    /// Seeds per combo whose logits are averaged.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Re-seeded attempts for a run that ends with a class never predicted.
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default)]
    pub xrm: XrmOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Config {
    pub algorithms: Vec<Algorithm>,
    pub env_sources: Vec<EnvSourceKind>,
    /// The `groupdro_eta` row is only used by GroupDRO.
    pub grid: HyperGrid,
    #[serde(default = "default_combos")]
    pub combos: usize,
    /// Seeds the winning combo is trained with; seed slot 0 is the search run.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub train: TrainOptions,
    /// Per-algorithm replacement for `train.iters`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub iters_override: BTreeMap<Algorithm, usize>,
}

impl Phase2Config {
    pub fn train_options(&self, algorithm: Algorithm) -> TrainOptions {
        let mut opts = self.train.clone();
        if let Some(&iters) = self.iters_override.get(&algorithm) {
            opts.iters = iters;
        }
        opts
    }
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream in the run derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive("jobs", self.jobs)?;
        positive("phase1.combos", self.phase1.combos)?;
        positive("phase1.seeds", self.phase1.seeds)?;
        positive("phase1.xrm.iters", self.phase1.xrm.iters)?;
        positive("phase2.combos", self.phase2.combos)?;
        positive("phase2.seeds", self.phase2.seeds)?;
        positive("phase2.train.iters", self.phase2.train.iters)?;
        positive("phase2.train.eval_every", self.phase2.train.eval_every)?;
        for (&a, &iters) in &self.phase2.iters_override {
            positive(&format!("phase2.iters_override.{a}"), iters)?;
        }
        self.phase1.grid.validate()?;
        self.phase2.grid.validate()?;
        if self.phase2.algorithms.is_empty() || self.phase2.env_sources.is_empty() {
            return Err(Error::Config(
                "phase2 needs at least one algorithm and env source".into(),
            ));
        }
        if self.phase2.algorithms.contains(&Algorithm::GroupDro)
            && self.phase2.grid.groupdro_eta.is_none()
        {
            return Err(Error::Config(
                "GroupDRO needs a phase2.grid.groupdro_eta row".into(),
            ));
        }
        match self.dataset.kind {
            DatasetKind::ColorMnist => {
                if self.dataset.mnist_dir.is_none() {
                    return Err(Error::Config("colormnist needs dataset.mnist_dir".into()));
                }
                self.dataset.colormnist.validate()?;
            }
            DatasetKind::Synthetic => self.dataset.synthetic.validate()?,
            DatasetKind::Csv => {
                if self.dataset.csv.is_none() {
                    return Err(Error::Config("csv datasets need dataset.csv".into()));
                }
            }
        }
        if self.model.architecture == Architecture::Linear && !self.model.hidden_dims.is_empty() {
            return Err(Error::Config("linear models take no hidden_dims".into()));
        }
        Ok(())
    }

    /// Whether phase 1 has to run.
    pub fn needs_discovery(&self) -> bool {
        self.phase2.env_sources.contains(&EnvSourceKind::Xrm)
    }

    /// Full ColorMNIST protocol: MLP `[392, 300, 300, 2]`, Adam at 1e-3,
    /// 16 combos × 10 seeds in both phases, all four algorithms.
    pub fn colormnist(mnist_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        let adam_grid = |batch: Option<LogUniform>| HyperGrid {
            lr: LogUniform::pow10(-3.0, -3.0),
            weight_decay: LogUniform::pow10(-6.0, -3.0),
            batch_size: batch,
            groupdro_eta: None,
            optimizer: OptimizerKind::adam(),
        };
        Self {
            seed: 0,
            out_dir: out_dir.into(),
            jobs: 1,
            dataset: DatasetConfig {
                kind: DatasetKind::ColorMnist,
                mnist_dir: Some(mnist_dir.into()),
                csv: None,
                colormnist: ColorMnistConfig::default(),
                synthetic: SyntheticConfig::default(),
            },
            model: ModelConfig {
                architecture: Architecture::Mlp,
                hidden_dims: vec![300, 300],
            },
            phase1: Phase1Config {
                grid: adam_grid(None),
                combos: 16,
                seeds: 10,
                retries: 3,
                xrm: XrmOptions {
                    iters: 100,
                    ..XrmOptions::default()
                },
            },
            phase2: Phase2Config {
                algorithms: Algorithm::ALL.to_vec(),
                env_sources: vec![EnvSourceKind::None, EnvSourceKind::Xrm],
                grid: adam_grid(Some(LogUniform::pow2(6.0, 7.0))).with_groupdro_eta(),
                combos: 16,
                seeds: 10,
                train: TrainOptions {
                    iters: 4000,
                    ..TrainOptions::default()
                },
                iters_override: BTreeMap::from([(Algorithm::Erm, 20_000)]),
            },
        }
    }

    /// Synthetic two-feature group shift with a linear model, the default
    /// search grid and a short budget.
    pub fn synthetic(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            out_dir: out_dir.into(),
            jobs: 1,
            dataset: DatasetConfig {
                kind: DatasetKind::Synthetic,
                mnist_dir: None,
                csv: None,
                colormnist: ColorMnistConfig::default(),
                synthetic: SyntheticConfig::default(),
            },
            model: ModelConfig {
                architecture: Architecture::Linear,
                hidden_dims: Vec::new(),
            },
            phase1: Phase1Config {
                grid: HyperGrid {
                    lr: LogUniform::pow10(-2.5, -2.0),
                    ..HyperGrid::default_grid()
                },
                combos: 4,
                seeds: 2,
                retries: 3,
                xrm: XrmOptions {
                    iters: 300,
                    ..XrmOptions::default()
                },
            },
            phase2: Phase2Config {
                algorithms: Algorithm::ALL.to_vec(),
                env_sources: EnvSourceKind::ALL.to_vec(),
                grid: HyperGrid {
                    lr: LogUniform::pow10(-2.5, -2.0),
                    ..HyperGrid::default_grid().with_groupdro_eta()
                },
                combos: 2,
                seeds: 2,
                train: TrainOptions {
                    iters: 300,
                    ..TrainOptions::default()
                },
                iters_override: BTreeMap::new(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for config in [
            ExperimentConfig::colormnist("data/mnist", "runs/cm"),
            ExperimentConfig::synthetic("runs/syn"),
        ] {
            config.validate().unwrap();
            let text = config.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), config);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::synthetic("x").to_toml_string().unwrap();
        let bad = text.replacen("jobs = 1", "jobs = 1\nflavour = \"mint\"", 1);
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("flavour"), "{err}");

        let bad = text.replacen("[phase1]", "[phase1]\nseedz = 3", 1);
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn zero_counts_and_bad_grids_are_rejected() {
        let mut c = ExperimentConfig::synthetic("x");
        c.phase2.seeds = 0;
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::synthetic("x");
        c.phase1.grid.lr = LogUniform::pow10(-2.0, -4.0);
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::synthetic("x");
        c.phase2.grid.groupdro_eta = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn iteration_overrides_apply_per_algorithm() {
        let c = ExperimentConfig::colormnist("d", "o");
        assert_eq!(c.phase2.train_options(Algorithm::Erm).iters, 20_000);
        assert_eq!(c.phase2.train_options(Algorithm::GroupDro).iters, 4000);
    }

    #[test]
    fn env_source_names_round_trip() {
        for e in EnvSourceKind::ALL {
            assert_eq!(e.as_str().parse::<EnvSourceKind>().unwrap(), e);
        }
    }
}
