//! Configuration, hyper-parameter search, seed orchestration and reports.

mod config;
mod data;
mod params;
mod pipeline;
mod report;

pub use config::{
    DatasetConfig, DatasetKind, EnvSourceKind, ExperimentConfig, ModelConfig, Phase1Config,
    Phase2Config,
};
pub use data::{experiment_splits, load_mnist_dir, load_splits, Splits};
pub use params::{sample_hyperparams, HyperGrid, HyperParams, LogUniform};
pub use pipeline::{
    mean_std, run_pipeline, Audit, CellOutcome, Pipeline, PipelineOutcome, CONFIG_FILE,
    ENVIRONMENTS_FILE,
};
pub use report::{emit_report, spearman};
