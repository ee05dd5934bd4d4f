//! `xrm`: environment discovery and group-robust training from the shell.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use xrm_core::datasets::write_dataset_csv;
use xrm_core::harness::{
    emit_report, experiment_splits, ExperimentConfig, Pipeline, ENVIRONMENTS_FILE,
};
use xrm_core::xrm::read_environments_csv;
use xrm_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xrm",
    version,
    about = "Cross-risk minimization and group-robust training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the configured dataset and write it to <out>/dataset.csv.
    GenerateData(Common),
    /// Phase 1 only: train twins and write discovered environments.
    Xrm(Common),
    /// Phase 2 only, on environments from a previous `xrm` run when needed.
    Phase2(Common),
    /// Phase 1 (when needed), phase 2 and the report.
    Pipeline(Common),
    /// Rebuild the summary tables of a run directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults to the built-in synthetic experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, overriding the config.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::synthetic("runs/synthetic"),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir.clone_from(out);
        }
        if let Some(jobs) = self.jobs {
            config.jobs = jobs;
        }
        config.validate()?;
        Ok(config)
    }

    /// The run directory for commands that only read one.
    fn run_dir(&self) -> Result<PathBuf> {
        match (&self.out, &self.config) {
            (Some(out), _) => Ok(out.clone()),
            (None, Some(_)) => Ok(self.resolve()?.out_dir),
            (None, None) => Err(Error::InvalidArgument(
                "report needs --out or --config".into(),
            )),
        }
    }
}

fn generate_data(config: &ExperimentConfig) -> Result<()> {
    let splits = experiment_splits(config)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join("dataset.csv");
    write_dataset_csv(&path, &[&splits.train, &splits.val, &splits.test])?;
    println!(
        "wrote {} ({} train, {} val, {} test)",
        path.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn xrm(config: ExperimentConfig) -> Result<()> {
    let pipeline = Pipeline::new(config)?;
    let envs = pipeline.discover()?;
    let ones = |e: &[usize]| e.iter().filter(|&&v| v == 1).count();
    println!(
        "environments written to {}: env 1 holds {}/{} train and {}/{} val examples",
        pipeline.run_dir().join(ENVIRONMENTS_FILE).display(),
        ones(&envs.train_env),
        envs.train_env.len(),
        ones(&envs.val_env),
        envs.val_env.len()
    );
    Ok(())
}

fn phase2(config: ExperimentConfig) -> Result<()> {
    let pipeline = Pipeline::new(config)?;
    let envs = if pipeline.config().needs_discovery() {
        let path = pipeline.run_dir().join(ENVIRONMENTS_FILE);
        if !path.exists() {
            return Err(Error::MissingEnvironments(format!(
                "{} not found; run `xrm xrm` with the same config first",
                path.display()
            )));
        }
        Some(read_environments_csv(&path)?)
    } else {
        None
    };
    pipeline.run_phase2(envs.as_ref())?;
    report(pipeline.run_dir())
}

fn pipeline(config: ExperimentConfig) -> Result<()> {
    let outcome = Pipeline::new(config)?.run()?;
    info!("ground-truth reads: {:?}", outcome.audit);
    report(&outcome.run_dir)
}

fn report(run_dir: &Path) -> Result<()> {
    print!("{}", emit_report(run_dir)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => generate_data(&c.resolve()?),
        Command::Xrm(c) => xrm(c.resolve()?),
        Command::Phase2(c) => phase2(c.resolve()?),
        Command::Pipeline(c) => pipeline(c.resolve()?),
        Command::Report(c) => report(&c.run_dir()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
