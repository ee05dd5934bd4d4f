//! The end-to-end protocol: phase-1 discovery, phase-2 search over
//! hyper-parameter combos, re-runs of each winner, and test evaluation
//! against ground-truth groups.
//!
//! Everything lands in plain files under the run directory:
//!
//! ```text
//! config.toml
//! phase1/  runs.csv  flip_trajectories.csv  selection.json
//! envs/    environments.csv
//! phase2/  <algorithm>_<env-source>/  search.csv  val_trajectories.csv  results.csv  per_group.csv
//! report/  written by `emit_report`
//! ```
//!
//! Finished stages are reused on the next run over the same directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EnvSourceKind, ExperimentConfig};
use super::data::{experiment_splits, Splits};
use super::params::{sample_hyperparams, HyperParams};
use super::report::emit_report;
use crate::datasets::{group_index, EnvSource, GroupDataset, GroupIndex};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::numerics::{derive_seed, RngStream, StreamLabel};
use crate::phase2::{
    argmax_earliest, train_streaming, worst_group_accuracy, Algorithm, BestCheckpoint, Checkpoint,
    Criterion, ResultRow,
};
use crate::xrm::{
    read_environments_csv, select_twins, write_environments_csv, xrm_train, DiscoveredEnvironments,
    TwinRun,
};

const STAGE_PHASE1: u64 = 1;
const STAGE_PHASE2: u64 = 2;

pub const CONFIG_FILE: &str = "config.toml";
pub const ENVIRONMENTS_FILE: &str = "envs/environments.csv";

/// Ground-truth environment reads per split, for proving the discovery
/// path never consults annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Audit {
    pub train_reads: usize,
    pub val_reads: usize,
    /// Test reads just before the first test evaluation.
    pub test_reads_before_eval: Option<usize>,
    pub test_reads: usize,
}

impl Audit {
    /// No train or validation annotation was read, and test annotations
    /// only during final evaluation.
    pub fn annotation_free(&self) -> bool {
        self.train_reads == 0
            && self.val_reads == 0
            && self.test_reads_before_eval.unwrap_or(0) == 0
    }
}

/// Test results of one (algorithm, env-source) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub algorithm: Algorithm,
    pub env_source: EnvSourceKind,
    /// One row per seed of the winning combo.
    pub rows: Vec<ResultRow>,
}

impl CellOutcome {
    pub fn test_wgas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.test_wga).collect()
    }

    pub fn mean_test_wga(&self) -> f64 {
        mean_std(&self.test_wgas()).0
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub environments: Option<DiscoveredEnvironments>,
    pub cells: Vec<CellOutcome>,
    pub audit: Audit,
}

impl PipelineOutcome {
    pub fn cell(&self, algorithm: Algorithm, env_source: EnvSourceKind) -> Option<&CellOutcome> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.env_source == env_source)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Phase1RunRow {
    combo: usize,
    seed_slot: usize,
    attempts: usize,
    seed: u64,
    lr: f64,
    weight_decay: f64,
    batch_size: Option<usize>,
    flip_fraction: f64,
    degenerate: bool,
    used: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FlipRow {
    pub combo: usize,
    pub seed_slot: usize,
    pub iteration: usize,
    pub flip_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Phase1Selection {
    pub combo: usize,
    pub hp: HyperParams,
    pub mean_flip_fractions: Vec<Option<f64>>,
    pub seeds_averaged: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SearchRow {
    combo: usize,
    lr: f64,
    weight_decay: f64,
    batch_size: Option<usize>,
    groupdro_eta: Option<f64>,
    best_iteration: usize,
    val_metric: f64,
    selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ValRow {
    combo: usize,
    seed_slot: usize,
    iteration: usize,
    val_metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct PerGroupRow {
    pub seed_slot: usize,
    pub group: usize,
    pub label: usize,
    pub env: usize,
    pub accuracy: Option<f64>,
}

struct Phase1Run {
    row: Phase1RunRow,
    trajectory: Vec<f64>,
    twin: Option<TwinRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cell {
    algorithm: Algorithm,
    env_source: EnvSourceKind,
}

impl Cell {
    fn dir_name(self) -> String {
        format!("{}_{}", self.algorithm, self.env_source)
    }

    fn stage(self) -> String {
        format!("phase2 {}/{}", self.algorithm, self.env_source)
    }
}

/// Training runs whose outcome does not depend on the env source share a
/// variant: ERM ignores groups, so all its cells train identical models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Variant {
    algorithm: Algorithm,
    groups: Option<EnvSourceKind>,
}

impl Variant {
    fn of(cell: Cell) -> Self {
        Self {
            algorithm: cell.algorithm,
            groups: (cell.algorithm != Algorithm::Erm).then_some(cell.env_source),
        }
    }
}

/// Selection context for one cell: validation groups and criterion.
struct Selection {
    criterion: Criterion,
    val_groups: GroupIndex,
}

struct TaskResult {
    /// Best checkpoint and validation trajectory, per cell of the task.
    per_cell: Vec<(Checkpoint, Vec<(usize, f64)>)>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// A configured run over loaded data.
pub struct Pipeline {
    config: ExperimentConfig,
    splits: Splits,
    spec: ModelSpec,
    pool: rayon::ThreadPool,
    test_reads_before_eval: std::sync::Mutex<Option<usize>>,
}

impl Pipeline {
    /// Validates the config, generates or loads the data and prepares the
    /// run directory. A directory holding a different config is refused.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let splits = experiment_splits(&config).map_err(|e| e.in_stage("data"))?;
        let spec = config
            .model
            .spec(splits.train.dim(), splits.train.n_classes());
        spec.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let pipeline = Self {
            config,
            splits,
            spec,
            pool,
            test_reads_before_eval: std::sync::Mutex::new(None),
        };
        pipeline.prepare_run_dir()?;
        Ok(pipeline)
    }

    fn prepare_run_dir(&self) -> Result<()> {
        let dir = self.run_dir();
        fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        // jobs and the output path do not change results
        let normalised = |c: &ExperimentConfig| {
            let mut c = c.clone();
            c.jobs = 1;
            c.out_dir = PathBuf::new();
            c
        };
        if path.exists() {
            let previous = ExperimentConfig::load(&path)?;
            if normalised(&previous) != normalised(&self.config) {
                return Err(Error::Config(format!(
                    "{} was produced by a different config; use a fresh output directory",
                    dir.display()
                )));
            }
        }
        fs::write(&path, self.config.to_toml_string()?)?;
        Ok(())
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn audit(&self) -> Audit {
        Audit {
            train_reads: self.splits.train.ground_truth_reads(),
            val_reads: self.splits.val.ground_truth_reads(),
            test_reads_before_eval: *self.test_reads_before_eval.lock().expect("audit lock"),
            test_reads: self.splits.test.ground_truth_reads(),
        }
    }

    /// Phase 1: twin training over `combos × seeds`, selection by mean flip
    /// fraction, and cross-mistake environments for train and validation.
    /// Reads features and labels only. Reuses `envs/environments.csv` when
    /// present.
    pub fn discover(&self) -> Result<DiscoveredEnvironments> {
        let env_path = self.run_dir().join(ENVIRONMENTS_FILE);
        if env_path.exists() {
            let envs = read_environments_csv(&env_path).map_err(|e| e.in_stage("phase1"))?;
            if envs.train_env.len() != self.splits.train.len()
                || envs.val_env.len() != self.splits.val.len()
            {
                return Err(Error::Format {
                    path: env_path,
                    detail: "environment counts do not match the data".into(),
                }
                .in_stage("phase1"));
            }
            info!("reusing environments from {}", env_path.display());
            return Ok(envs);
        }
        self.run_phase1().map_err(|e| e.in_stage("phase1"))
    }

    fn phase1_hp(&self, combo: usize) -> Result<HyperParams> {
        let seed = derive_seed(self.config.seed, &[STAGE_PHASE1, combo as u64]);
        sample_hyperparams(
            &self.config.phase1.grid,
            &mut RngStream::new(seed, StreamLabel::Search),
        )
    }

    fn phase1_task(&self, combo: usize, slot: usize, hp: &HyperParams) -> Result<Phase1Run> {
        let p1 = &self.config.phase1;
        let train = &self.splits.train;
        let mut failed = None;
        for attempt in 0..=p1.retries {
            let seed = derive_seed(
                self.config.seed,
                &[STAGE_PHASE1, combo as u64, slot as u64, attempt as u64],
            );
            let mut row = Phase1RunRow {
                combo,
                seed_slot: slot,
                attempts: attempt + 1,
                seed,
                lr: hp.lr,
                weight_decay: hp.weight_decay,
                batch_size: hp.batch_size,
                flip_fraction: f64::NAN,
                degenerate: false,
                used: false,
            };
            match xrm_train(train, &self.spec, hp, seed, &p1.xrm) {
                Ok(state) => {
                    row.flip_fraction = state.flip_fraction();
                    row.degenerate = state.degenerate;
                    if state.degenerate {
                        warn!("phase1 combo {combo} seed {slot}: a class is below chance held-out; re-seeding");
                        failed = Some(Phase1Run {
                            row,
                            trajectory: state.flip_trajectory,
                            twin: None,
                        });
                        continue;
                    }
                    row.used = true;
                    let twin = TwinRun {
                        flip_fraction: row.flip_fraction,
                        train_logits: state.logits(train.x())?,
                        val_logits: state.logits(self.splits.val.x())?,
                    };
                    return Ok(Phase1Run {
                        row,
                        trajectory: state.flip_trajectory,
                        twin: Some(twin),
                    });
                }
                Err(
                    e @ (Error::Diverged { .. }
                    | Error::CalibrationDiverged { .. }
                    | Error::HoldoutExhausted { .. }),
                ) => {
                    warn!("phase1 combo {combo} seed {slot} attempt {attempt}: {e}");
                    failed = Some(Phase1Run {
                        row,
                        trajectory: Vec::new(),
                        twin: None,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(failed.expect("at least one attempt"))
    }

    fn run_phase1(&self) -> Result<DiscoveredEnvironments> {
        let p1 = &self.config.phase1;
        let hps: Vec<HyperParams> = (0..p1.combos)
            .map(|c| self.phase1_hp(c))
            .collect::<Result<_>>()?;
        let tasks: Vec<(usize, usize)> = (0..p1.combos)
            .flat_map(|c| (0..p1.seeds).map(move |s| (c, s)))
            .collect();
        info!("phase1: {} twin runs", tasks.len());
        let runs: Vec<Phase1Run> = self.pool.install(|| {
            tasks
                .par_iter()
                .map(|&(c, s)| self.phase1_task(c, s, &hps[c]))
                .collect::<Result<_>>()
        })?;

        let dir = self.run_dir().join("phase1");
        fs::create_dir_all(&dir)?;
        let rows: Vec<Phase1RunRow> = runs.iter().map(|r| r.row.clone()).collect();
        write_csv(&dir.join("runs.csv"), &rows)?;
        let flips: Vec<FlipRow> = runs
            .iter()
            .flat_map(|r| {
                r.trajectory.iter().enumerate().map(move |(i, &f)| FlipRow {
                    combo: r.row.combo,
                    seed_slot: r.row.seed_slot,
                    iteration: i,
                    flip_fraction: f,
                })
            })
            .collect();
        write_csv(&dir.join("flip_trajectories.csv"), &flips)?;

        let mut combos: Vec<(HyperParams, Vec<TwinRun>)> =
            hps.into_iter().map(|h| (h, Vec::new())).collect();
        for run in runs {
            if let Some(twin) = run.twin {
                combos[run.row.combo].1.push(twin);
            }
        }
        let selection = select_twins(&combos)?;
        info!(
            "phase1: combo {} selected (mean flip fraction {:?})",
            selection.combo, selection.mean_flip_fractions[selection.combo]
        );
        let summary = Phase1Selection {
            combo: selection.combo,
            hp: selection.hp.clone(),
            mean_flip_fractions: selection.mean_flip_fractions.clone(),
            seeds_averaged: selection.seeds_averaged,
        };
        fs::write(
            dir.join("selection.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;

        let envs = selection.discover(self.splits.train.y(), self.splits.val.y())?;
        let env_path = self.run_dir().join(ENVIRONMENTS_FILE);
        fs::create_dir_all(env_path.parent().expect("envs dir"))?;
        write_environments_csv(&env_path, &envs, self.splits.train.y(), self.splits.val.y())?;
        Ok(envs)
    }

    fn training_groups(
        &self,
        source: EnvSourceKind,
        envs: Option<&DiscoveredEnvironments>,
    ) -> Result<GroupIndex> {
        groups_for(
            &self.splits.train,
            source,
            envs.map(|e| e.train_env.as_slice()),
        )
    }

    fn selection(
        &self,
        source: EnvSourceKind,
        envs: Option<&DiscoveredEnvironments>,
    ) -> Result<Selection> {
        let val = &self.splits.val;
        let val_groups = groups_for(val, source, envs.map(|e| e.val_env.as_slice()))?;
        let criterion = match source {
            EnvSourceKind::None => Criterion::WorstClass,
            _ => Criterion::WorstGroup,
        };
        Ok(Selection {
            criterion,
            val_groups,
        })
    }

    fn phase2_hp(&self, algorithm: Algorithm, combo: usize) -> Result<HyperParams> {
        let seed = derive_seed(
            self.config.seed,
            &[STAGE_PHASE2, algorithm as u64, combo as u64],
        );
        let mut hp = sample_hyperparams(
            &self.config.phase2.grid,
            &mut RngStream::new(seed, StreamLabel::Search),
        )?;
        if algorithm != Algorithm::GroupDro {
            hp.groupdro_eta = None;
        }
        Ok(hp)
    }

    fn phase2_seed(&self, algorithm: Algorithm, combo: usize, slot: usize) -> u64 {
        derive_seed(
            self.config.seed,
            &[STAGE_PHASE2, algorithm as u64, combo as u64, slot as u64],
        )
    }

    fn train_task(
        &self,
        variant: Variant,
        groups: &GroupIndex,
        selections: &[&Selection],
        hp: &HyperParams,
        seed: u64,
    ) -> Result<TaskResult> {
        let val = &self.splits.val;
        let mut trackers: Vec<BestCheckpoint<'_>> = selections
            .iter()
            .map(|s| BestCheckpoint::new(s.criterion, val, &s.val_groups))
            .collect();
        let opts = self.config.phase2.train_options(variant.algorithm);
        train_streaming(
            variant.algorithm,
            &self.splits.train,
            groups,
            &self.spec,
            hp,
            seed,
            &opts,
            &mut |iteration, params| {
                for t in trackers.iter_mut() {
                    t.observe(iteration, params)?;
                }
                Ok(())
            },
        )?;
        let per_cell = trackers
            .into_iter()
            .map(|t| {
                let trajectory = t.trajectory().to_vec();
                (t.into_best().expect("at least one checkpoint"), trajectory)
            })
            .collect();
        Ok(TaskResult { per_cell })
    }

    /// Runs every phase-2 cell that has no results yet. Cells of one variant
    /// are searched, re-run and evaluated together before the next variant
    /// starts, so an error leaves earlier cells on disk.
    pub fn run_phase2(&self, envs: Option<&DiscoveredEnvironments>) -> Result<Vec<CellOutcome>> {
        let p2 = &self.config.phase2;
        let mut outcomes = BTreeMap::new();
        let mut variants: BTreeMap<Variant, Vec<Cell>> = BTreeMap::new();
        for &algorithm in &p2.algorithms {
            for &env_source in &p2.env_sources {
                let cell = Cell {
                    algorithm,
                    env_source,
                };
                let results = self.cell_dir(cell).join("results.csv");
                if results.exists() {
                    info!("reusing {}", results.display());
                    let rows = read_csv(&results).map_err(|e| e.in_stage(cell.stage()))?;
                    outcomes.insert(
                        (algorithm, env_source),
                        CellOutcome {
                            algorithm,
                            env_source,
                            rows,
                        },
                    );
                } else {
                    variants.entry(Variant::of(cell)).or_default().push(cell);
                }
            }
        }
        for (variant, cells) in variants {
            let stage = cells[0].stage();
            let done = self
                .run_variant(variant, &cells, envs)
                .map_err(|e| e.in_stage(stage))?;
            for outcome in done {
                outcomes.insert((outcome.algorithm, outcome.env_source), outcome);
            }
        }
        // config order
        Ok(p2
            .algorithms
            .iter()
            .flat_map(|&a| p2.env_sources.iter().map(move |&e| (a, e)))
            .filter_map(|k| outcomes.remove(&k))
            .collect())
    }

    fn cell_dir(&self, cell: Cell) -> PathBuf {
        self.run_dir().join("phase2").join(cell.dir_name())
    }

    fn run_variant(
        &self,
        variant: Variant,
        cells: &[Cell],
        envs: Option<&DiscoveredEnvironments>,
    ) -> Result<Vec<CellOutcome>> {
        let p2 = &self.config.phase2;
        let groups = match variant.groups {
            Some(source) => self.training_groups(source, envs)?,
            None => crate::datasets::GroupIndex::classes_only(
                self.splits.train.y(),
                self.splits.train.n_classes(),
            ),
        };
        let selections: Vec<Selection> = cells
            .iter()
            .map(|c| self.selection(c.env_source, envs))
            .collect::<Result<_>>()?;
        let hps: Vec<HyperParams> = (0..p2.combos)
            .map(|c| self.phase2_hp(variant.algorithm, c))
            .collect::<Result<_>>()?;
        info!(
            "{}: searching {} combos for {} cell(s)",
            variant.algorithm,
            p2.combos,
            cells.len()
        );

        // search: slot 0 of every combo, scored for every cell at once
        let all: Vec<&Selection> = selections.iter().collect();
        let search: Vec<TaskResult> = self.pool.install(|| {
            (0..p2.combos)
                .into_par_iter()
                .map(|c| {
                    self.train_task(
                        variant,
                        &groups,
                        &all,
                        &hps[c],
                        self.phase2_seed(variant.algorithm, c, 0),
                    )
                })
                .collect::<Result<_>>()
        })?;
        let winners: Vec<usize> = (0..cells.len())
            .map(|k| {
                let scores: Vec<f64> = search
                    .iter()
                    .map(|t| t.per_cell[k].0.val_metric.unwrap_or(f64::NEG_INFINITY))
                    .collect();
                argmax_earliest(&scores)
            })
            .collect();

        // re-runs: cells that picked the same combo share them
        let mut rerun_keys: Vec<(usize, usize)> = Vec::new();
        for &combo in &winners {
            for slot in 1..p2.seeds {
                if !rerun_keys.contains(&(combo, slot)) {
                    rerun_keys.push((combo, slot));
                }
            }
        }
        let reruns: Vec<TaskResult> = self.pool.install(|| {
            rerun_keys
                .par_iter()
                .map(|&(combo, slot)| {
                    let members: Vec<&Selection> = (0..cells.len())
                        .filter(|&k| winners[k] == combo)
                        .map(|k| &selections[k])
                        .collect();
                    self.train_task(
                        variant,
                        &groups,
                        &members,
                        &hps[combo],
                        self.phase2_seed(variant.algorithm, combo, slot),
                    )
                })
                .collect::<Result<_>>()
        })?;

        // final evaluation against ground-truth test groups
        {
            let mut first = self.test_reads_before_eval.lock().expect("audit lock");
            if first.is_none() {
                *first = Some(self.splits.test.ground_truth_reads());
            }
        }
        let test = &self.splits.test;
        let test_groups = group_index(test, EnvSource::GroundTruth)?;

        let mut outcomes = Vec::with_capacity(cells.len());
        for (k, &cell) in cells.iter().enumerate() {
            let combo = winners[k];
            let mut picked: Vec<(usize, &Checkpoint, &[(usize, f64)])> =
                Vec::with_capacity(p2.seeds);
            let (cp, traj) = &search[combo].per_cell[k];
            picked.push((0, cp, traj));
            for (key, task) in rerun_keys.iter().zip(&reruns) {
                if key.0 == combo {
                    // position of this cell among the cells sharing the combo
                    let pos = (0..k).filter(|&j| winners[j] == combo).count();
                    let (cp, traj) = &task.per_cell[pos];
                    picked.push((key.1, cp, traj));
                }
            }
            picked.sort_by_key(|p| p.0);

            let dir = self.cell_dir(cell);
            fs::create_dir_all(&dir)?;
            let search_rows: Vec<SearchRow> = search
                .iter()
                .enumerate()
                .map(|(c, t)| SearchRow {
                    combo: c,
                    lr: hps[c].lr,
                    weight_decay: hps[c].weight_decay,
                    batch_size: hps[c].batch_size,
                    groupdro_eta: hps[c].groupdro_eta,
                    best_iteration: t.per_cell[k].0.iteration,
                    val_metric: t.per_cell[k].0.val_metric.unwrap_or(f64::NAN),
                    selected: c == combo,
                })
                .collect();
            write_csv(&dir.join("search.csv"), &search_rows)?;
            let mut val_rows: Vec<ValRow> = search
                .iter()
                .enumerate()
                .flat_map(|(c, t)| {
                    t.per_cell[k]
                        .1
                        .iter()
                        .map(move |&(iteration, val_metric)| ValRow {
                            combo: c,
                            seed_slot: 0,
                            iteration,
                            val_metric,
                        })
                })
                .collect();
            for &(slot, _, traj) in picked.iter().filter(|p| p.0 > 0) {
                val_rows.extend(traj.iter().map(|&(iteration, val_metric)| ValRow {
                    combo,
                    seed_slot: slot,
                    iteration,
                    val_metric,
                }));
            }
            write_csv(&dir.join("val_trajectories.csv"), &val_rows)?;

            let mut rows = Vec::with_capacity(picked.len());
            let mut per_group = Vec::new();
            for &(slot, cp, _) in &picked {
                let preds = cp.params.predict(test.x())?;
                let acc = worst_group_accuracy(&preds, test.y(), &test_groups)?;
                for (g, a) in acc.per_group.iter().enumerate() {
                    let (label, env) = test_groups.label_env(g);
                    per_group.push(PerGroupRow {
                        seed_slot: slot,
                        group: g,
                        label,
                        env,
                        accuracy: *a,
                    });
                }
                rows.push(ResultRow {
                    dataset: self.config.dataset.kind.as_str().to_string(),
                    algorithm: cell.algorithm.to_string(),
                    env_source: cell.env_source.to_string(),
                    hp_id: combo,
                    seed: self.phase2_seed(cell.algorithm, combo, slot),
                    iteration: cp.iteration,
                    val_metric: cp.val_metric.unwrap_or(f64::NAN),
                    test_wga: acc.worst,
                    per_group_accs: ResultRow::format_per_group(&acc.per_group),
                });
            }
            write_csv(&dir.join("per_group.csv"), &per_group)?;
            // results.csv last: its presence marks the cell as finished
            write_csv(&dir.join("results.csv"), &rows)?;
            let (mean, std) = mean_std(&rows.iter().map(|r| r.test_wga).collect::<Vec<_>>());
            info!(
                "{}/{}: test worst-group accuracy {mean:.4} ± {std:.4}",
                cell.algorithm, cell.env_source
            );
            outcomes.push(CellOutcome {
                algorithm: cell.algorithm,
                env_source: cell.env_source,
                rows,
            });
        }
        Ok(outcomes)
    }

    /// Phase 1 when needed, then phase 2, then the report.
    pub fn run(&self) -> Result<PipelineOutcome> {
        let environments = if self.config.needs_discovery() {
            Some(self.discover()?)
        } else {
            None
        };
        let cells = self.run_phase2(environments.as_ref())?;
        emit_report(self.run_dir()).map_err(|e| e.in_stage("report"))?;
        Ok(PipelineOutcome {
            run_dir: self.run_dir().to_path_buf(),
            environments,
            cells,
            audit: self.audit(),
        })
    }
}

fn groups_for(
    data: &GroupDataset,
    source: EnvSourceKind,
    discovered: Option<&[usize]>,
) -> Result<GroupIndex> {
    match source {
        EnvSourceKind::None => Ok(GroupIndex::classes_only(data.y(), data.n_classes())),
        EnvSourceKind::GroundTruth => group_index(data, EnvSource::GroundTruth),
        EnvSourceKind::Xrm => {
            let env = discovered.ok_or_else(|| {
                Error::MissingEnvironments("xrm env source needs phase-1 environments".into())
            })?;
            group_index(
                data,
                EnvSource::Discovered {
                    env,
                    n_envs: DiscoveredEnvironments::N_ENVS,
                },
            )
        }
    }
}

/// Loads data, runs every stage and writes the report.
pub fn run_pipeline(config: ExperimentConfig) -> Result<PipelineOutcome> {
    Pipeline::new(config)?.run()
}
