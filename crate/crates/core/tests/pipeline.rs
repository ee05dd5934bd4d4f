use std::fs;
use std::path::Path;

use xrm_core::harness::{
    emit_report, run_pipeline, EnvSourceKind, ExperimentConfig, Pipeline, ENVIRONMENTS_FILE,
};
use xrm_core::phase2::{read_results_csv, write_results_csv, Algorithm};
use xrm_core::Error;

fn small(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic(dir);
    c.dataset.synthetic.n_train = 2000;
    c.dataset.synthetic.n_val = 500;
    c.dataset.synthetic.n_test = 1000;
    c.phase1.combos = 2;
    c.phase1.xrm.iters = 150;
    c.phase2.train.iters = 100;
    c
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn full_run_fills_every_cell_and_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(small(dir.path())).unwrap();
    assert_eq!(
        out.cells.len(),
        Algorithm::ALL.len() * EnvSourceKind::ALL.len()
    );
    for cell in &out.cells {
        assert_eq!(cell.rows.len(), 2, "{} {}", cell.algorithm, cell.env_source);
        for r in &cell.rows {
            assert!((0.0..=1.0).contains(&r.test_wga));
        }
    }
    let envs = out.environments.as_ref().unwrap();
    assert_eq!(envs.train_env.len(), 2000);
    assert_eq!(envs.val_env.len(), 500);
    for f in [
        "table.md",
        "table.csv",
        "per_group.csv",
        "phase1_combos.csv",
        "flip_trajectories.csv",
    ] {
        assert!(dir.path().join("report").join(f).exists(), "{f}");
    }
    let md = read(dir.path(), "report/table.md");
    assert!(!String::from_utf8_lossy(&md).contains("pending"));

    // re-emitting from the files alone reproduces the bytes
    let csv = read(dir.path(), "report/table.csv");
    emit_report(dir.path()).unwrap();
    assert_eq!(read(dir.path(), "report/table.md"), md);
    assert_eq!(read(dir.path(), "report/table.csv"), csv);
}

#[test]
fn job_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(small(a.path())).unwrap();
    let mut cfg = small(b.path());
    cfg.jobs = 2;
    run_pipeline(cfg).unwrap();
    for rel in [
        ENVIRONMENTS_FILE,
        "phase1/runs.csv",
        "phase1/flip_trajectories.csv",
        "phase2/groupdro_xrm/results.csv",
        "phase2/subg_ground-truth/val_trajectories.csv",
        "report/table.md",
        "report/table.csv",
        "report/per_group.csv",
    ] {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
    }
}

#[test]
fn finished_cells_are_reused_and_missing_ones_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(small(dir.path())).unwrap();
    let table = read(dir.path(), "report/table.csv");

    // a missing cell is recomputed identically
    fs::remove_file(dir.path().join("phase2/rwg_xrm/results.csv")).unwrap();
    run_pipeline(small(dir.path())).unwrap();
    assert_eq!(read(dir.path(), "report/table.csv"), table);

    // a finished cell is read back, not retrained
    let path = dir.path().join("phase2/erm_none/results.csv");
    let mut rows = read_results_csv(&path).unwrap();
    rows[0].test_wga = 0.123;
    write_results_csv(&path, &rows).unwrap();
    let out = run_pipeline(small(dir.path())).unwrap();
    let cell = out.cell(Algorithm::Erm, EnvSourceKind::None).unwrap();
    assert_eq!(cell.rows[0].test_wga, 0.123);
}

#[test]
fn a_directory_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(small(dir.path())).unwrap();
    let mut other = small(dir.path());
    other.seed = 1;
    assert!(matches!(Pipeline::new(other), Err(Error::Config(_))));
    // jobs alone is not a different config
    let mut more_jobs = small(dir.path());
    more_jobs.jobs = 2;
    Pipeline::new(more_jobs).unwrap();
}

#[test]
fn xrm_path_reads_no_annotations_before_test_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.phase2.env_sources = vec![EnvSourceKind::Xrm];
    let out = run_pipeline(cfg).unwrap();
    assert_eq!(out.audit.train_reads, 0);
    assert_eq!(out.audit.val_reads, 0);
    assert_eq!(out.audit.test_reads_before_eval, Some(0));
    assert!(out.audit.test_reads > 0);
    assert!(out.audit.annotation_free());
}

#[test]
fn the_audit_notices_ground_truth_use() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.phase2.algorithms = vec![Algorithm::GroupDro];
    cfg.phase2.env_sources = vec![EnvSourceKind::GroundTruth];
    let out = run_pipeline(cfg).unwrap();
    assert!(out.audit.train_reads > 0);
    assert!(out.audit.val_reads > 0);
    assert!(!out.audit.annotation_free());
}

#[test]
fn env_source_none_skips_discovery() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.phase2.algorithms = vec![Algorithm::Erm, Algorithm::Subg];
    cfg.phase2.env_sources = vec![EnvSourceKind::None];
    let out = run_pipeline(cfg).unwrap();
    assert!(out.environments.is_none());
    assert!(!dir.path().join("phase1").exists());
    assert_eq!(out.cells.len(), 2);
}
