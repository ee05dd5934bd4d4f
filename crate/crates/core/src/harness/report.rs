//! Summary tables from a run directory.
//!
//! Writes, under `report/`:
//! - `table.md` / `table.csv`: mean ± std test worst-group accuracy (in
//!   percent) per algorithm (rows) and env source (columns); cells without
//!   results are flagged `pending`.
//! - `flip_trajectories.csv`: phase-1 flip fraction per iteration.
//! - `phase1_combos.csv`: mean final flip fraction per phase-1 combo.
//! - `per_group.csv`: per-group test accuracy for every cell and seed.
//!
//! Output depends only on the directory contents, so repeated emission is
//! byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use super::pipeline::{mean_std, read_csv, FlipRow, PerGroupRow, Phase1Selection, CONFIG_FILE};
use crate::error::{Error, Result};
use crate::phase2::ResultRow;

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Writes the report files for `run_dir` and returns the markdown table.
pub fn emit_report(run_dir: impl AsRef<Path>) -> Result<String> {
    let run_dir = run_dir.as_ref();
    let config_path = run_dir.join(CONFIG_FILE);
    if !config_path.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a run directory (no {CONFIG_FILE})",
            run_dir.display()
        )));
    }
    let config = ExperimentConfig::load(&config_path)?;
    let algorithms = &config.phase2.algorithms;
    let sources = &config.phase2.env_sources;

    let mut cells = Vec::new();
    for &a in algorithms {
        for &s in sources {
            let path = run_dir
                .join("phase2")
                .join(format!("{a}_{s}"))
                .join("results.csv");
            let rows: Option<Vec<ResultRow>> = if path.exists() {
                Some(read_csv(&path)?)
            } else {
                None
            };
            cells.push(((a, s), rows));
        }
    }
    let phase1_dir = run_dir.join("phase1");
    let flips_path = phase1_dir.join("flip_trajectories.csv");
    let selection_path = phase1_dir.join("selection.json");
    let any_results = cells.iter().any(|(_, r)| r.is_some());
    if !any_results && !flips_path.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} holds no results yet",
            run_dir.display()
        )));
    }

    let out = run_dir.join("report");
    fs::create_dir_all(&out)?;

    let mut md = String::new();
    let _ = writeln!(
        md,
        "Test worst-group accuracy (%), mean ± std over seeds, dataset `{}`.\n",
        config.dataset.kind.as_str()
    );
    let header: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(md, "| algorithm | {} |", header.join(" | "));
    let _ = writeln!(md, "|---|{}", "---|".repeat(sources.len()));

    let mut csv_out = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["algorithm".to_string()];
    for s in sources {
        head.push(format!("{s}_mean"));
        head.push(format!("{s}_std"));
        head.push(format!("{s}_seeds"));
    }
    csv_out.write_record(&head)?;

    let mut per_group = csv::Writer::from_writer(Vec::new());
    per_group.write_record([
        "algorithm",
        "env_source",
        "seed_slot",
        "group",
        "label",
        "env",
        "accuracy",
    ])?;

    for (i, &a) in algorithms.iter().enumerate() {
        let mut md_cells = Vec::new();
        let mut record = vec![a.to_string()];
        for (j, &s) in sources.iter().enumerate() {
            match &cells[i * sources.len() + j].1 {
                Some(rows) => {
                    let wgas: Vec<f64> = rows.iter().map(|r| r.test_wga).collect();
                    let (mean, std) = mean_std(&wgas);
                    md_cells.push(format!("{} ± {}", pct(mean), pct(std)));
                    record.extend([pct(mean), pct(std), rows.len().to_string()]);
                    let pg_path = run_dir
                        .join("phase2")
                        .join(format!("{a}_{s}"))
                        .join("per_group.csv");
                    if pg_path.exists() {
                        for row in read_csv::<PerGroupRow>(&pg_path)? {
                            per_group.write_record([
                                a.to_string(),
                                s.to_string(),
                                row.seed_slot.to_string(),
                                row.group.to_string(),
                                row.label.to_string(),
                                row.env.to_string(),
                                row.accuracy.map_or_else(String::new, |v| format!("{v:.6}")),
                            ])?;
                        }
                    }
                }
                None => {
                    md_cells.push("pending".to_string());
                    record.extend([String::new(), String::new(), "0".to_string()]);
                }
            }
        }
        let _ = writeln!(md, "| {a} | {} |", md_cells.join(" | "));
        csv_out.write_record(&record)?;
    }

    if selection_path.exists() {
        let selection: Phase1Selection =
            serde_json::from_str(&fs::read_to_string(&selection_path)?)?;
        let _ = writeln!(
            md,
            "\nPhase 1 selected combo {} (lr {:.3e}, weight decay {:.3e}) averaging {} seed(s).",
            selection.combo, selection.hp.lr, selection.hp.weight_decay, selection.seeds_averaged
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["combo", "mean_flip_fraction", "selected"])?;
        for (c, m) in selection.mean_flip_fractions.iter().enumerate() {
            w.write_record([
                c.to_string(),
                m.map_or_else(String::new, |v| format!("{v:.6}")),
                (c == selection.combo).to_string(),
            ])?;
        }
        fs::write(out.join("phase1_combos.csv"), finish(w)?)?;
    }
    if flips_path.exists() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["combo", "seed_slot", "iteration", "flip_fraction"])?;
        for row in read_csv::<FlipRow>(&flips_path)? {
            w.write_record([
                row.combo.to_string(),
                row.seed_slot.to_string(),
                row.iteration.to_string(),
                format!("{:.6}", row.flip_fraction),
            ])?;
        }
        fs::write(out.join("flip_trajectories.csv"), finish(w)?)?;
    }

    fs::write(out.join("table.md"), &md)?;
    fs::write(out.join("table.csv"), finish(csv_out)?)?;
    fs::write(out.join("per_group.csv"), finish(per_group)?)?;
    Ok(md)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either input is constant or shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}
