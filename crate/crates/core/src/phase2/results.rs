//! Per-run result rows, one CSV line per evaluated checkpoint selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub algorithm: String,
    pub env_source: String,
    pub hp_id: usize,
    pub seed: u64,
    pub iteration: usize,
    pub val_metric: f64,
    pub test_wga: f64,
    /// Per-group test accuracies separated by `;`, empty groups as `-`.
    pub per_group_accs: String,
}

impl ResultRow {
    pub fn format_per_group(accs: &[Option<f64>]) -> String {
        accs.iter()
            .map(|a| a.map_or_else(|| "-".to_string(), |v| format!("{v:.6}")))
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let row = ResultRow {
            dataset: "synthetic".into(),
            algorithm: "groupdro".into(),
            env_source: "xrm".into(),
            hp_id: 3,
            seed: 7,
            iteration: 150,
            val_metric: 0.75,
            test_wga: 0.5,
            per_group_accs: ResultRow::format_per_group(&[Some(1.0), None, Some(0.5)]),
        };
        write_results_csv(&path, std::slice::from_ref(&row)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "dataset,algorithm,env_source,hp_id,seed,iteration,val_metric,test_wga,per_group_accs\n"
        ));
        assert!(text.contains("1.000000;-;0.500000"));
        assert_eq!(read_results_csv(&path).unwrap(), vec![row]);
    }
}
