//! Columnar CSV import/export: `feature_0..feature_{d-1},label,env,split`.
//!
//! `env` is left empty for datasets without annotations. Floats use Rust's
//! shortest round-trip formatting, so export → import is lossless.

use std::path::Path;

use super::{GroupDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn write_dataset_csv(path: impl AsRef<Path>, datasets: &[&GroupDataset]) -> Result<()> {
    let dim = datasets.first().map_or(0, |d| d.dim());
    if datasets.iter().any(|d| d.dim() != dim) {
        return Err(Error::InvalidArgument(
            "datasets differ in feature dimension".into(),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|j| format!("feature_{j}")).collect();
    header.extend(["label", "env", "split"].map(String::from));
    w.write_record(&header)?;
    for d in datasets {
        let env = d.env_unaudited();
        for i in 0..d.len() {
            let mut record: Vec<String> = d.x().row(i).iter().map(|v| v.to_string()).collect();
            record.push(d.y()[i].to_string());
            record.push(env.map(|e| e[i].to_string()).unwrap_or_default());
            record.push(d.split().to_string());
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every split present in the file, in `train, val, test` order.
/// Class and environment counts are inferred from the largest ids seen.
pub fn read_dataset_csv(path: impl AsRef<Path>) -> Result<Vec<GroupDataset>> {
    let path = path.as_ref();
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 3 || &header[n - 3] != "label" || &header[n - 2] != "env" || &header[n - 1] != "split" {
        return Err(bad("header must end with label,env,split".into()));
    }
    let dim = n - 3;
    for (j, name) in header.iter().take(dim).enumerate() {
        if name != format!("feature_{j}") {
            return Err(bad(format!("column {j} is `{name}`, expected feature_{j}")));
        }
    }

    struct Rows {
        features: Vec<f64>,
        labels: Vec<usize>,
        envs: Vec<Option<usize>>,
    }
    let mut by_split: [Rows; 3] = std::array::from_fn(|_| Rows {
        features: Vec::new(),
        labels: Vec::new(),
        envs: Vec::new(),
    });
    let (mut max_label, mut max_env) = (1usize, 0usize);
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let parse_err = |what: &str, v: &str| bad(format!("row {}: bad {what} `{v}`", line + 1));
        let split: Split = record[n - 1].parse()?;
        let slot = &mut by_split[split as usize];
        for v in record.iter().take(dim) {
            slot.features
                .push(v.parse().map_err(|_| parse_err("feature", v))?);
        }
        let label: usize = record[dim]
            .parse()
            .map_err(|_| parse_err("label", &record[dim]))?;
        max_label = max_label.max(label);
        slot.labels.push(label);
        let env = match &record[dim + 1] {
            "" => None,
            v => {
                let e: usize = v.parse().map_err(|_| parse_err("env", v))?;
                max_env = max_env.max(e);
                Some(e)
            }
        };
        slot.envs.push(env);
    }

    let mut out = Vec::new();
    for (split, rows) in [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .zip(by_split)
    {
        if rows.labels.is_empty() {
            continue;
        }
        let env = if rows.envs.iter().all(Option::is_some) {
            Some(rows.envs.into_iter().flatten().collect())
        } else if rows.envs.iter().all(Option::is_none) {
            None
        } else {
            return Err(bad(format!(
                "{split} split mixes annotated and unannotated rows"
            )));
        };
        let x = Matrix::from_vec(rows.labels.len(), dim, rows.features)?;
        out.push(GroupDataset::new(
            x,
            rows.labels,
            env,
            split,
            max_label + 1,
            max_env + 1,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let train = GroupDataset::new(
            Matrix::from_rows(&[[0.1, -2.5e-17], [1.0 / 3.0, 4.0]]).unwrap(),
            vec![0, 1],
            Some(vec![1, 0]),
            Split::Train,
            2,
            2,
        )
        .unwrap();
        let test = GroupDataset::new(
            Matrix::from_rows(&[[7.0, 8.0]]).unwrap(),
            vec![1],
            None,
            Split::Test,
            2,
            2,
        )
        .unwrap();
        write_dataset_csv(&path, &[&train, &test]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("feature_0,feature_1,label,env,split\n"));
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].x(), train.x());
        assert_eq!(back[0].y(), train.y());
        assert_eq!(back[0].env_unaudited(), Some(&[1, 0][..]));
        assert_eq!(back[1].split(), Split::Test);
        assert_eq!(back[1].env_unaudited(), None);
    }

    #[test]
    fn rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x,label,env,split\n1,0,0,train\n").unwrap();
        assert!(read_dataset_csv(&path).is_err());
    }
}
