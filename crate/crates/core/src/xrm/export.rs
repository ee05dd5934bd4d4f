//! Discovered-environment CSV: `index,split,label,discovered_env`.

use std::path::Path;

use super::DiscoveredEnvironments;
use crate::datasets::Split;
use crate::error::{Error, Result};

pub fn write_environments_csv(
    path: impl AsRef<Path>,
    envs: &DiscoveredEnvironments,
    train_labels: &[usize],
    val_labels: &[usize],
) -> Result<()> {
    if envs.train_env.len() != train_labels.len() || envs.val_env.len() != val_labels.len() {
        return Err(Error::shape(
            "environment export",
            format!("{}+{}", train_labels.len(), val_labels.len()),
            format!("{}+{}", envs.train_env.len(), envs.val_env.len()),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "split", "label", "discovered_env"])?;
    for (split, env, labels) in [
        (Split::Train, &envs.train_env, train_labels),
        (Split::Val, &envs.val_env, val_labels),
    ] {
        for (i, (e, y)) in env.iter().zip(labels).enumerate() {
            w.write_record([
                i.to_string(),
                split.to_string(),
                y.to_string(),
                e.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_environments_csv(path: impl AsRef<Path>) -> Result<DiscoveredEnvironments> {
    let path = path.as_ref();
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = csv::Reader::from_path(path)?;
    let mut envs = DiscoveredEnvironments {
        train_env: Vec::new(),
        val_env: Vec::new(),
    };
    for record in r.records() {
        let record = record?;
        if record.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", record.len())));
        }
        let index: usize = record[0]
            .parse()
            .map_err(|_| bad(format!("index `{}`", &record[0])))?;
        let env: usize = record[3]
            .parse()
            .map_err(|_| bad(format!("env `{}`", &record[3])))?;
        let target = match record[1].parse::<Split>()? {
            Split::Train => &mut envs.train_env,
            Split::Val => &mut envs.val_env,
            Split::Test => return Err(bad("test rows carry no discovered environment".into())),
        };
        if index != target.len() {
            return Err(bad(format!("index {index} out of order")));
        }
        target.push(env);
    }
    Ok(envs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("envs.csv");
        let envs = DiscoveredEnvironments {
            train_env: vec![0, 1, 1],
            val_env: vec![1, 0],
        };
        write_environments_csv(&path, &envs, &[1, 0, 1], &[0, 0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("index,split,label,discovered_env\n0,train,1,0\n"));
        assert_eq!(read_environments_csv(&path).unwrap(), envs);
        assert!(write_environments_csv(&path, &envs, &[1], &[0, 0]).is_err());
    }
}
