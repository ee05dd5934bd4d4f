//! Two-feature group-shift data with a strong spurious feature.
//!
//! Feature 0 carries the label (`±invariant_signal` plus Gaussian noise of
//! scale `feature_noise`); feature 1 carries the environment
//! (`±spurious_signal` plus the smaller `spurious_noise`). The default
//! spurious margin is three times the invariant one, so it is the shortcut
//! a linear model latches onto first. Proportions are
//! indexed by group id `label · 2 + env`; the default mirrors a
//! Waterbirds-like split with majority groups where label == env.

use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GroupDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, StreamLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Train/validation proportions of groups `(0,0), (0,1), (1,0), (1,1)`.
    pub proportions: Vec<f64>,
    /// Test proportions, same indexing.
    pub test_proportions: Vec<f64>,
    pub invariant_signal: f64,
    pub spurious_signal: f64,
    pub feature_noise: f64,
    pub spurious_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_val: 2_000,
            n_test: 4_000,
            proportions: vec![0.73, 0.01, 0.04, 0.22],
            test_proportions: vec![0.25; 4],
            invariant_signal: 1.0,
            spurious_signal: 3.0,
            feature_noise: 0.75,
            spurious_noise: 0.1,
        }
    }
}

fn check_proportions(name: &str, p: &[f64]) -> Result<()> {
    if p.len() != 4 {
        return Err(Error::Config(format!(
            "{name} needs 4 entries, got {}",
            p.len()
        )));
    }
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Config(format!("{name} has a negative entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        check_proportions("proportions", &self.proportions)?;
        check_proportions("test_proportions", &self.test_proportions)?;
        if self.feature_noise < 0.0 || self.spurious_noise < 0.0 {
            return Err(Error::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Builds `(train, val, test)`.
pub fn generate_synthetic_groupshift(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(GroupDataset, GroupDataset, GroupDataset)> {
    config.validate()?;
    let mut rng = RngStream::new(seed, StreamLabel::Data);
    let train = sample(
        config,
        config.n_train,
        &config.proportions,
        Split::Train,
        &mut rng,
    )?;
    let val = sample(
        config,
        config.n_val,
        &config.proportions,
        Split::Val,
        &mut rng,
    )?;
    let test = sample(
        config,
        config.n_test,
        &config.test_proportions,
        Split::Test,
        &mut rng,
    )?;
    Ok((train, val, test))
}

fn sample(
    config: &SyntheticConfig,
    n: usize,
    proportions: &[f64],
    split: Split,
    rng: &mut RngStream,
) -> Result<GroupDataset> {
    let groups =
        WeightedIndex::new(proportions).map_err(|e| Error::Config(format!("proportions: {e}")))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sign = |b: usize| if b == 1 { 1.0 } else { -1.0 };
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut env = Vec::with_capacity(n);
    for i in 0..n {
        let g = groups.sample(rng);
        let (label, e) = (g / 2, g % 2);
        let inv = sign(label) * config.invariant_signal + config.feature_noise * unit.sample(rng);
        let sp = sign(e) * config.spurious_signal + config.spurious_noise * unit.sample(rng);
        x.set(i, 0, inv);
        x.set(i, 1, sp);
        y.push(label);
        env.push(e);
    }
    GroupDataset::new(x, y, Some(env), split, 2, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{group_index, EnvSource};

    #[test]
    fn default_minority_is_about_one_percent() {
        let (train, _, _) = generate_synthetic_groupshift(&SyntheticConfig::default(), 0).unwrap();
        let g = group_index(&train, EnvSource::GroundTruth).unwrap();
        let n = train.len() as f64;
        // multinomial oracle: each size within 3σ of n·p
        for (size, p) in g
            .sizes()
            .iter()
            .zip(&SyntheticConfig::default().proportions)
        {
            let sigma = (n * p * (1.0 - p)).sqrt();
            assert!(
                (*size as f64 - n * p).abs() <= 3.0 * sigma,
                "{size} vs {}",
                n * p
            );
        }
        assert!((g.sizes()[1] as f64 - 100.0).abs() <= 30.0);
    }

    #[test]
    fn balanced_proportions() {
        let config = SyntheticConfig {
            proportions: vec![0.25; 4],
            ..Default::default()
        };
        let (train, _, _) = generate_synthetic_groupshift(&config, 1).unwrap();
        let g = group_index(&train, EnvSource::GroundTruth).unwrap();
        for &s in g.sizes() {
            assert!((s as f64 - 2500.0).abs() < 3.0 * (10_000.0f64 * 0.25 * 0.75).sqrt());
        }
    }

    #[test]
    fn noiseless_invariant_feature_separates() {
        let config = SyntheticConfig {
            feature_noise: 0.0,
            ..Default::default()
        };
        let (train, _, test) = generate_synthetic_groupshift(&config, 2).unwrap();
        for d in [&train, &test] {
            for i in 0..d.len() {
                assert_eq!(usize::from(d.x().get(i, 0) > 0.0), d.y()[i]);
            }
        }
    }

    #[test]
    fn proportions_must_sum_to_one() {
        let config = SyntheticConfig {
            proportions: vec![0.5, 0.2, 0.2, 0.2],
            ..Default::default()
        };
        assert!(generate_synthetic_groupshift(&config, 0).is_err());
        let config = SyntheticConfig {
            proportions: vec![0.5, 0.5],
            ..Default::default()
        };
        assert!(generate_synthetic_groupshift(&config, 0).is_err());
    }

    #[test]
    fn reproducible() {
        let c = SyntheticConfig::default();
        let (a, _, _) = generate_synthetic_groupshift(&c, 4).unwrap();
        let (b, _, _) = generate_synthetic_groupshift(&c, 4).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
    }
}
