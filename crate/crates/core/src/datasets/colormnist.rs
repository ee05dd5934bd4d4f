//! Two-colour MNIST with a label–colour shortcut.
//!
//! Digits are binarised (`digit < 5 → 0`, else `1`), the binary label is
//! flipped with probability `label_noise`, and the 2×2-mean-pooled image is
//! written into one of two colour channels. The channel index agrees with the
//! noisy label with the environment's correlation. Training and validation
//! each mix every training correlation; the test split uses its own.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GroupDataset, RawImages, Split};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, StreamLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorMnistConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// One training/validation environment per entry.
    pub train_correlations: Vec<f64>,
    pub test_correlation: f64,
    pub label_noise: f64,
}

impl Default for ColorMnistConfig {
    fn default() -> Self {
        Self {
            n_train: 50_000,
            n_val: 10_000,
            n_test: 10_000,
            train_correlations: vec![0.8, 0.9],
            test_correlation: 0.1,
            label_noise: 0.25,
        }
    }
}

impl ColorMnistConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        if self.train_correlations.is_empty() {
            return Err(Error::Config("train_correlations is empty".into()));
        }
        for &c in &self.train_correlations {
            prob("train correlation", c)?;
        }
        prob("test_correlation", self.test_correlation)?;
        prob("label_noise", self.label_noise)?;
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Ok(())
    }

    /// Environment id of the test split; training environments come first.
    pub fn test_env(&self) -> usize {
        self.train_correlations.len()
    }

    pub fn n_envs(&self) -> usize {
        self.train_correlations.len() + 1
    }
}

/// Which raw images feed each split, `[train, val, test]`; disjoint.
pub fn colormnist_source_indices(
    n_raw: usize,
    config: &ColorMnistConfig,
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    let needed = config.n_train + config.n_val + config.n_test;
    if needed > n_raw {
        return Err(Error::Config(format!(
            "ColorMNIST needs {needed} images, only {n_raw} loaded"
        )));
    }
    let mut order: Vec<usize> = (0..n_raw).collect();
    order.shuffle(&mut RngStream::new(seed, StreamLabel::Data));
    let val_start = config.n_train;
    let test_start = val_start + config.n_val;
    Ok([
        order[..val_start].to_vec(),
        order[val_start..test_start].to_vec(),
        order[test_start..needed].to_vec(),
    ])
}

/// Builds `(train, val, test)`.
pub fn generate_colormnist(
    raw: &RawImages,
    config: &ColorMnistConfig,
    seed: u64,
) -> Result<(GroupDataset, GroupDataset, GroupDataset)> {
    config.validate()?;
    if !raw.rows.is_multiple_of(2) || !raw.cols.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "images of {}x{} cannot be 2x2 pooled",
            raw.rows, raw.cols
        )));
    }
    let [train_idx, val_idx, test_idx] = colormnist_source_indices(raw.len(), config, seed)?;
    // A separate stream for labels and colours keeps the split assignment
    // independent of the number of draws below.
    let mut rng = RngStream::new(seed ^ 0x636f_6c6f_726d_6e73, StreamLabel::Data);
    let n_envs = config.n_envs();
    let train_envs: Vec<usize> = (0..config.train_correlations.len()).collect();
    let train = build_split(
        raw,
        &train_idx,
        &train_envs,
        config,
        Split::Train,
        n_envs,
        &mut rng,
    )?;
    let val = build_split(
        raw,
        &val_idx,
        &train_envs,
        config,
        Split::Val,
        n_envs,
        &mut rng,
    )?;
    let test = build_split(
        raw,
        &test_idx,
        &[config.test_env()],
        config,
        Split::Test,
        n_envs,
        &mut rng,
    )?;
    Ok((train, val, test))
}

fn correlation_of(config: &ColorMnistConfig, env: usize) -> f64 {
    config
        .train_correlations
        .get(env)
        .copied()
        .unwrap_or(config.test_correlation)
}

fn build_split(
    raw: &RawImages,
    indices: &[usize],
    envs: &[usize],
    config: &ColorMnistConfig,
    split: Split,
    n_envs: usize,
    rng: &mut RngStream,
) -> Result<GroupDataset> {
    let (ph, pw) = (raw.rows / 2, raw.cols / 2);
    let channel = ph * pw;
    let mut x = Matrix::zeros(indices.len(), 2 * channel);
    let mut y = Vec::with_capacity(indices.len());
    let mut env = Vec::with_capacity(indices.len());
    for (row, &src) in indices.iter().enumerate() {
        let e = envs[row % envs.len()];
        let mut label = usize::from(raw.labels[src] >= 5);
        if rng.random::<f64>() < config.label_noise {
            label = 1 - label;
        }
        let color = if rng.random::<f64>() < correlation_of(config, e) {
            label
        } else {
            1 - label
        };
        let pooled = &mut x.row_mut(row)[color * channel..(color + 1) * channel];
        pool_2x2(raw.image(src), raw.cols, pooled, pw);
        y.push(label);
        env.push(e);
    }
    GroupDataset::new(x, y, Some(env), split, 2, n_envs)
}

fn pool_2x2(image: &[f64], cols: usize, out: &mut [f64], out_cols: usize) {
    for (k, v) in out.iter_mut().enumerate() {
        let (r, c) = (2 * (k / out_cols), 2 * (k % out_cols));
        *v = 0.25
            * (image[r * cols + c]
                + image[r * cols + c + 1]
                + image[(r + 1) * cols + c]
                + image[(r + 1) * cols + c + 1]);
    }
}

/// Colour channel an encoded example was written to.
pub fn color_of(features: &[f64]) -> usize {
    let half = features.len() / 2;
    let first: f64 = features[..half].iter().sum();
    let second: f64 = features[half..].iter().sum();
    usize::from(second > first)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Random non-blank 28×28 "digits" with labels 0..9.
    pub(crate) fn fake_raw(n: usize, seed: u64) -> RawImages {
        let mut rng = RngStream::new(seed, StreamLabel::Data);
        let mut pixels = Vec::with_capacity(n * 784);
        for _ in 0..n * 784 {
            pixels.push(rng.random_range(0.01..1.0));
        }
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        RawImages {
            rows: 28,
            cols: 28,
            pixels,
            labels,
        }
    }

    fn agreement(d: &GroupDataset, env: usize) -> f64 {
        let envs = d.env_unaudited().unwrap();
        let (mut agree, mut total) = (0usize, 0usize);
        for i in 0..d.len() {
            if envs[i] == env {
                total += 1;
                agree += usize::from(color_of(d.x().row(i)) == d.y()[i]);
            }
        }
        agree as f64 / total as f64
    }

    #[test]
    fn feature_dimension_is_392() {
        let raw = fake_raw(30, 0);
        let config = ColorMnistConfig {
            n_train: 10,
            n_val: 10,
            n_test: 10,
            ..Default::default()
        };
        let (train, val, test) = generate_colormnist(&raw, &config, 1).unwrap();
        for d in [&train, &val, &test] {
            assert_eq!(d.dim(), 392);
            assert_eq!(d.n_envs(), 3);
        }
        assert!(test.env_unaudited().unwrap().iter().all(|&e| e == 2));
        let train_envs = train.env_unaudited().unwrap();
        assert!(train_envs.contains(&0) && train_envs.contains(&1));
        assert!(val.env_unaudited().unwrap().contains(&1));
    }

    #[test]
    fn correlations_hold_empirically() {
        let n = 20_000;
        let raw = fake_raw(2 * n + 2 * n + n, 3);
        let config = ColorMnistConfig {
            n_train: 2 * n,
            n_val: 2 * n,
            n_test: n,
            ..Default::default()
        };
        let (train, val, test) = generate_colormnist(&raw, &config, 9).unwrap();
        for d in [&train, &val] {
            assert!((agreement(d, 0) - 0.8).abs() < 0.02, "{}", agreement(d, 0));
            assert!((agreement(d, 1) - 0.9).abs() < 0.02, "{}", agreement(d, 1));
        }
        assert!((agreement(&test, 2) - 0.1).abs() < 0.02);

        // a colour-only classifier scores the test correlation
        let acc = (0..test.len())
            .filter(|&i| color_of(test.x().row(i)) == test.y()[i])
            .count() as f64
            / test.len() as f64;
        assert!((acc - 0.1).abs() < 0.02, "{acc}");
    }

    #[test]
    fn noiseless_perfect_correlation() {
        let raw = fake_raw(300, 4);
        let config = ColorMnistConfig {
            n_train: 100,
            n_val: 100,
            n_test: 100,
            train_correlations: vec![1.0, 1.0],
            test_correlation: 1.0,
            label_noise: 0.0,
        };
        let (train, _, test) = generate_colormnist(&raw, &config, 2).unwrap();
        assert_eq!(agreement(&train, 0), 1.0);
        assert_eq!(agreement(&test, 2), 1.0);
        for i in 0..train.len() {
            // without noise the label is the digit threshold
            assert!(train.y()[i] <= 1);
        }
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let config = ColorMnistConfig {
            n_train: 50,
            n_val: 30,
            n_test: 20,
            ..Default::default()
        };
        let [a, b, c] = colormnist_source_indices(120, &config, 5).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);

        let raw = fake_raw(120, 6);
        let (t1, v1, _) = generate_colormnist(&raw, &config, 5).unwrap();
        let (t2, v2, _) = generate_colormnist(&raw, &config, 5).unwrap();
        assert_eq!(t1.x(), t2.x());
        assert_eq!(t1.y(), t2.y());
        assert_eq!(v1.y(), v2.y());
        let (t3, _, _) = generate_colormnist(&raw, &config, 6).unwrap();
        assert_ne!(t1.x(), t3.x());
    }

    #[test]
    fn too_few_images_is_a_config_error() {
        let raw = fake_raw(10, 0);
        assert!(generate_colormnist(&raw, &ColorMnistConfig::default(), 0).is_err());
    }

    #[test]
    fn pooling_averages_blocks() {
        let image: Vec<f64> = (0..16).map(f64::from).collect();
        let mut out = vec![0.0; 4];
        pool_2x2(&image, 4, &mut out, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
