//! Fixtures shared by the benchmarks under `benches/`.

use xrm_core::datasets::{generate_synthetic_groupshift, GroupDataset, SyntheticConfig};
use xrm_core::Matrix;

/// A deterministic `rows × cols` matrix with entries in `[-1, 1)`.
pub fn pseudo_random(rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|i| ((i.wrapping_mul(2_654_435_761) % 2000) as f64) / 1000.0 - 1.0)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Binary labels alternating in blocks of three.
pub fn labels(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i / 3) % 2).collect()
}

/// The default synthetic training split at `n` examples.
pub fn synthetic_train(n: usize) -> GroupDataset {
    let config = SyntheticConfig {
        n_train: n,
        ..SyntheticConfig::default()
    };
    generate_synthetic_groupshift(&config, 0)
        .expect("synthetic data")
        .0
}
