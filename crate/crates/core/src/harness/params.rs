//! Training hyper-parameters and their log-uniform search grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{OptimizerKind, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub groupdro_eta: Option<f64>,
    pub optimizer: OptimizerKind,
}

impl HyperParams {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            batch_size: None,
            groupdro_eta: None,
            optimizer: OptimizerKind::adam(),
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = Some(batch_size);
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.groupdro_eta = Some(eta);
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {}",
                self.weight_decay
            )));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > n {
                return Err(Error::InvalidArgument(format!(
                    "batch size {b} for {n} examples"
                )));
            }
        }
        if let Some(eta) = self.groupdro_eta {
            if !(eta > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "GroupDRO eta must be positive, got {eta}"
                )));
            }
        }
        Ok(())
    }

    /// Compact one-line description, stable across runs.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "{} lr={:.3e} wd={:.3e} batch={}",
            self.optimizer.name(),
            self.lr,
            self.weight_decay,
            self.batch_size
                .map_or("full".to_string(), |b| b.to_string())
        );
        if let Some(eta) = self.groupdro_eta {
            s.push_str(&format!(" eta={eta:.3e}"));
        }
        s
    }
}

/// `base^Uniform(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogUniform {
    pub base: f64,
    pub lo: f64,
    pub hi: f64,
}

impl LogUniform {
    pub const fn pow10(lo: f64, hi: f64) -> Self {
        Self { base: 10.0, lo, hi }
    }

    pub const fn pow2(lo: f64, hi: f64) -> Self {
        Self { base: 2.0, lo, hi }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.base > 1.0) || !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(Error::Config(format!(
                "grid `{name}` is malformed: {}^U({}, {})",
                self.base, self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let exponent = if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        };
        self.base.powf(exponent)
    }
}

/// Search space; rows left as `None` are not sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub lr: LogUniform,
    pub weight_decay: LogUniform,
    /// Omit for full-batch training.
    #[serde(default)]
    pub batch_size: Option<LogUniform>,
    #[serde(default)]
    pub groupdro_eta: Option<LogUniform>,
    pub optimizer: OptimizerKind,
}

impl HyperGrid {
    /// Learning rate `10^U(-4,-2)`, weight decay `10^U(-6,-3)`, batch size
    /// `2^U(6,7)`, SGD with momentum 0.9.
    pub fn default_grid() -> Self {
        Self {
            lr: LogUniform::pow10(-4.0, -2.0),
            weight_decay: LogUniform::pow10(-6.0, -3.0),
            batch_size: Some(LogUniform::pow2(6.0, 7.0)),
            groupdro_eta: None,
            optimizer: OptimizerKind::sgd(0.9),
        }
    }

    /// GroupDRO step size row, `10^U(-3,-1)`.
    pub fn with_groupdro_eta(mut self) -> Self {
        self.groupdro_eta = Some(LogUniform::pow10(-3.0, -1.0));
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate("lr")?;
        self.weight_decay.validate("weight_decay")?;
        if let Some(b) = &self.batch_size {
            b.validate("batch_size")?;
        }
        if let Some(e) = &self.groupdro_eta {
            e.validate("groupdro_eta")?;
        }
        Ok(())
    }
}

/// One draw from every grid row. Batch sizes are rounded to the nearest integer.
pub fn sample_hyperparams(grid: &HyperGrid, rng: &mut RngStream) -> Result<HyperParams> {
    grid.validate()?;
    let lr = grid.lr.sample(rng);
    let weight_decay = grid.weight_decay.sample(rng);
    let batch_size = grid
        .batch_size
        .map(|b| (b.sample(rng).round() as usize).max(1));
    let groupdro_eta = grid.groupdro_eta.map(|e| e.sample(rng));
    Ok(HyperParams {
        lr,
        weight_decay,
        batch_size,
        groupdro_eta,
        optimizer: grid.optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamLabel;

    #[test]
    fn draws_stay_in_range() {
        let grid = HyperGrid::default_grid().with_groupdro_eta();
        let mut rng = RngStream::new(0, StreamLabel::Search);
        for _ in 0..1000 {
            let hp = sample_hyperparams(&grid, &mut rng).unwrap();
            assert!((1e-4..=1e-2).contains(&hp.lr));
            assert!((1e-6..=1e-3).contains(&hp.weight_decay));
            assert!((64..=128).contains(&hp.batch_size.unwrap()));
            assert!((1e-3..=1e-1).contains(&hp.groupdro_eta.unwrap()));
        }
    }

    #[test]
    fn degenerate_row_is_constant() {
        let mut grid = HyperGrid::default_grid();
        grid.lr = LogUniform::pow10(-3.0, -3.0);
        let mut rng = RngStream::new(1, StreamLabel::Search);
        for _ in 0..10 {
            assert_eq!(sample_hyperparams(&grid, &mut rng).unwrap().lr, 1e-3);
        }
    }

    #[test]
    fn log_uniform_median() {
        // The median of 10^U(-4,-2) is 10^-3.
        let row = LogUniform::pow10(-4.0, -2.0);
        let mut rng = RngStream::new(2, StreamLabel::Search);
        let mut draws: Vec<f64> = (0..100_000).map(|_| row.sample(&mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        let median = draws[draws.len() / 2];
        assert!((median / 1e-3 - 1.0).abs() < 0.1, "{median}");
    }

    #[test]
    fn malformed_grid_and_params() {
        let mut grid = HyperGrid::default_grid();
        grid.weight_decay = LogUniform::pow10(-2.0, -4.0);
        let mut rng = RngStream::new(3, StreamLabel::Search);
        assert!(sample_hyperparams(&grid, &mut rng).is_err());

        assert!(HyperParams::adam(1e-3).with_eta(0.0).validate(10).is_err());
        assert!(HyperParams::adam(1e-3)
            .with_batch_size(11)
            .validate(10)
            .is_err());
        assert!(HyperParams::adam(1e-3).validate(10).is_ok());
    }

    #[test]
    fn deterministic_per_stream() {
        let grid = HyperGrid::default_grid();
        let a = sample_hyperparams(&grid, &mut RngStream::new(9, StreamLabel::Search)).unwrap();
        let b = sample_hyperparams(&grid, &mut RngStream::new(9, StreamLabel::Search)).unwrap();
        assert_eq!(a, b);
    }
}
