//! Phase-1 model selection by flip count.

use super::{cross_mistake, DiscoveredEnvironments};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Outcome of one successful twin run, reduced to what selection needs.
#[derive(Debug, Clone)]
pub struct TwinRun {
    /// Flip fraction at the last iteration.
    pub flip_fraction: f64,
    /// Logits of twins `a` and `b` on the training split.
    pub train_logits: (Matrix, Matrix),
    /// Logits of twins `a` and `b` on the validation split.
    pub val_logits: (Matrix, Matrix),
}

#[derive(Debug, Clone)]
pub struct TwinSelection<H> {
    pub combo: usize,
    pub hp: H,
    /// Mean final flip fraction per combo; `None` where every seed failed.
    pub mean_flip_fractions: Vec<Option<f64>>,
    pub seeds_averaged: usize,
    /// Per-twin logits averaged over the winning combo's seeds.
    pub train_logits: (Matrix, Matrix),
    pub val_logits: (Matrix, Matrix),
}

impl<H> TwinSelection<H> {
    /// Cross-mistake environments from the averaged logits.
    pub fn discover(&self, train_y: &[usize], val_y: &[usize]) -> Result<DiscoveredEnvironments> {
        Ok(DiscoveredEnvironments {
            train_env: cross_mistake(&self.train_logits.0, &self.train_logits.1, train_y)?,
            val_env: cross_mistake(&self.val_logits.0, &self.val_logits.1, val_y)?,
        })
    }
}

fn mean_matrix<'a>(mut ms: impl Iterator<Item = &'a Matrix>) -> Result<Matrix> {
    let first = ms
        .next()
        .ok_or_else(|| Error::InvalidArgument("no logits".into()))?;
    let mut sum = first.clone();
    let mut count = 1.0;
    for m in ms {
        sum.add_scaled(1.0, m)?;
        count += 1.0;
    }
    sum.scale(1.0 / count);
    Ok(sum)
}

/// Picks the combo with the largest mean final flip fraction (the first
/// one on ties) and averages its logits per twin across seeds.
pub fn select_twins<H: Clone>(combos: &[(H, Vec<TwinRun>)]) -> Result<TwinSelection<H>> {
    let means: Vec<Option<f64>> = combos
        .iter()
        .map(|(_, runs)| {
            (!runs.is_empty())
                .then(|| runs.iter().map(|r| r.flip_fraction).sum::<f64>() / runs.len() as f64)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in means.iter().enumerate() {
        if let Some(m) = *m {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
    }
    let (combo, _) = best.ok_or_else(|| {
        Error::AllRunsFailed(format!(
            "none of {} phase-1 combos produced a run",
            combos.len()
        ))
    })?;
    let (hp, runs) = &combos[combo];
    Ok(TwinSelection {
        combo,
        hp: hp.clone(),
        mean_flip_fractions: means,
        seeds_averaged: runs.len(),
        train_logits: (
            mean_matrix(runs.iter().map(|r| &r.train_logits.0))?,
            mean_matrix(runs.iter().map(|r| &r.train_logits.1))?,
        ),
        val_logits: (
            mean_matrix(runs.iter().map(|r| &r.val_logits.0))?,
            mean_matrix(runs.iter().map(|r| &r.val_logits.1))?,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(flip: f64, v: f64) -> TwinRun {
        let m = Matrix::from_rows(&[[v, 0.0], [0.0, v]]).unwrap();
        TwinRun {
            flip_fraction: flip,
            train_logits: (m.clone(), m.clone()),
            val_logits: (m.clone(), m),
        }
    }

    #[test]
    fn single_combo_wins() {
        let s = select_twins(&[("only", vec![run(0.0, 1.0)])]).unwrap();
        assert_eq!(s.combo, 0);
        assert_eq!(s.hp, "only");
    }

    #[test]
    fn argmax_of_mean_flips() {
        let combos = vec![
            (0, vec![run(0.1, 1.0)]),
            (1, vec![run(0.3, 1.0), run(0.5, 1.0)]),
            (2, vec![run(0.2, 1.0)]),
        ];
        let s = select_twins(&combos).unwrap();
        assert_eq!(s.combo, 1);
        assert_eq!(s.mean_flip_fractions[1], Some(0.4));
    }

    #[test]
    fn ties_and_failed_combos() {
        let combos = vec![
            (0, vec![]),
            (1, vec![run(0.2, 1.0)]),
            (2, vec![run(0.2, 1.0)]),
        ];
        let s = select_twins(&combos).unwrap();
        assert_eq!(s.combo, 1);
        assert_eq!(s.mean_flip_fractions[0], None);

        let failed: Vec<(u8, Vec<TwinRun>)> = vec![(0, vec![]), (1, vec![])];
        assert!(matches!(
            select_twins(&failed),
            Err(Error::AllRunsFailed(_))
        ));
    }

    #[test]
    fn averaging_identical_seeds_is_identity() {
        let r = run(0.1, 2.5);
        let s = select_twins(&[((), vec![r.clone(), r.clone(), r.clone()])]).unwrap();
        assert_eq!(s.train_logits.0, r.train_logits.0);
        assert_eq!(s.val_logits.1, r.val_logits.1);

        let s = select_twins(&[((), vec![run(0.1, 1.0), run(0.1, 3.0)])]).unwrap();
        assert_eq!(s.train_logits.0.get(0, 0), 2.0);
    }
}
