use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const MAX_HOLDOUT_ATTEMPTS: usize = 100;

/// Fair-coin held-in mask for twin `a`; twin `b` takes the complement.
///
/// The draw is repeated until both halves contain every class present in
/// `labels`.
pub fn assign_holdout(
    labels: &[usize],
    n_classes: usize,
    rng: &mut RngStream,
) -> Result<Vec<bool>> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 examples to split between twins, got {n}"
        )));
    }
    let mut present = vec![false; n_classes];
    for &y in labels {
        present[y] = true;
    }
    for _ in 0..MAX_HOLDOUT_ATTEMPTS {
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let mut seen = [vec![false; n_classes], vec![false; n_classes]];
        for (&y, &a) in labels.iter().zip(&mask) {
            seen[usize::from(a)][y] = true;
        }
        if seen.iter().all(|s| s == &present) {
            return Ok(mask);
        }
    }
    Err(Error::HoldoutExhausted {
        attempts: MAX_HOLDOUT_ATTEMPTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamLabel;

    #[test]
    fn fair_split_at_scale() {
        let n = 100_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mask = assign_holdout(&labels, 2, &mut RngStream::new(0, StreamLabel::Mask)).unwrap();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.005, "{frac}");
    }

    #[test]
    fn same_seed_same_mask() {
        let labels = vec![0, 1, 0, 1, 1, 0, 0, 1];
        let a = assign_holdout(&labels, 2, &mut RngStream::new(4, StreamLabel::Mask)).unwrap();
        let b = assign_holdout(&labels, 2, &mut RngStream::new(4, StreamLabel::Mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn both_twins_see_every_class() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        for seed in 0..50 {
            let mask =
                assign_holdout(&labels, 3, &mut RngStream::new(seed, StreamLabel::Mask)).unwrap();
            for c in 0..3 {
                assert!(labels.iter().zip(&mask).any(|(&y, &m)| y == c && m));
                assert!(labels.iter().zip(&mask).any(|(&y, &m)| y == c && !m));
            }
        }
    }

    #[test]
    fn singleton_class_exhausts_attempts() {
        let labels = vec![0, 0, 0, 1];
        let err =
            assign_holdout(&labels, 2, &mut RngStream::new(0, StreamLabel::Mask)).unwrap_err();
        assert!(matches!(err, Error::HoldoutExhausted { attempts: 100 }));
        assert!(assign_holdout(&[0], 2, &mut RngStream::new(0, StreamLabel::Mask)).is_err());
    }
}
