//! Central finite differences, used as an independent gradient oracle.

use crate::error::{Error, Result};

/// `(L(θ + h·eᵢ) − L(θ − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h}"
        )));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = loss(&probe);
        probe[i] = original - h;
        let minus = loss(&probe);
        probe[i] = original;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss while probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_and_linear() {
        let g = finite_difference_gradient(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_difference_gradient(|t| t.iter().sum(), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        for v in g {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn non_finite_loss_errors() {
        let err = finite_difference_gradient(|t| (t[0]).ln(), &[0.0], 1e-5);
        assert!(err.is_err());
    }
}
