//! Per-class temperature scaling fit on held-in logits.

use crate::error::{Error, Result};
use crate::models::{FoldMode, ModelParams};
use crate::numerics::{class_balanced_weights, log_sum_exp, Matrix};

#[derive(Debug, Clone)]
pub struct TemperatureFit {
    /// `temps[twin][class]`.
    pub temps: Vec<Vec<f64>>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn loss_and_grad(
    logits: &Matrix,
    labels: &[usize],
    weights: &[f64],
    twin_of: &[usize],
    temps: &[Vec<f64>],
) -> (f64, Vec<Vec<f64>>) {
    let k = logits.cols();
    let mut grad = vec![vec![0.0; k]; temps.len()];
    let mut scaled = vec![0.0; k];
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let z = logits.row(i);
        let t = &temps[twin_of[i]];
        for c in 0..k {
            scaled[c] = z[c] / t[c];
        }
        let lse = log_sum_exp(&scaled);
        let y = labels[i];
        loss += weights[i] * (lse - scaled[y]);
        let g = &mut grad[twin_of[i]];
        for c in 0..k {
            let p = (scaled[c] - lse).exp();
            let residual = p - if c == y { 1.0 } else { 0.0 };
            g[c] -= weights[i] * residual * z[c] / (t[c] * t[c]);
        }
    }
    (loss, grad)
}

/// Gradient descent on per-(twin, class) temperatures, all starting at 1,
/// minimising the class-balanced cross-entropy of `logits / temps`.
///
/// Row `i` is scored with the temperatures of twin `twin_of[i]`. The best
/// temperatures seen are returned, so the final loss never exceeds the
/// initial one.
pub fn fit_temperatures(
    logits: &Matrix,
    labels: &[usize],
    twin_of: &[usize],
    n_twins: usize,
    lr: f64,
    iters: usize,
) -> Result<TemperatureFit> {
    if labels.len() != logits.rows() || twin_of.len() != logits.rows() {
        return Err(Error::shape(
            "calibration inputs",
            logits.rows(),
            labels.len(),
        ));
    }
    if twin_of.iter().any(|&t| t >= n_twins) {
        return Err(Error::InvalidArgument("twin index out of range".into()));
    }
    logits.ensure_finite("calibration logits")?;
    let (weights, _) = class_balanced_weights(labels, logits.cols());
    let mut temps = vec![vec![1.0; logits.cols()]; n_twins];
    let (initial_loss, mut grad) = loss_and_grad(logits, labels, &weights, twin_of, &temps);
    if !initial_loss.is_finite() {
        return Err(Error::CalibrationDiverged { loss: initial_loss });
    }
    let mut best = (initial_loss, temps.clone());
    for _ in 0..iters {
        for (t, g) in temps.iter_mut().zip(&grad) {
            for (tc, gc) in t.iter_mut().zip(g) {
                *tc -= lr * gc;
            }
        }
        if temps.iter().flatten().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::CalibrationDiverged { loss: f64::NAN });
        }
        let (loss, next) = loss_and_grad(logits, labels, &weights, twin_of, &temps);
        if !loss.is_finite() {
            return Err(Error::CalibrationDiverged { loss });
        }
        if loss < best.0 {
            best = (loss, temps.clone());
        }
        grad = next;
    }
    Ok(TemperatureFit {
        temps: best.1,
        initial_loss,
        final_loss: best.0,
    })
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub params_a: ModelParams,
    pub params_b: ModelParams,
    pub temps_a: Vec<f64>,
    pub temps_b: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Fits temperatures on the frozen held-in logits of both twins (each
/// example scored by the twin holding it in) and folds them into the final
/// layers.
pub fn calibrate(
    params_a: &ModelParams,
    params_b: &ModelParams,
    x: &Matrix,
    y: &[usize],
    mask_a: &[bool],
    lr: f64,
    iters: usize,
    fold: FoldMode,
) -> Result<Calibration> {
    if mask_a.len() != x.rows() {
        return Err(Error::shape("held-in mask", x.rows(), mask_a.len()));
    }
    let logits_a = params_a.forward(x)?;
    let logits_b = params_b.forward(x)?;
    let mut held_in = Matrix::zeros(x.rows(), logits_a.cols());
    let mut twin_of = Vec::with_capacity(x.rows());
    for (i, &a) in mask_a.iter().enumerate() {
        let src = if a { &logits_a } else { &logits_b };
        held_in.row_mut(i).copy_from_slice(src.row(i));
        twin_of.push(usize::from(!a));
    }
    let fit = fit_temperatures(&held_in, y, &twin_of, 2, lr, iters)?;
    let temps_a = fit.temps[0].clone();
    let temps_b = fit.temps[1].clone();
    Ok(Calibration {
        params_a: params_a.fold_temperature(&temps_a, fold)?,
        params_b: params_b.fold_temperature(&temps_b, fold)?,
        temps_a,
        temps_b,
        initial_loss: fit.initial_loss,
        final_loss: fit.final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, ModelSpec};
    use crate::numerics::{balanced_cross_entropy, RngStream, StreamLabel};
    use approx::assert_abs_diff_eq;

    /// Logits whose softmax matches the label frequencies exactly:
    /// `(ln 3, 0)` thrice with label 0 and once with label 1, and the mirror.
    fn calibrated(scale: f64) -> (Matrix, Vec<usize>) {
        let l3 = 3f64.ln() * scale;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (row, ys) in [([l3, 0.0], [0, 0, 0, 1]), ([0.0, l3], [1, 1, 1, 0])] {
            for y in ys {
                rows.push(row);
                labels.push(y);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn calibrated_logits_are_a_fixed_point() {
        let (logits, labels) = calibrated(1.0);
        let twin_of = vec![0; labels.len()];
        let fit = fit_temperatures(&logits, &labels, &twin_of, 1, 1e-2, 1000).unwrap();
        for t in &fit.temps[0] {
            assert_abs_diff_eq!(*t, 1.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(fit.final_loss, fit.initial_loss, epsilon = 1e-6);
    }

    #[test]
    fn recovers_known_overconfidence() {
        let (logits, labels) = calibrated(10.0);
        let twin_of = vec![0; labels.len()];
        let fit = fit_temperatures(&logits, &labels, &twin_of, 1, 1.0, 20_000).unwrap();
        for t in &fit.temps[0] {
            assert!((t / 10.0 - 1.0).abs() < 0.05, "{t}");
        }
        assert!(fit.final_loss <= fit.initial_loss);
    }

    #[test]
    fn twins_get_independent_temperatures() {
        let (sharp, labels) = calibrated(4.0);
        let (flat, _) = calibrated(1.0);
        let mut rows: Vec<Vec<f64>> = sharp.rows_iter().map(<[f64]>::to_vec).collect();
        rows.extend(flat.rows_iter().map(<[f64]>::to_vec));
        let logits = Matrix::from_rows(&rows).unwrap();
        let all_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let twin_of: Vec<usize> = (0..16).map(|i| usize::from(i >= 8)).collect();
        let fit = fit_temperatures(&logits, &all_labels, &twin_of, 2, 1.0, 20_000).unwrap();
        assert!((fit.temps[0][0] / 4.0 - 1.0).abs() < 0.05);
        assert!((fit.temps[1][0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn divergence_is_reported() {
        // underconfident logits: the gradient pushes t below zero
        let (logits, labels) = calibrated(0.1);
        let twin_of = vec![0; labels.len()];
        let err = fit_temperatures(&logits, &labels, &twin_of, 1, 1e6, 10).unwrap_err();
        assert!(matches!(err, Error::CalibrationDiverged { .. }));
        assert!(err
            .to_string()
            .contains("smaller calibration learning rate"));
    }

    #[test]
    fn calibrate_folds_into_twins_and_descends() {
        let spec = ModelSpec::mlp(3, vec![8], 2);
        let mut rng = RngStream::new(1, StreamLabel::Init);
        let mut a = init_params(&spec, &mut rng).unwrap();
        let mut b = init_params(&spec, &mut rng).unwrap();
        // exaggerate the random initial logits
        a.scale(3.0);
        b.scale(3.0);
        let x = Matrix::from_vec(
            40,
            3,
            (0..120).map(|k| ((k * 7) as f64 * 0.31).sin()).collect(),
        )
        .unwrap();
        let y: Vec<usize> = (0..40).map(|i| (i * 5 % 7) % 2).collect();
        let mask: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        let cal = calibrate(&a, &b, &x, &y, &mask, 1e-2, 1000, FoldMode::WeightsAndBias).unwrap();
        assert!(cal.final_loss <= cal.initial_loss);

        // the folded twins reproduce the fitted loss on held-in rows
        let la = cal.params_a.forward(&x).unwrap();
        let lb = cal.params_b.forward(&x).unwrap();
        let mut held_in = Matrix::zeros(40, 2);
        for i in 0..40 {
            let src = if mask[i] { &la } else { &lb };
            held_in.row_mut(i).copy_from_slice(src.row(i));
        }
        let loss = balanced_cross_entropy(&held_in, &y).unwrap().value;
        assert_abs_diff_eq!(loss, cal.final_loss, epsilon = 1e-9);
    }
}
