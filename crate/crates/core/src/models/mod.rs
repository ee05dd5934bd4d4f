//! Linear and fully-connected ReLU classifiers with hand-written backprop.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`; a forward
//! pass computes `h W^T + b` per layer, with ReLU between hidden layers and
//! raw logits at the output.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{weighted_cross_entropy_with_grad, Matrix, RngStream};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, n_classes: usize) -> Self {
        Self {
            architecture: Architecture::Linear,
            input_dim,
            hidden_dims: Vec::new(),
            n_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, n_classes: usize) -> Self {
        Self {
            architecture: Architecture::Mlp,
            input_dim,
            hidden_dims,
            n_classes,
        }
    }

    /// `[2·14·14, 300, 300, 2]`.
    pub fn colormnist() -> Self {
        Self::mlp(2 * 14 * 14, vec![300, 300], 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        match self.architecture {
            Architecture::Linear if !self.hidden_dims.is_empty() => Err(Error::InvalidArgument(
                "a linear model has no hidden layers".into(),
            )),
            Architecture::Mlp if self.hidden_dims.is_empty() => Err(Error::InvalidArgument(
                "an mlp needs at least one hidden layer".into(),
            )),
            _ if self.hidden_dims.contains(&0) => Err(Error::InvalidArgument(
                "hidden layer sizes must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// `(out_dim, in_dim)` of every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.n_classes);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    layers: Vec<Dense>,
}

/// Fan-in scaled uniform initialisation, `U(-1/√fan_in, 1/√fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ModelParams> {
    spec.validate()?;
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(out_dim, in_dim)| {
            let bound = 1.0 / (in_dim as f64).sqrt();
            let data = (0..out_dim * in_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Dense {
                weight: Matrix::from_vec(out_dim, in_dim, data).expect("sized above"),
                bias: vec![0.0; out_dim],
            }
        })
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        layers,
    })
}

/// Temperature folding variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldMode {
    /// Divide final-layer weights and biases: logits are divided exactly.
    #[default]
    WeightsAndBias,
    /// Divide only final-layer weights, leaving biases untouched.
    WeightsOnly,
}

/// Output of a forward/backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    /// `Σ wᵢ·CEᵢ`.
    pub loss: f64,
    pub grads: ModelParams,
    pub logits: Matrix,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense {
                weight: Matrix::zeros(o, i),
                bias: vec![0.0; o],
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Rebuilds parameters from the flat layout produced by [`Self::to_flat`].
    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        if flat.len() != params.num_params() {
            return Err(Error::shape(
                "flat parameters",
                params.num_params(),
                flat.len(),
            ));
        }
        let mut offset = 0;
        for block in params.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(params)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameter blocks in the order `W0, b0, W1, b1, …`.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Elementwise mean of several parameter sets with identical specs.
    pub fn average(all: &[ModelParams]) -> Result<ModelParams> {
        let first = all
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
        let mut sum = first.to_flat();
        for p in &all[1..] {
            if p.spec != first.spec {
                return Err(Error::shape(
                    "average",
                    "identical specs",
                    "differing specs",
                ));
            }
            for (s, v) in sum.iter_mut().zip(p.to_flat()) {
                *s += v;
            }
        }
        let n = all.len() as f64;
        sum.iter_mut().for_each(|v| *v /= n);
        Self::from_flat(&first.spec, &sum)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "model input columns",
                self.spec.input_dim,
                x.cols(),
            ));
        }
        Ok(())
    }

    /// Logits, `n × n_classes`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = affine(x, &self.layers[0]);
        for layer in &self.layers[1..] {
            relu(&mut h);
            h = affine(&h, layer);
        }
        Ok(h)
    }

    /// Exact gradient of `Σ wᵢ·CE(f(xᵢ), yᵢ)` by backpropagation.
    pub fn backward(&self, x: &Matrix, labels: &[usize], weights: &[f64]) -> Result<Backward> {
        self.backward_with(x, labels, |_| Ok(weights.to_vec()))
    }

    /// Like [`Self::backward`], with example weights chosen after seeing the
    /// logits of the same forward pass.
    pub fn backward_with<F>(&self, x: &Matrix, labels: &[usize], weigh: F) -> Result<Backward>
    where
        F: FnOnce(&Matrix) -> Result<Vec<f64>>,
    {
        self.check_input(x)?;
        if labels.len() != x.rows() {
            return Err(Error::shape("labels", x.rows(), labels.len()));
        }
        // activations[l] is the input to layer l
        let mut activations: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut h = affine(x, &self.layers[0]);
        for layer in &self.layers[1..] {
            relu(&mut h);
            let next = affine(&h, layer);
            activations.push(std::mem::replace(&mut h, next));
        }
        let logits = h;
        let weights = weigh(&logits)?;
        let (loss, mut delta) = weighted_cross_entropy_with_grad(&logits, labels, &weights)?;

        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { x } else { &activations[l - 1] };
            let weight_grad = delta.t_matmul(input)?;
            let bias_grad = delta.column_sums();
            grads.push(Dense {
                weight: weight_grad,
                bias: bias_grad,
            });
            if l > 0 {
                let mut upstream = delta.matmul(&self.layers[l].weight)?;
                for (g, a) in upstream
                    .as_mut_slice()
                    .iter_mut()
                    .zip(activations[l - 1].as_slice())
                {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        grads.reverse();
        Ok(Backward {
            loss,
            grads: ModelParams {
                spec: self.spec.clone(),
                layers: grads,
            },
            logits,
        })
    }

    /// Row-wise argmax of the logits; ties go to the smallest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.argmax_rows())
    }

    /// Divides final-layer row `c` by `temps[c]` so that subsequent logits
    /// equal the old ones divided per class by the temperatures.
    pub fn fold_temperature(&self, temps: &[f64], mode: FoldMode) -> Result<ModelParams> {
        if temps.len() != self.spec.n_classes {
            return Err(Error::shape(
                "temperatures",
                self.spec.n_classes,
                temps.len(),
            ));
        }
        if let Some(t) = temps.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be positive, got {t}"
            )));
        }
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("at least one layer");
        for (c, &t) in temps.iter().enumerate() {
            last.weight.row_mut(c).iter_mut().for_each(|w| *w /= t);
            if mode == FoldMode::WeightsAndBias {
                last.bias[c] /= t;
            }
        }
        Ok(out)
    }
}

fn affine(x: &Matrix, layer: &Dense) -> Matrix {
    let mut out = x.matmul_t(&layer.weight).expect("shapes checked by caller");
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    out
}

fn relu(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{
        class_balanced_weights, cross_entropy_per_example, finite_difference_gradient, StreamLabel,
    };
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamLabel::Init)
    }

    fn random_matrix(rows: usize, cols: usize, r: &mut RngStream) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_shapes_and_zero_bias() {
        let p = init_params(&ModelSpec::linear(4, 2), &mut rng(0)).unwrap();
        assert_eq!(p.layers().len(), 1);
        assert_eq!(p.layers()[0].weight.shape(), (2, 4));
        assert_eq!(p.layers()[0].bias, vec![0.0, 0.0]);

        let p = init_params(&ModelSpec::colormnist(), &mut rng(0)).unwrap();
        let shapes: Vec<_> = p.layers().iter().map(|l| l.weight.shape()).collect();
        assert_eq!(shapes, vec![(300, 392), (300, 300), (2, 300)]);
        assert!(p.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let bound = 1.0 / 392f64.sqrt();
        assert!(p.layers()[0]
            .weight
            .as_slice()
            .iter()
            .all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::mlp(5, vec![4, 3], 3);
        let a = init_params(&spec, &mut rng(11)).unwrap();
        let b = init_params(&spec, &mut rng(11)).unwrap();
        let c = init_params(&spec, &mut rng(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::linear(3, 1).validate().is_err());
        assert!(ModelSpec::mlp(3, vec![], 2).validate().is_err());
        assert!(ModelSpec::mlp(3, vec![4, 0], 2).validate().is_err());
        let mut bad = ModelSpec::linear(3, 2);
        bad.hidden_dims = vec![2];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        for spec in [ModelSpec::linear(3, 2), ModelSpec::mlp(3, vec![4, 4], 2)] {
            let p = ModelParams::zeros(&spec).unwrap();
            assert!(p.forward(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_selects_weight_column_on_one_hot_input() {
        let mut p = ModelParams::zeros(&ModelSpec::linear(3, 2)).unwrap();
        p.layers_mut()[0].weight = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(p.forward(&x).unwrap().as_slice(), &[2.0, 5.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::zeros(&ModelSpec::linear(3, 2)).unwrap();
        assert!(p.forward(&Matrix::zeros(1, 4)).is_err());
        assert!(p.backward(&Matrix::zeros(2, 3), &[0], &[1.0]).is_err());
    }

    #[test]
    fn predict_tie_break_and_order() {
        let mut p = ModelParams::zeros(&ModelSpec::linear(2, 2)).unwrap();
        p.layers_mut()[0].weight = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]]).unwrap();
        assert_eq!(p.predict(&x).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn predict_invariant_under_constant_logit_shift() {
        let mut r = rng(3);
        let spec = ModelSpec::mlp(4, vec![6], 3);
        let p = init_params(&spec, &mut r).unwrap();
        let x = random_matrix(30, 4, &mut r);
        let mut shifted = p.clone();
        shifted
            .layers_mut()
            .last_mut()
            .unwrap()
            .bias
            .iter_mut()
            .for_each(|b| *b += 17.25);
        assert_eq!(p.predict(&x).unwrap(), shifted.predict(&x).unwrap());
    }

    fn check_gradient(spec: &ModelSpec, seed: u64) {
        let mut r = rng(seed);
        let p = init_params(spec, &mut r).unwrap();
        let n = 6;
        let x = random_matrix(n, spec.input_dim, &mut r);
        let labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        let (weights, _) = class_balanced_weights(&labels, spec.n_classes);
        let analytic = p.backward(&x, &labels, &weights).unwrap().grads.to_flat();
        // Oracle: the loss recomputed from scratch through the forward pass.
        let loss = |flat: &[f64]| {
            let q = ModelParams::from_flat(spec, flat).unwrap();
            let ce = cross_entropy_per_example(&q.forward(&x).unwrap(), &labels).unwrap();
            ce.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>()
        };
        let numeric = finite_difference_gradient(loss, &p.to_flat(), 1e-5).unwrap();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            check_gradient(&ModelSpec::linear(3, 2), seed);
            check_gradient(&ModelSpec::mlp(3, vec![5, 4], 3), seed);
        }
    }

    #[test]
    fn backward_is_linear_in_weights() {
        let mut r = rng(9);
        let spec = ModelSpec::mlp(3, vec![4], 2);
        let p = init_params(&spec, &mut r).unwrap();
        let x = random_matrix(5, 3, &mut r);
        let labels = [0, 1, 1, 0, 1];
        let w = [0.5, 1.0 / 3.0, 1.0 / 3.0, 0.5, 1.0 / 3.0];
        let w2: Vec<f64> = w.iter().map(|v| v * 2.0).collect();
        let g1 = p.backward(&x, &labels, &w).unwrap();
        let g2 = p.backward(&x, &labels, &w2).unwrap();
        assert_eq!(g2.loss, 2.0 * g1.loss);
        for (a, b) in g1.grads.to_flat().iter().zip(g2.grads.to_flat()) {
            assert_eq!(b, 2.0 * a);
        }
    }

    #[test]
    fn gradient_vanishes_at_saturated_optimum() {
        let mut p = ModelParams::zeros(&ModelSpec::linear(2, 2)).unwrap();
        p.layers_mut()[0].weight = Matrix::from_rows(&[[50.0, -50.0], [-50.0, 50.0]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = p.backward(&x, &[0, 1], &[1.0, 1.0]).unwrap();
        let norm: f64 = g.grads.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "{norm}");
    }

    #[test]
    fn fold_temperature_scales_logits() {
        let mut r = rng(5);
        let x = random_matrix(8, 3, &mut r);
        for (spec, tol) in [
            (ModelSpec::linear(3, 2), 1e-12),
            (ModelSpec::mlp(3, vec![7, 5], 2), 1e-9),
        ] {
            let mut p = init_params(&spec, &mut r).unwrap();
            p.layers_mut().last_mut().unwrap().bias = vec![0.3, -0.7];
            let before = p.forward(&x).unwrap();
            let temps = [2.0, 0.5];
            let after = p
                .fold_temperature(&temps, FoldMode::WeightsAndBias)
                .unwrap()
                .forward(&x)
                .unwrap();
            for i in 0..x.rows() {
                for c in 0..2 {
                    assert_abs_diff_eq!(
                        after.get(i, c),
                        before.get(i, c) / temps[c],
                        epsilon = tol
                    );
                }
            }
            let same = p
                .fold_temperature(&[1.0, 1.0], FoldMode::WeightsAndBias)
                .unwrap();
            assert_eq!(same, p);
            let equal = p
                .fold_temperature(&[3.0, 3.0], FoldMode::WeightsAndBias)
                .unwrap();
            assert_eq!(equal.predict(&x).unwrap(), p.predict(&x).unwrap());
        }
    }

    #[test]
    fn fold_weights_only_keeps_bias() {
        let mut p = ModelParams::zeros(&ModelSpec::linear(1, 2)).unwrap();
        p.layers_mut()[0].weight = Matrix::from_rows(&[[4.0], [2.0]]).unwrap();
        p.layers_mut()[0].bias = vec![1.0, 1.0];
        let x = Matrix::from_rows(&[[1.0]]).unwrap();
        let both = p
            .fold_temperature(&[2.0, 2.0], FoldMode::WeightsAndBias)
            .unwrap();
        assert_eq!(both.forward(&x).unwrap().as_slice(), &[2.5, 1.5]);
        let weights_only = p
            .fold_temperature(&[2.0, 2.0], FoldMode::WeightsOnly)
            .unwrap();
        assert_eq!(weights_only.forward(&x).unwrap().as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn fold_rejects_nonpositive_temperature() {
        let p = ModelParams::zeros(&ModelSpec::linear(1, 2)).unwrap();
        assert!(p
            .fold_temperature(&[1.0, 0.0], FoldMode::default())
            .is_err());
        assert!(p
            .fold_temperature(&[1.0, -2.0], FoldMode::default())
            .is_err());
        assert!(p.fold_temperature(&[1.0], FoldMode::default()).is_err());
    }

    #[test]
    fn flat_round_trip_and_average() {
        let spec = ModelSpec::mlp(3, vec![2], 2);
        let p = init_params(&spec, &mut rng(1)).unwrap();
        assert_eq!(ModelParams::from_flat(&spec, &p.to_flat()).unwrap(), p);
        let avg = ModelParams::average(&[p.clone(), p.clone(), p.clone()]).unwrap();
        for (a, b) in avg.to_flat().iter().zip(p.to_flat()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
