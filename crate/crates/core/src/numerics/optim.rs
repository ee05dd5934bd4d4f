//! SGD with momentum and Adam over flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    /// Adam with the usual defaults `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step_count: u64,
    /// Velocity (SGD) or first moment (Adam), one buffer per block.
    first: Vec<Vec<f64>>,
    /// Second moment; Adam only.
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {weight_decay}"
            )));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1)")))
            }
        };
        match kind {
            OptimizerKind::SgdMomentum { momentum } => unit("momentum", momentum)?,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if eps <= 0.0 {
                    return Err(Error::InvalidArgument(format!("adam eps {eps}")));
                }
            }
        }
        Ok(Self {
            kind,
            lr,
            weight_decay,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter block in place.
    ///
    /// Weight decay is coupled: `wd·θ` is added to the gradient before the
    /// moment updates.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer blocks", params.len(), grads.len()));
        }
        for (b, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("optimizer block", p.len(), g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter block {b}")));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape(
                "optimizer state",
                "blocks matching the first step",
                "different parameter shapes",
            ));
        }
        self.step_count += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((theta, &grad), vel) in p.iter_mut().zip(*g).zip(v.iter_mut()) {
                        *vel = momentum * *vel + grad + wd * *theta;
                        *theta -= lr * *vel;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((theta, &grad), m), v) in
                        p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let grad = grad + wd * *theta;
                        *m = beta1 * *m + (1.0 - beta1) * grad;
                        *v = beta2 * *v + (1.0 - beta2) * grad * grad;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
