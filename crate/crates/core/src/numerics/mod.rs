//! Dense matrices, losses, optimizers and seeded randomness.
//!
//! Everything is `f64`.

mod gradcheck;
mod loss;
mod matrix;
mod optim;
mod rng;

pub use gradcheck::finite_difference_gradient;
pub use loss::{
    balanced_cross_entropy, class_balanced_weights, cross_entropy_per_example, softmax,
    weighted_cross_entropy_with_grad, BalancedLoss,
};
pub(crate) use loss::{log_sum_exp, softmax_in_place};
pub use matrix::{argmax, Matrix};
pub use optim::{OptimizerKind, OptimizerState};
pub use rng::{derive_seed, RngStream, StreamLabel};
