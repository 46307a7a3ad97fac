//! Numeric core: matrices, dense layers, losses, optimizer, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod matrix;
pub mod optim;

pub use gradcheck::{grad_check, grad_check_probed, strided_probes, FnPair, ScalarFn};
pub use layer::{
    dense_backward, dense_forward, dropout, dropout_backward, relu, relu_backward, sigmoid,
    sigmoid_scalar, Activation, DenseLayer,
};
pub use loss::{bce_with_logits, cross_entropy, l2_backward, l2_penalty, mse_loss, BceWeights};
pub use matrix::Matrix;
pub use optim::{adam_step, AdamState, StepLrSchedule};
