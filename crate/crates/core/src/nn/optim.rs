//! Adam optimizer and stepwise learning-rate decay.

use crate::nn::layer::DenseLayer;
use crate::nn::matrix::Matrix;

/// First and second moment estimates for one [`DenseLayer`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m_weights: Matrix,
    v_weights: Matrix,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
    /// Completed update steps; drives bias correction.
    t: u32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Zeroed state with the standard coefficients
    /// (`beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`).
    pub fn new(layer: &DenseLayer) -> Self {
        AdamState {
            m_weights: Matrix::zeros(layer.in_dim(), layer.out_dim()),
            v_weights: Matrix::zeros(layer.in_dim(), layer.out_dim()),
            m_bias: vec![0.0; layer.out_dim()],
            v_bias: vec![0.0; layer.out_dim()],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Drops accumulated moments and restarts bias correction.
    pub fn reset(&mut self) {
        self.m_weights.as_mut_slice().fill(0.0);
        self.v_weights.as_mut_slice().fill(0.0);
        self.m_bias.fill(0.0);
        self.v_bias.fill(0.0);
        self.t = 0;
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }
}

// The flat argument list mirrors the update rule itself; bundling the
// scalars into a struct would only add indirection for this private helper.
#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u32,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// One Adam step on a layer's weights and bias.
///
/// Callers must skip frozen layers; updating one here is a bug, so it
/// asserts.
pub fn adam_step(
    layer: &mut DenseLayer,
    grad_weights: &Matrix,
    grad_bias: &[f64],
    state: &mut AdamState,
    lr: f64,
) {
    assert!(layer.trainable, "adam_step called on a frozen layer");
    assert_eq!(layer.weights.shape(), grad_weights.shape(), "weight grads");
    assert_eq!(layer.bias.len(), grad_bias.len(), "bias grads");
    state.t += 1;
    adam_update(
        layer.weights.as_mut_slice(),
        grad_weights.as_slice(),
        state.m_weights.as_mut_slice(),
        state.v_weights.as_mut_slice(),
        lr,
        state.beta1,
        state.beta2,
        state.epsilon,
        state.t,
    );
    adam_update(
        &mut layer.bias,
        grad_bias,
        &mut state.m_bias,
        &mut state.v_bias,
        lr,
        state.beta1,
        state.beta2,
        state.epsilon,
        state.t,
    );
}

/// Stepwise exponential decay: `lr(epoch) = base * gamma^(epoch / step_size)`
/// with integer division.
#[derive(Debug, Clone, Copy)]
pub struct StepLrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepLrSchedule {
    pub fn new(base_lr: f64, step_size: usize, gamma: f64) -> Self {
        assert!(step_size > 0, "step size must be positive");
        StepLrSchedule {
            base_lr,
            step_size,
            gamma,
        }
    }

    /// Learning rate in force during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Activation;
    use crate::rng::RngStream;

    fn test_layer(seed: u64) -> DenseLayer {
        let mut rng = RngStream::from_seed(seed);
        DenseLayer::init(3, 2, Activation::Linear, 0.0, &mut rng)
    }

    #[test]
    fn zero_gradient_changes_nothing_bitwise() {
        let mut layer = test_layer(1);
        let before_w = layer.weights.clone();
        let before_b = layer.bias.clone();
        let mut state = AdamState::new(&layer);
        let gw = Matrix::zeros(3, 2);
        let gb = vec![0.0; 2];
        adam_step(&mut layer, &gw, &gb, &mut state, 1e-3);
        assert_eq!(layer.weights.as_slice(), before_w.as_slice());
        assert_eq!(layer.bias, before_b);
    }

    #[test]
    fn first_step_moves_by_lr_in_grad_direction() {
        let mut layer = test_layer(2);
        let before = layer.weights.clone();
        let mut state = AdamState::new(&layer);
        let mut gw = Matrix::zeros(3, 2);
        gw.set(0, 0, 0.37);
        gw.set(1, 1, -0.02);
        let lr = 1e-3;
        adam_step(&mut layer, &gw, &[0.0; 2], &mut state, lr);
        // Bias-corrected first step is lr * g / (|g| + eps), essentially
        // lr * sign(g).
        let d00 = layer.weights.get(0, 0) - before.get(0, 0);
        assert!((d00 + lr).abs() < 1e-6, "moved by {d00}");
        let d11 = layer.weights.get(1, 1) - before.get(1, 1);
        assert!((d11 - lr).abs() < 1e-6, "moved by {d11}");
    }

    #[test]
    fn constant_gradient_keeps_moving_the_same_way() {
        let mut layer = test_layer(3);
        let start = layer.weights.get(0, 0);
        let mut state = AdamState::new(&layer);
        let mut gw = Matrix::zeros(3, 2);
        gw.set(0, 0, 1.0);
        let gb = vec![0.0; 2];
        adam_step(&mut layer, &gw, &gb, &mut state, 1e-3);
        let after_one = layer.weights.get(0, 0);
        adam_step(&mut layer, &gw, &gb, &mut state, 1e-3);
        let after_two = layer.weights.get(0, 0);
        assert!(after_one < start);
        assert!(after_two < after_one);
    }

    #[test]
    fn reset_restarts_bias_correction() {
        let mut layer = test_layer(4);
        let mut state = AdamState::new(&layer);
        let mut gw = Matrix::zeros(3, 2);
        gw.set(0, 0, 0.5);
        adam_step(&mut layer, &gw, &[0.0; 2], &mut state, 1e-3);
        assert_eq!(state.steps_taken(), 1);
        state.reset();
        assert_eq!(state.steps_taken(), 0);
        assert!(state.m_weights.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn updating_a_frozen_layer_panics() {
        let mut layer = test_layer(5);
        layer.trainable = false;
        let mut state = AdamState::new(&layer);
        adam_step(&mut layer, &Matrix::zeros(3, 2), &[0.0; 2], &mut state, 1e-3);
    }

    #[test]
    fn step_lr_closed_form() {
        let sched = StepLrSchedule::new(1e-2, 15, 0.9);
        assert_eq!(sched.lr_at(0), 1e-2);
        assert_eq!(sched.lr_at(14), 1e-2);
        assert!((sched.lr_at(15) - 9e-3).abs() < 1e-12);
        assert!((sched.lr_at(29) - 9e-3).abs() < 1e-12);
        assert!((sched.lr_at(30) - 8.1e-3).abs() < 1e-12);
        assert!((sched.lr_at(45) - 7.29e-3).abs() < 1e-12);
    }
}
