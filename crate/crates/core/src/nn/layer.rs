//! Dense layers, activations, and dropout.
//!
//! A [`DenseLayer`] is an affine map with an activation tag. Dropout is a
//! separate operation applied to a layer's output during training; because
//! the dropout mask scales kept entries by a positive factor and zeroes the
//! rest, applying it after ReLU is entrywise identical to applying it between
//! the affine map and the ReLU.

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::rng::RngStream;

/// Activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

/// Fully connected layer: `output = activation(input * weights + bias)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// `in_dim x out_dim`, row-major.
    pub weights: Matrix,
    /// One entry per output unit.
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Dropout rate applied to this layer's output during training; 0 = none.
    pub dropout: f64,
    /// Frozen layers are skipped by the optimizer.
    pub trainable: bool,
}

impl DenseLayer {
    /// Layer with weights drawn uniformly from
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]` and zero bias.
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        DenseLayer {
            weights: Matrix::from_vec(in_dim, out_dim, data),
            bias: vec![0.0; out_dim],
            activation,
            dropout,
            trainable: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Number of parameters (weights plus bias).
    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// Entrywise `max(x, 0)`.
pub fn relu(input: &Matrix) -> Matrix {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Gradient through ReLU: passes where the forward output was positive.
/// `output` is the forward result, `grad_out` the gradient flowing back.
pub fn relu_backward(output: &Matrix, grad_out: &Matrix) -> Matrix {
    assert_eq!(output.shape(), grad_out.shape(), "relu_backward shapes");
    let mut grad = grad_out.clone();
    for (g, &y) in grad.as_mut_slice().iter_mut().zip(output.as_slice()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

/// Numerically stable logistic function, branched on sign so neither branch
/// ever exponentiates a large positive value.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Entrywise logistic function.
pub fn sigmoid(input: &Matrix) -> Matrix {
    input.map(sigmoid_scalar)
}

/// Inverted dropout.
///
/// In training mode each entry survives with probability `1 - rate` and is
/// scaled by `1 / (1 - rate)`, so the expected value is preserved and
/// evaluation needs no rescaling. The returned mask holds the factor applied
/// to each entry (0 or the survivor scale) and is reused by the backward
/// pass. In evaluation mode (or at rate 0) the input passes through
/// unchanged, no mask is returned, and no random draws are consumed.
pub fn dropout(
    input: &Matrix,
    rate: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Matrix, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mut mask = vec![0.0; input.as_slice().len()];
    for (m, x) in mask.iter_mut().zip(out.as_mut_slice()) {
        if rng.next_f64() >= rate {
            *m = scale;
            *x *= scale;
        } else {
            *x = 0.0;
        }
    }
    Ok((out, Some(mask)))
}

/// Gradient through dropout: multiply by the stored mask factors.
pub fn dropout_backward(grad_out: &Matrix, mask: &[f64]) -> Matrix {
    assert_eq!(grad_out.as_slice().len(), mask.len(), "dropout mask length");
    let mut grad = grad_out.clone();
    for (g, &m) in grad.as_mut_slice().iter_mut().zip(mask) {
        *g *= m;
    }
    grad
}

/// Forward pass of one layer: affine map plus the layer's activation.
pub fn dense_forward(layer: &DenseLayer, input: &Matrix) -> Result<Matrix> {
    if input.cols() != layer.in_dim() {
        return Err(Error::Shape {
            op: "dense_forward",
            lhs: format!("{}x{}", input.rows(), input.cols()),
            rhs: format!("{}x{}", layer.in_dim(), layer.out_dim()),
        });
    }
    let mut out = input.matmul(&layer.weights)?;
    out.add_row_broadcast(&layer.bias);
    Ok(match layer.activation {
        Activation::Relu => relu(&out),
        Activation::Linear => out,
    })
}

/// Backward pass of one layer.
///
/// `input` and `output` are the forward pass's operands (`output` before any
/// dropout that followed the layer). Returns the gradient with respect to the
/// input along with the weight and bias gradients.
pub fn dense_backward(
    layer: &DenseLayer,
    input: &Matrix,
    output: &Matrix,
    grad_out: &Matrix,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let grad_pre = match layer.activation {
        Activation::Relu => relu_backward(output, grad_out),
        Activation::Linear => grad_out.clone(),
    };
    let grad_weights = input.matmul_at_b(&grad_pre)?;
    let mut grad_bias = vec![0.0; layer.out_dim()];
    for i in 0..grad_pre.rows() {
        for (b, &g) in grad_bias.iter_mut().zip(grad_pre.row(i)) {
            *b += g;
        }
    }
    let grad_input = grad_pre.matmul_a_bt(&layer.weights)?;
    Ok((grad_input, grad_weights, grad_bias))
}
