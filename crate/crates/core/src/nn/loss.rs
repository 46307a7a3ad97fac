//! Loss functions and their analytic gradients.
//!
//! Every loss returns `(value, gradient)` where the gradient is taken with
//! respect to the first argument and already includes the mean aggregation
//! factor, so callers can feed it straight into the backward pass.

use crate::error::{Error, Result};
use crate::nn::layer::sigmoid_scalar;
use crate::nn::matrix::Matrix;

fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: format!("{}x{}", a.rows(), a.cols()),
            rhs: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    Ok(())
}

/// Mean squared error over all entries.
///
/// `loss = mean((pred - target)^2)`, `grad = 2 (pred - target) / count`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    check_same_shape("mse_loss", pred, target)?;
    let count = pred.as_slice().len() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / count;
    }
    Ok((sum / count, grad))
}

/// Per-class positive weights and per-instance weights for
/// [`bce_with_logits`]; `None` means all ones.
#[derive(Debug, Clone, Copy, Default)]
pub struct BceWeights<'a> {
    /// One factor per class applied to the positive term.
    pub pos_weight: Option<&'a [f64]>,
    /// One factor per batch instance applied to that instance's entries.
    pub sample_weight: Option<&'a [f64]>,
}

/// Binary cross-entropy on logits, averaged over all entries.
///
/// Per entry with logit `x`, target `y`, positive weight `p` and instance
/// weight `w`:
///
/// `l = -w * (p * y * log(sigmoid(x)) + (1 - y) * log(1 - sigmoid(x)))`
///
/// evaluated in the rearranged form
/// `l = w * ((1 - y) * x + (p*y + 1 - y) * softplus(-x))` with
/// `softplus(-x) = max(-x, 0) + log1p(exp(-|x|))`, which stays finite for
/// logits of any magnitude.
pub fn bce_with_logits(
    logits: &Matrix,
    targets: &Matrix,
    weights: BceWeights<'_>,
) -> Result<(f64, Matrix)> {
    check_same_shape("bce_with_logits", logits, targets)?;
    if let Some(p) = weights.pos_weight {
        if p.len() != logits.cols() {
            return Err(Error::Input(format!(
                "pos_weight has {} entries for {} classes",
                p.len(),
                logits.cols()
            )));
        }
    }
    if let Some(w) = weights.sample_weight {
        if w.len() != logits.rows() {
            return Err(Error::Input(format!(
                "sample_weight has {} entries for {} instances",
                w.len(),
                logits.rows()
            )));
        }
    }
    if let Some(bad) = targets.as_slice().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Input(format!(
            "bce_with_logits targets must be 0 or 1, got {bad}"
        )));
    }
    let (rows, cols) = logits.shape();
    let count = (rows * cols) as f64;
    let mut grad = Matrix::zeros(rows, cols);
    let mut sum = 0.0;
    for i in 0..rows {
        let w = weights.sample_weight.map_or(1.0, |ws| ws[i]);
        let lrow = logits.row(i);
        let trow = targets.row(i);
        let grow = grad.row_mut(i);
        for c in 0..cols {
            let p = weights.pos_weight.map_or(1.0, |ps| ps[c]);
            let (x, y) = (lrow[c], trow[c]);
            let softplus_neg = (-x).max(0.0) + (-x.abs()).exp().ln_1p();
            let coeff = p * y + 1.0 - y;
            sum += w * ((1.0 - y) * x + coeff * softplus_neg);
            // d/dx softplus(-x) = -(1 - sigmoid(x))
            grow[c] = w * ((1.0 - y) - coeff * (1.0 - sigmoid_scalar(x))) / count;
        }
    }
    Ok((sum / count, grad))
}

/// Softmax cross-entropy against integer class indices, averaged over the
/// batch. Logits are max-shifted before exponentiation.
///
/// `grad = (softmax(logits) - onehot(class)) / batch`.
pub fn cross_entropy(logits: &Matrix, classes: &[usize]) -> Result<(f64, Matrix)> {
    if classes.len() != logits.rows() {
        return Err(Error::Input(format!(
            "{} class labels for {} logit rows",
            classes.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= logits.cols()) {
        return Err(Error::Input(format!(
            "class index {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let (rows, cols) = logits.shape();
    let n = rows as f64;
    let mut grad = Matrix::zeros(rows, cols);
    let mut sum = 0.0;
    for i in 0..rows {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &x in row {
            denom += (x - max).exp();
        }
        let log_denom = denom.ln();
        sum += log_denom - (row[classes[i]] - max);
        let grow = grad.row_mut(i);
        for c in 0..cols {
            let softmax = (row[c] - max).exp() / denom;
            let indicator = if c == classes[i] { 1.0 } else { 0.0 };
            grow[c] = (softmax - indicator) / n;
        }
    }
    Ok((sum / n, grad))
}

/// L2 penalty `lambda * sum(w^2)` over the given weight matrices. Biases are
/// the caller's to exclude; pass weight matrices only.
pub fn l2_penalty(weights: &[&Matrix], lambda: f64) -> f64 {
    let mut sum = 0.0;
    for w in weights {
        for &x in w.as_slice() {
            sum += x * x;
        }
    }
    lambda * sum
}

/// Adds the L2 gradient `2 * lambda * w` into an existing weight gradient.
pub fn l2_backward(weights: &Matrix, lambda: f64, grad: &mut Matrix) {
    assert_eq!(weights.shape(), grad.shape(), "l2_backward shapes");
    for (g, &w) in grad.as_mut_slice().iter_mut().zip(weights.as_slice()) {
        *g += 2.0 * lambda * w;
    }
}
