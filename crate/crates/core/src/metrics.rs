//! Evaluation metrics for both labeling tasks.
//!
//! Multi-label scores are example-based: per-instance Jaccard accuracy,
//! Hamming loss over all indicator bits, precision over predicted labels,
//! recall over true labels, and per-class indicator accuracy. Single-label
//! scoring is plain accuracy, overall and per class. The top-k evaluation
//! bridges the two tasks: it turns single-label logits into a label set of
//! instance-specific size and scores it with the multi-label metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::predict_topk;
use crate::nn::Matrix;

/// Example-based multi-label scores.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MultiLabelReport {
    /// Mean per-instance Jaccard index |y ∩ ŷ| / |y ∪ ŷ|.
    pub accuracy: f64,
    /// Fraction of all n*C indicator bits predicted wrongly.
    pub hamming_loss: f64,
    /// Mean per-instance |y ∩ ŷ| / |ŷ|; an empty prediction contributes 0.
    pub precision: f64,
    /// Mean per-instance |y ∩ ŷ| / |y|.
    pub recall: f64,
    /// Per class: fraction of instances whose indicator bit is correct.
    pub per_class_accuracy: Vec<f64>,
    pub n_instances: usize,
}

/// Single-label accuracy, overall and per class.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SingleLabelReport {
    pub overall_accuracy: f64,
    /// Correct predictions within each class over that class's frequency;
    /// `None` for classes absent from the truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// How many instances carry each class.
    pub per_class_frequency: Vec<usize>,
    pub n_instances: usize,
}

fn require_binary(m: &Matrix, what: &str) -> Result<()> {
    for (i, &v) in m.as_slice().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Input(format!(
                "{what} must be one-hot; entry {i} is {v}"
            )));
        }
    }
    Ok(())
}

/// Scores one-hot predictions against one-hot truth. Every truth row must
/// have at least one set bit (instances with no labels cannot be scored —
/// drop them first and report the count).
pub fn multilabel_report(truth: &Matrix, pred: &Matrix) -> Result<MultiLabelReport> {
    if truth.shape() != pred.shape() {
        return Err(Error::Input(format!(
            "truth is {:?} but predictions are {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    let (n, classes) = truth.shape();
    if n == 0 || classes == 0 {
        return Err(Error::Input("cannot score an empty label matrix".into()));
    }
    require_binary(truth, "truth")?;
    require_binary(pred, "prediction")?;

    let mut jaccard_sum = 0.0;
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut wrong_bits = 0usize;
    let mut class_correct = vec![0usize; classes];
    for i in 0..n {
        let t = truth.row(i);
        let p = pred.row(i);
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut truth_count = 0usize;
        let mut pred_count = 0usize;
        for c in 0..classes {
            let ty = t[c] == 1.0;
            let py = p[c] == 1.0;
            inter += usize::from(ty && py);
            union += usize::from(ty || py);
            truth_count += usize::from(ty);
            pred_count += usize::from(py);
            wrong_bits += usize::from(ty != py);
            class_correct[c] += usize::from(ty == py);
        }
        if truth_count == 0 {
            return Err(Error::Input(format!(
                "truth row {i} has no labels; filter unlabeled instances before scoring"
            )));
        }
        jaccard_sum += inter as f64 / union as f64;
        recall_sum += inter as f64 / truth_count as f64;
        if pred_count > 0 {
            precision_sum += inter as f64 / pred_count as f64;
        }
    }
    Ok(MultiLabelReport {
        accuracy: jaccard_sum / n as f64,
        hamming_loss: wrong_bits as f64 / (n * classes) as f64,
        precision: precision_sum / n as f64,
        recall: recall_sum / n as f64,
        per_class_accuracy: class_correct.iter().map(|&c| c as f64 / n as f64).collect(),
        n_instances: n,
    })
}

/// Scores predicted class indices against true ones. Indices must lie in
/// `0..class_count`.
pub fn single_label_report(
    truth: &[usize],
    pred: &[usize],
    class_count: usize,
) -> Result<SingleLabelReport> {
    if truth.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} truth labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Input("cannot score an empty label list".into()));
    }
    let mut frequency = vec![0usize; class_count];
    let mut correct = vec![0usize; class_count];
    let mut total_correct = 0usize;
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= class_count || p >= class_count {
            return Err(Error::Input(format!(
                "instance {i} has class {} out of range 0..{class_count}",
                t.max(p)
            )));
        }
        frequency[t] += 1;
        if t == p {
            correct[t] += 1;
            total_correct += 1;
        }
    }
    let per_class_accuracy = frequency
        .iter()
        .zip(&correct)
        .map(|(&f, &c)| if f == 0 { None } else { Some(c as f64 / f as f64) })
        .collect();
    Ok(SingleLabelReport {
        overall_accuracy: total_correct as f64 / truth.len() as f64,
        per_class_accuracy,
        per_class_frequency: frequency,
        n_instances: truth.len(),
    })
}

/// Where the per-instance label-set size for the top-k evaluation comes
/// from: the multi-label model's prediction for the same instance, or the
/// ground truth itself.
#[derive(Debug, Clone, Copy)]
pub enum KSource<'a> {
    /// One-hot predictions of a multi-label model, same shape as truth.
    FromPrediction(&'a Matrix),
    FromTruth,
}

/// Scores single-label logits against multi-label truth by selecting, per
/// instance, the top k logits where k is that instance's label-set size
/// under `k_source`. Instances with k = 0 or an empty truth row cannot be
/// scored and are skipped; the skip count is returned alongside the report.
pub fn topk_extended_eval(
    truth: &Matrix,
    logits: &Matrix,
    k_source: KSource,
) -> Result<(MultiLabelReport, usize)> {
    if truth.shape() != logits.shape() {
        return Err(Error::Input(format!(
            "truth is {:?} but logits are {:?}",
            truth.shape(),
            logits.shape()
        )));
    }
    require_binary(truth, "truth")?;
    if let KSource::FromPrediction(pred) = k_source {
        if pred.shape() != truth.shape() {
            return Err(Error::Input(format!(
                "k-source predictions are {:?} but truth is {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        require_binary(pred, "k-source prediction")?;
    }

    let (n, classes) = truth.shape();
    let mut kept_truth = Vec::new();
    let mut kept_pred = Vec::new();
    let mut skipped = 0usize;
    for i in 0..n {
        let truth_bits = truth.row(i).iter().filter(|&&v| v == 1.0).count();
        let k = match k_source {
            KSource::FromTruth => truth_bits,
            KSource::FromPrediction(pred) => {
                pred.row(i).iter().filter(|&&v| v == 1.0).count()
            }
        };
        if k == 0 || truth_bits == 0 {
            skipped += 1;
            continue;
        }
        let picked = predict_topk(logits.row(i), k)?;
        let mut row = vec![0.0; classes];
        for c in picked {
            row[c] = 1.0;
        }
        kept_pred.push(row);
        kept_truth.push(truth.row(i).to_vec());
    }
    if kept_truth.is_empty() {
        return Err(Error::Input(format!(
            "all {n} instances were skipped (no labels or k = 0); nothing to score"
        )));
    }
    let rows = kept_truth.len();
    let truth_m = Matrix::from_vec(rows, classes, kept_truth.into_iter().flatten().collect());
    let pred_m = Matrix::from_vec(rows, classes, kept_pred.into_iter().flatten().collect());
    let report = multilabel_report(&truth_m, &pred_m)?;
    Ok((report, skipped))
}
