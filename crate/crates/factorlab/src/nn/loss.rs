use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("logits must be non-empty and finite")]
    BadLogits,
    #[error("logits tensor must be [batch, classes], got {0:?}")]
    BadShape(Vec<usize>),
    #[error("{labels} labels for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
}

/// Numerically stable softmax cross-entropy for one sample. Returns the loss
/// and the gradient with respect to the logits (`softmax - onehot`).
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), LossError> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(LossError::BadLogits);
    }
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = grad.iter().sum();
    let loss = z.ln() - (logits[label] - m);
    for g in grad.iter_mut() {
        *g /= z;
    }
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over the labeled rows of a `[batch, classes]`
/// logits tensor. Rows with `None` labels contribute no loss and receive a
/// zero gradient row. With no labeled rows, the loss and gradient are zero.
pub fn batch_softmax_cross_entropy(
    logits: &Tensor,
    labels: &[Option<usize>],
) -> Result<(f64, Tensor), LossError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(LossError::BadShape(shape.to_vec()));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            batch: n,
        });
    }
    let labeled = labels.iter().flatten().count();
    let mut grad = Tensor::zeros(shape.to_vec());
    if labeled == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / labeled as f64;
    let mut total = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let Some(y) = label else { continue };
        let (loss, row_grad) = softmax_cross_entropy(&logits.values()[r * c..(r + 1) * c], *y)?;
        total += loss;
        for (dst, g) in grad.values_mut()[r * c..(r + 1) * c].iter_mut().zip(row_grad) {
            *dst = g * inv;
        }
    }
    Ok((total * inv, grad))
}
