use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy on one logit: `(softplus(z) - y z, sigmoid(z) - y)`.
pub fn sigmoid_xent_scalar(logit: f64, label: bool) -> (f64, f64) {
    let y = if label { 1.0 } else { 0.0 };
    (softplus(logit) - y * logit, sigmoid(logit) - y)
}

/// Mean binary cross-entropy over a `[n, 1]` (or `[n]`) batch of logits.
///
/// Returns the mean loss and its gradient with respect to every logit.
pub fn sigmoid_xent<T: Scalar>(logits: &Tensor<T>, labels: &[bool]) -> Result<(f64, Tensor<T>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&z, &y) in logits.data().iter().zip(labels) {
        let (l, g) = sigmoid_xent_scalar(z.as_f64(), y);
        loss += l;
        grad.push(T::from_f64_lossy(g / n));
    }
    Ok((loss / n, Tensor::new(logits.shape(), grad)?))
}

/// Softmax probabilities of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `(logsumexp(z) - z[label], softmax(z) - onehot(label))` for one row.
pub fn softmax_xent_row(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// Mean categorical cross-entropy over `[n, c]` logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let &[n, c] = logits.shape() else {
        return Err(Error::Shape(format!(
            "softmax logits must be [n, c], got {:?}",
            logits.shape()
        )));
    };
    if n != labels.len() || n == 0 {
        return Err(Error::Shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let (l, g) = softmax_xent_row(&row, label)?;
        loss += l;
        grad.extend(g.into_iter().map(|v| T::from_f64_lossy(v / n as f64)));
    }
    Ok((loss / n as f64, Tensor::new(logits.shape(), grad)?))
}
