use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cross-entropy of `softmax(logits)` against `label`, with the gradient
/// `softmax(logits) − onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Input(format!(
            "cross-entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Mean cross-entropy over a `[batch, classes]` logit tensor. The returned
/// gradient is with respect to the logits of the mean loss.
pub fn batch_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [batch, classes] = logits.shape() else {
        return Err(Error::Shape {
            layer: "softmax-cross-entropy",
            expected: "[batch, classes]".into(),
            got: logits.shape().to_vec(),
        });
    };
    let (batch, classes) = (*batch, *classes);
    if labels.len() != batch {
        return Err(Error::Input(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let inv = 1.0 / batch as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(batch * classes);
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let (l, g) = softmax_cross_entropy(row, label)?;
        total += l;
        grad.extend(g.into_iter().map(|x| x * inv));
    }
    Ok((total * inv, Tensor::new(vec![batch, classes], grad)?))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
