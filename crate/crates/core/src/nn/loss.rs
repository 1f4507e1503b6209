use crate::error::{Error, Result};
use crate::nn::params::ParameterTree;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::Input(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (bs, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != bs {
        return Err(Error::Input(format!(
            "{} labels for a batch of {bs}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(bs * classes);
    let inv_b = 1.0 / bs as f64;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (k, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if k == label { 1.0 } else { 0.0 };
            grad.push((p - target) * inv_b);
        }
    }
    Ok((loss * inv_b, Tensor::new(vec![bs, classes], grad)?))
}

/// In-place `w <- w - lr * (g + weight_decay * w)`.
pub fn sgd_step(
    params: &mut ParameterTree,
    grads: &ParameterTree,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::Usage(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    params.ensure_same_structure(grads)?;
    for ((_, w), (_, g)) in params.iter_mut().zip(grads.iter()) {
        for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
            *wv -= lr * (gv + weight_decay * *wv);
        }
    }
    Ok(())
}
