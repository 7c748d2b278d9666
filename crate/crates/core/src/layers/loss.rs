use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape(&[labels.len(), 0], logits.shape()));
    };
    if labels.len() != n {
        return Err(Error::shape(&[labels.len(), k], logits.shape()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label, classes: k });
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].as_f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64_lossy((e / z - target) * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, k], grad)?))
}
