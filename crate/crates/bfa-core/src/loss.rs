//! Softmax cross-entropy loss and classification accuracy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let (n, _c) = check_logits(logits, labels)?;
    let mut total = 0.0;
    for i in 0..n {
        total += row_nll(logits.row(i), labels[i] as usize);
    }
    Ok(total / n as f64)
}

/// Loss plus its gradient with respect to the logits, `(softmax - onehot)/N`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let (n, c) = check_logits(logits, labels)?;
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = logits.row(i);
        let y = labels[i] as usize;
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        total += z.ln() + m - row[y];
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - m).exp() / z * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((total * inv_n, Tensor::from_values(logits.shape(), grad)?))
}

/// Fraction of rows whose argmax matches the label (ties -> lowest index).
pub fn accuracy(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let hits = count_correct(logits, labels)?;
    Ok(hits as f64 / logits.shape()[0] as f64)
}

/// Number of rows whose argmax matches the label (ties -> lowest index).
pub fn count_correct(logits: &Tensor, labels: &[u8]) -> Result<usize> {
    let (n, _c) = check_logits(logits, labels)?;
    let mut hits = 0usize;
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits)
}

fn check_logits(logits: &Tensor, labels: &[u8]) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("logits must be 2-D, got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} logit rows vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c))
}

fn row_nll(row: &[f64], y: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    z.ln() + m - row[y]
}
