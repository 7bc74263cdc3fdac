use super::tensor::Tensor;
use crate::{Error, Result};

/// Tolerance on `sum(target) == 1` for class distributions.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a `[batch, classes]` matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let p = softmax(logits.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

pub fn check_distribution(target: &[f64]) -> Result<()> {
    let total: f64 = target.iter().sum();
    if target.iter().any(|&t| !(t >= 0.0)) || (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::invalid(format!(
            "target is not a probability distribution (sum {total})"
        )));
    }
    Ok(())
}

/// Cross-entropy `H(target, softmax(logits))` and its gradient
/// `softmax(logits) - target` with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::dim(format!(
            "{} logits against a {}-class target",
            logits.len(),
            target.len()
        )));
    }
    check_distribution(target)?;
    let lse = log_sum_exp(logits);
    // Each term t * (lse - z) is non-negative, so the sum is too.
    let loss = logits
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(z, t)| t * (lse - z))
        .sum();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(z, t)| (z - lse).exp() - t)
        .collect();
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch; the returned gradient already carries the
/// `1 / batch` factor.
pub fn batch_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape() != targets.shape() {
        return Err(Error::dim(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.rows();
    let scale = 1.0 / n as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for r in 0..n {
        let (loss, g) = softmax_cross_entropy(logits.row(r), targets.row(r))?;
        total += loss;
        for (dst, v) in grad.row_mut(r).iter_mut().zip(g) {
            *dst = v * scale;
        }
    }
    Ok((total * scale, grad))
}
