//! The three client-side loss terms and their weighted sum.

use rand::Rng;

use super::{weak_augment, ClientStack, PseudoLabeled, StackGrads, WeakAugment};
use crate::nn::{batch_cross_entropy, dot, log_sum_exp, Tensor};
use crate::{Error, Result};

/// Client-side SSL weights and temperatures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslHyper {
    /// Weight of the pseudo-label loss.
    pub lambda_u: f64,
    /// Weight of the contrastive loss.
    pub lambda_v: f64,
    /// InfoNCE temperature.
    pub phi: f64,
    pub ema_decay: f64,
}

impl Default for SslHyper {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            lambda_v: 0.1,
            phi: 0.5,
            ema_decay: 0.99,
        }
    }
}

impl SslHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_v >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.phi > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("EMA decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn one_hot_rows(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!(
                "label {y} outside {classes} classes"
            )));
        }
        t.row_mut(r)[y] = 1.0;
    }
    Ok(t)
}

/// Mean cross-entropy of weakly augmented `features` through the stack,
/// against hard `labels`. Gradients reach both the body and the head.
pub fn class_loss<R: Rng + ?Sized>(
    stack: &ClientStack,
    features: &Tensor,
    labels: &[usize],
    aug: &WeakAugment,
    rng: &mut R,
) -> Result<(f64, StackGrads)> {
    if labels.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    if features.rank() != 2 || features.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} labels for features {:?}",
            labels.len(),
            features.shape()
        )));
    }
    let x = weak_augment(features, aug, rng);
    let (logits, cache) = stack.forward(&x)?;
    let targets = one_hot_rows(labels, stack.classes())?;
    let (loss, grad) = batch_cross_entropy(&logits, &targets)?;
    Ok((loss, stack.backward(&cache, &grad)?))
}

/// Supervised auxiliary loss on a labelled batch.
pub fn auxiliary_loss<R: Rng + ?Sized>(
    student: &ClientStack,
    features: &Tensor,
    labels: &[usize],
    aug: &WeakAugment,
    rng: &mut R,
) -> Result<(f64, StackGrads)> {
    class_loss(student, features, labels, aug, rng)
}

/// Same form as the auxiliary loss, with pseudo-labels as targets. `pool`
/// holds the unlabelled rows the batch indexes into.
pub fn unsupervised_loss<R: Rng + ?Sized>(
    student: &ClientStack,
    pool: &Tensor,
    batch: &[PseudoLabeled],
    aug: &WeakAugment,
    rng: &mut R,
) -> Result<(f64, StackGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let idx: Vec<usize> = batch.iter().map(|p| p.index).collect();
    let labels: Vec<usize> = batch.iter().map(|p| p.pseudo_label).collect();
    class_loss(student, &pool.select_rows(&idx)?, &labels, aug, rng)
}

/// InfoNCE over student features `z` and teacher features `z_teacher`
/// (both `[K, d]`):
///
/// `L = -sum_k log( exp(z_k.t_k/phi) / (exp(z_k.t_k/phi) + sum_{j != k} exp(z_k.z_j/phi)) )`
///
/// Returns the loss and its gradient with respect to `z`; the teacher side
/// receives no gradient.
pub fn contrastive_loss(z: &Tensor, z_teacher: &Tensor, phi: f64) -> Result<(f64, Tensor)> {
    if z.rank() != 2 || z.shape() != z_teacher.shape() {
        return Err(Error::dim(format!(
            "student features {:?} vs teacher features {:?}",
            z.shape(),
            z_teacher.shape()
        )));
    }
    if !(phi > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let k = z.rows();
    let mut grad = Tensor::zeros(z.shape());
    let mut loss = 0.0;
    // scores[0] is the positive pair, scores[1..] the negatives in row order.
    let mut scores = Vec::with_capacity(k);
    for a in 0..k {
        let za = z.row(a);
        scores.clear();
        scores.push(dot(za, z_teacher.row(a)) / phi);
        for j in (0..k).filter(|&j| j != a) {
            scores.push(dot(za, z.row(j)) / phi);
        }
        let lse = log_sum_exp(&scores);
        loss += lse - scores[0];

        // d/dz_a: (p_pos - 1) t_a / phi + sum_j p_j z_j / phi
        // d/dz_j: p_j z_a / phi
        let p_pos = (scores[0] - lse).exp();
        let mut ga = vec![0.0; z.cols()];
        for (g, t) in ga.iter_mut().zip(z_teacher.row(a)) {
            *g += (p_pos - 1.0) * t / phi;
        }
        for (slot, j) in (0..k).filter(|&j| j != a).enumerate() {
            let p = (scores[slot + 1] - lse).exp();
            for (g, zj) in ga.iter_mut().zip(z.row(j)) {
                *g += p * zj / phi;
            }
            for (g, zv) in grad.row_mut(j).iter_mut().zip(za) {
                *g += p * zv / phi;
            }
        }
        for (g, v) in grad.row_mut(a).iter_mut().zip(ga) {
            *g += v;
        }
    }
    Ok((loss, grad))
}

/// `L^x + lambda_u L^u + lambda_v L^v`.
pub fn client_loss(aux: f64, unsup: f64, contrastive: f64, hyper: &SslHyper) -> f64 {
    aux + hyper.lambda_u * unsup + hyper.lambda_v * contrastive
}
